use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_normal, Matrix, RngStream};

/// Dense layer `z = W a + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn init(input: usize, output: usize, scale: f64, stream: RngStream) -> Self {
        let mut rng = stream.rng();
        let std = (scale / input as f64).sqrt();
        let data = (0..input * output).map(|_| std * sample_normal(&mut rng)).collect();
        Self {
            weight: Matrix::from_vec(output, input, data).expect("sized"),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        self.weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(a).map(|(x, y)| x * y).sum::<f64>())
            .collect()
    }

    /// Accumulate parameter gradients for input `a` and output gradient `gz`,
    /// returning the gradient with respect to `a`.
    fn backward(&self, a: &[f64], gz: &[f64], grad: &mut Affine) -> Vec<f64> {
        let mut ga = vec![0.0; a.len()];
        for (o, &g) in gz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let gw = grad.weight.row_mut(o);
            for (gwi, ai) in gw.iter_mut().zip(a) {
                *gwi += g * ai;
            }
            for (gai, wi) in ga.iter_mut().zip(self.weight.row(o)) {
                *gai += g * wi;
            }
        }
        ga
    }

    fn len(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

/// Every trainable tensor of an [`MlpModel`]; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub blocks: Vec<Affine>,
    pub classifier: Affine,
    pub rotation: Option<Affine>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine| Affine::zeros(a.input_dim(), a.output_dim());
        Self {
            blocks: self.blocks.iter().map(z).collect(),
            classifier: z(&self.classifier),
            rotation: self.rotation.as_ref().map(z),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Affine> {
        self.blocks.iter().chain(std::iter::once(&self.classifier)).chain(self.rotation.iter())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .chain(self.rotation.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.tensors().map(Affine::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened parameters: for each tensor in order (blocks, classifier,
    /// rotation head) the row-major weights then the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in self.tensors() {
            out.extend_from_slice(t.weight.as_slice());
            out.extend_from_slice(&t.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeError(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut pos = 0;
        for t in self.tensors_mut() {
            let w = t.weight.as_mut_slice();
            w.copy_from_slice(&flat[pos..pos + w.len()]);
            pos += w.len();
            let b = t.bias.as_mut_slice();
            b.copy_from_slice(&flat[pos..pos + b.len()]);
            pos += b.len();
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.weight.as_mut_slice() {
                *x *= s;
            }
            for x in &mut t.bias {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.weight.is_finite() && t.bias.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    /// Output width of each ReLU block; the last one is the embedding size.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub rotation_head: bool,
}

impl ModelShape {
    /// Three 128-wide hidden blocks followed by a 64-wide embedding block.
    pub fn default_for(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            widths: vec![128, 128, 128, 64],
            num_classes,
            rotation_head: false,
        }
    }
}

/// ReLU MLP embedding network `f = f^L o ... o f^1` with `f^0` the identity,
/// a linear classifier head and an optional 4-way rotation head.
///
/// Hidden representations are indexed `h^0 = x`, `h^l = relu(W_l h^{l-1} + b_l)`;
/// `h^L` is the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub params: Params,
}

/// Activations of a contiguous run of blocks: `acts[0]` is the input, `acts[i]`
/// the post-ReLU output of the `i`-th block of the run.
pub(crate) type Trace = Vec<Vec<f64>>;

impl MlpModel {
    pub fn new(shape: &ModelShape, stream: RngStream) -> Result<Self> {
        if shape.input_dim == 0 || shape.widths.is_empty() || shape.widths.contains(&0) || shape.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("invalid model shape {shape:?}")));
        }
        let mut blocks = Vec::with_capacity(shape.widths.len());
        let mut prev = shape.input_dim;
        for (i, &w) in shape.widths.iter().enumerate() {
            blocks.push(Affine::init(prev, w, 2.0, stream.derive(i as u64)));
            prev = w;
        }
        let classifier = Affine::init(prev, shape.num_classes, 1.0, stream.derive(1000));
        let rotation = shape
            .rotation_head
            .then(|| Affine::init(prev, 4, 1.0, stream.derive(1001)));
        Ok(Self {
            params: Params {
                blocks,
                classifier,
                rotation,
            },
        })
    }

    pub fn from_params(params: Params) -> Result<Self> {
        let mut prev = params
            .blocks
            .first()
            .ok_or_else(|| Error::InvalidConfig("model needs at least one block".into()))?
            .input_dim();
        for (i, b) in params.blocks.iter().enumerate() {
            if b.input_dim() != prev || b.bias.len() != b.output_dim() {
                return Err(Error::ShapeError(format!("block {i} does not chain")));
            }
            prev = b.output_dim();
        }
        for head in std::iter::once(&params.classifier).chain(params.rotation.iter()) {
            if head.input_dim() != prev || head.bias.len() != head.output_dim() {
                return Err(Error::ShapeError("head does not match embedding width".into()));
            }
        }
        Ok(Self { params })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.input_dim(),
            widths: self.params.blocks.iter().map(Affine::output_dim).collect(),
            num_classes: self.num_classes(),
            rotation_head: self.params.rotation.is_some(),
        }
    }

    /// Number of blocks `L`; valid layer indices are `0..=L`.
    pub fn depth(&self) -> usize {
        self.params.blocks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.params.blocks[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.classifier.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.params.classifier.output_dim()
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l > self.depth() {
            return Err(Error::InvalidLayer { layer: l, max: self.depth() });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64], l: usize) -> Result<()> {
        let want = if l == 0 { self.input_dim() } else { self.params.blocks[l - 1].output_dim() };
        if x.len() != want {
            return Err(Error::ShapeError(format!(
                "layer {l} expects width {want}, got {}",
                x.len()
            )));
        }
        Ok(())
    }

    /// `h^l`; `l = 0` returns the input.
    pub fn forward_to_layer(&self, x: &[f64], l: usize) -> Result<Vec<f64>> {
        self.check_layer(l)?;
        self.check_input(x, 0)?;
        Ok(self.run_blocks(x, 0, l).pop().expect("trace holds the input"))
    }

    /// Apply blocks `l+1..=L` to a layer-`l` representation.
    pub fn forward_from_layer(&self, h: &[f64], l: usize) -> Result<Vec<f64>> {
        self.check_layer(l)?;
        self.check_input(h, l)?;
        Ok(self.run_blocks(h, l, self.depth()).pop().expect("trace holds the input"))
    }

    /// The embedding `h^L`.
    pub fn forward_full(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_to_layer(x, self.depth())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.params.classifier.apply(&self.forward_full(x)?))
    }

    /// Embed every row.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.nrows(), self.embedding_dim());
        for (i, row) in x.iter_rows().enumerate() {
            let e = self.forward_full(row)?;
            out.row_mut(i).copy_from_slice(&e);
        }
        Ok(out)
    }

    /// Blocks `from+1..=to` applied to `h` (a layer-`from` representation).
    pub(crate) fn run_blocks(&self, h: &[f64], from: usize, to: usize) -> Trace {
        let mut acts = Vec::with_capacity(to - from + 1);
        acts.push(h.to_vec());
        for block in &self.params.blocks[from..to] {
            let mut z = block.apply(acts.last().unwrap());
            for v in &mut z {
                *v = v.max(0.0);
            }
            acts.push(z);
        }
        acts
    }

    /// Backpropagate `grad_out` (gradient at the last activation of `trace`)
    /// through the blocks that produced it, accumulating into `grads`.
    /// Returns the gradient at the trace's input.
    pub(crate) fn backward_blocks(&self, trace: &Trace, from: usize, grad_out: Vec<f64>, grads: &mut Params) -> Vec<f64> {
        let mut g = grad_out;
        let to = from + trace.len() - 1;
        for l in (from..to).rev() {
            let out = &trace[l - from + 1];
            for (gi, &o) in g.iter_mut().zip(out) {
                if o <= 0.0 {
                    *gi = 0.0;
                }
            }
            g = self.params.blocks[l].backward(&trace[l - from], &g, &mut grads.blocks[l]);
        }
        g
    }

    /// Backward through a head: returns the gradient at the embedding.
    pub(crate) fn backward_head(head: &Affine, emb: &[f64], glogits: &[f64], grad: &mut Affine) -> Vec<f64> {
        head.backward(emb, glogits, grad)
    }
}
