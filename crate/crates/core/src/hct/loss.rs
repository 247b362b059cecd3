use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hct::augment::{image_side, rotate90, strong_augment, weak_augment, AugmentPolicy};
use crate::hct::model::{MlpModel, Params};
use crate::numerics::{sample_beta, Matrix, RngStream};

/// Settings of the mixed-feature consistency loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HctConfig {
    /// `λ ~ Beta(alpha, alpha)`.
    pub alpha: f64,
    /// Weight of the consistency term in the total loss.
    pub eta: f64,
    /// Layers the mix may happen at; `None` means every layer `0..=L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eligible_layers: Option<Vec<usize>>,
    /// Fraction of epochs trained without the consistency term.
    pub schedule_fraction: f64,
    pub weak_aug: AugmentPolicy,
    pub strong_aug: AugmentPolicy,
    /// Manifold Mixup: the second branch is weakly augmented too.
    #[serde(default)]
    pub mm_mode: bool,
    /// Use this `λ` instead of sampling it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_lambda: Option<f64>,
}

impl Default for HctConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            eta: 1.0,
            eligible_layers: None,
            schedule_fraction: 1.0 / 3.0,
            weak_aug: AugmentPolicy::weak_vector(),
            strong_aug: AugmentPolicy::strong_vector(),
            mm_mode: false,
            fixed_lambda: None,
        }
    }
}

impl HctConfig {
    pub fn for_images() -> Self {
        Self {
            weak_aug: AugmentPolicy::weak_image(),
            strong_aug: AugmentPolicy::strong_image(),
            ..Self::default()
        }
    }

    pub fn manifold_mixup(mut self) -> Self {
        self.mm_mode = true;
        self
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.schedule_fraction) {
            return Err(Error::InvalidConfig("schedule_fraction must be in [0,1]".into()));
        }
        if let Some(layers) = &self.eligible_layers {
            if layers.is_empty() {
                return Err(Error::InvalidConfig("eligible_layers is empty".into()));
            }
            if let Some(&l) = layers.iter().find(|&&l| l > depth) {
                return Err(Error::InvalidLayer { layer: l, max: depth });
            }
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidConfig(format!("fixed_lambda must be in [0,1], got {l}")));
            }
        }
        self.weak_aug.validate()?;
        self.strong_aug.validate()
    }

    fn layers(&self, depth: usize) -> Vec<usize> {
        self.eligible_layers.clone().unwrap_or_else(|| (0..=depth).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::ShapeError(format!("{} labels for {} rows", y.len(), x.nrows())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `(x1, y1, x2, y2)` tuples for the consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub first: Batch,
    pub second: Batch,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// Pair examples by independent uniform draws from the batch, with replacement.
pub fn make_pairs(batch: &Batch, stream: RngStream) -> Result<PairBatch> {
    if batch.is_empty() {
        return Err(Error::EmptySet("cannot pair an empty batch".into()));
    }
    let mut rng = stream.rng();
    let n = batch.len();
    let mut draw = || -> Vec<usize> { (0..n).map(|_| rng.random_range(0..n)).collect() };
    let (a, b) = (draw(), draw());
    let pick = |idx: &[usize]| Batch {
        x: batch.x.select_rows(idx),
        y: idx.iter().map(|&i| batch.y[i]).collect(),
    };
    Ok(PairBatch {
        first: pick(&a),
        second: pick(&b),
    })
}

/// `λ h1 + (1 - λ) h2`.
pub fn mix_hidden(h1: &[f64], h2: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if h1.len() != h2.len() {
        return Err(Error::ShapeError(format!("mixing widths {} and {}", h1.len(), h2.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} outside [0,1]")));
    }
    Ok(h1.iter().zip(h2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

fn check_one_hot(y: &[f64]) -> Result<()> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(Error::InvalidLabel(format!("{y:?} is not one-hot")));
    }
    Ok(())
}

/// `λ y1 + (1 - λ) y2` for one-hot `y1`, `y2`.
pub fn mix_labels(y1: &[f64], y2: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_one_hot(y1)?;
    check_one_hot(y2)?;
    mix_hidden(y1, y2, lambda)
}

pub fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

/// Cross entropy `-Σ t_c log softmax(z)_c` and its gradient `softmax(z) - t`
/// (valid for targets summing to one).
pub(crate) fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = target
        .iter()
        .zip(logits)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, z)| -t * (z - lse))
        .sum();
    let grad = logits.iter().zip(target).map(|(z, t)| (z - lse).exp() - t).collect();
    (loss, grad)
}

fn check_labels(y: &[usize], classes: usize) -> Result<()> {
    match y.iter().find(|&&l| l >= classes) {
        Some(l) => Err(Error::InvalidLabel(format!("label {l} outside 0..{classes}"))),
        None => Ok(()),
    }
}

/// Mean cross entropy of the classifier head over the batch, with gradients.
pub fn ce_loss(model: &MlpModel, batch: &Batch) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::EmptySet("cross entropy over an empty batch".into()));
    }
    let c = model.num_classes();
    check_labels(&batch.y, c)?;
    if batch.x.ncols() != model.input_dim() {
        return Err(Error::ShapeError(format!(
            "batch width {} for model input {}",
            batch.x.ncols(),
            model.input_dim()
        )));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    let head = &model.params.classifier;
    for (x, &y) in batch.x.iter_rows().zip(&batch.y) {
        let trace = model.run_blocks(x, 0, model.depth());
        let emb = trace.last().unwrap();
        let (loss, mut g) = soft_cross_entropy(&head.apply(emb), &one_hot(y, c));
        total += loss;
        g.iter_mut().for_each(|v| *v *= scale);
        let gemb = MlpModel::backward_head(head, emb, &g, &mut grads.classifier);
        model.backward_blocks(&trace, 0, gemb, &mut grads);
    }
    Ok((total * scale, grads))
}

/// What one pair of the consistency loss drew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDraw {
    pub lambda: f64,
    pub layer: usize,
}

/// Draws used by [`hct_loss`] for each pair, without evaluating the loss.
pub fn hct_draws(model: &MlpModel, pairs: &PairBatch, stream: RngStream, config: &HctConfig) -> Result<Vec<PairDraw>> {
    config.validate(model.depth())?;
    let layers = config.layers(model.depth());
    (0..pairs.len())
        .map(|j| {
            let mut rng = stream.derive(j as u64).rng();
            draw_pair(&mut rng, config, &layers)
        })
        .collect()
}

fn draw_pair(rng: &mut crate::numerics::StreamRng, config: &HctConfig, layers: &[usize]) -> Result<PairDraw> {
    let lambda = match config.fixed_lambda {
        Some(l) => l,
        None => sample_beta(rng, config.alpha)?,
    };
    let layer = layers[rng.random_range(0..layers.len())];
    Ok(PairDraw { lambda, layer })
}

/// Mixed-feature consistency loss. For each pair: draw `λ` and a layer `l`,
/// weakly augment `x1`, strongly augment `x2` (weakly under `mm_mode`), mix
/// their layer-`l` representations, finish the forward pass, and score the
/// classifier against the same mix of one-hot labels. Returns the batch mean
/// and gradients through both branches.
pub fn hct_loss(model: &MlpModel, pairs: &PairBatch, stream: RngStream, config: &HctConfig) -> Result<(f64, Params)> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("consistency loss over an empty batch".into()));
    }
    config.validate(model.depth())?;
    let c = model.num_classes();
    check_labels(&pairs.first.y, c)?;
    check_labels(&pairs.second.y, c)?;
    if pairs.second.len() != pairs.len() {
        return Err(Error::ShapeError("pair halves differ in length".into()));
    }
    for b in [&pairs.first, &pairs.second] {
        if b.x.ncols() != model.input_dim() {
            return Err(Error::ShapeError("pair input width does not match the model".into()));
        }
    }
    let depth = model.depth();
    let layers = config.layers(depth);
    let scale = 1.0 / pairs.len() as f64;
    let head = &model.params.classifier;
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    for j in 0..pairs.len() {
        let mut rng = stream.derive(j as u64).rng();
        let PairDraw { lambda, layer } = draw_pair(&mut rng, config, &layers)?;
        let x1 = weak_augment(pairs.first.x.row(j), &mut rng, &config.weak_aug)?;
        let x2 = if config.mm_mode {
            weak_augment(pairs.second.x.row(j), &mut rng, &config.weak_aug)?
        } else {
            strong_augment(pairs.second.x.row(j), &mut rng, &config.strong_aug)?
        };
        let t1 = model.run_blocks(&x1, 0, layer);
        let t2 = model.run_blocks(&x2, 0, layer);
        let mixed = mix_hidden(t1.last().unwrap(), t2.last().unwrap(), lambda)?;
        let t3 = model.run_blocks(&mixed, layer, depth);
        let emb = t3.last().unwrap();
        let target = mix_labels(&one_hot(pairs.first.y[j], c), &one_hot(pairs.second.y[j], c), lambda)?;
        let (loss, mut g) = soft_cross_entropy(&head.apply(emb), &target);
        total += loss;
        g.iter_mut().for_each(|v| *v *= scale);
        let gemb = MlpModel::backward_head(head, emb, &g, &mut grads.classifier);
        let gmix = model.backward_blocks(&t3, layer, gemb, &mut grads);
        if layer > 0 {
            model.backward_blocks(&t1, 0, gmix.iter().map(|v| lambda * v).collect(), &mut grads);
            model.backward_blocks(&t2, 0, gmix.iter().map(|v| (1.0 - lambda) * v).collect(), &mut grads);
        }
    }
    Ok((total * scale, grads))
}

/// Rotation loss with given quarter-turn counts per image.
pub fn rot_loss_with(model: &MlpModel, images: &Matrix, quarter_turns: &[usize]) -> Result<(f64, Params)> {
    let head = model.params.rotation.as_ref().ok_or(Error::MissingHead("rotation"))?;
    if images.is_empty() {
        return Err(Error::EmptySet("rotation loss over an empty batch".into()));
    }
    if quarter_turns.len() != images.nrows() {
        return Err(Error::ShapeError("one rotation per image required".into()));
    }
    let side = image_side(images.ncols())?;
    if images.ncols() != model.input_dim() {
        return Err(Error::ShapeError("image size does not match the model".into()));
    }
    let scale = 1.0 / images.nrows() as f64;
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    for (x, &k) in images.iter_rows().zip(quarter_turns) {
        if k > 3 {
            return Err(Error::InvalidLabel(format!("rotation class {k} outside 0..4")));
        }
        let rotated = rotate90(x, side, k);
        let trace = model.run_blocks(&rotated, 0, model.depth());
        let emb = trace.last().unwrap();
        let (loss, mut g) = soft_cross_entropy(&head.apply(emb), &one_hot(k, 4));
        total += loss;
        g.iter_mut().for_each(|v| *v *= scale);
        let grot = grads.rotation.as_mut().expect("zeros_like keeps the head");
        let gemb = MlpModel::backward_head(head, emb, &g, grot);
        model.backward_blocks(&trace, 0, gemb, &mut grads);
    }
    Ok((total * scale, grads))
}

/// Self-supervised rotation loss: each image is rotated by a uniformly drawn
/// multiple of 90 degrees and the rotation head predicts which.
pub fn rot_loss(model: &MlpModel, images: &Matrix, stream: RngStream) -> Result<(f64, Params)> {
    let mut rng = stream.rng();
    let ks: Vec<usize> = (0..images.nrows()).map(|_| rng.random_range(0..4)).collect();
    rot_loss_with(model, images, &ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hct::model::ModelShape;

    fn model(rotation: bool) -> MlpModel {
        let shape = ModelShape {
            input_dim: 4,
            widths: vec![6, 5],
            num_classes: 3,
            rotation_head: rotation,
        };
        MlpModel::new(&shape, RngStream::new(9)).unwrap()
    }

    fn batch() -> Batch {
        let x = Matrix::from_rows(&[[0.5, 1.0, -0.3, 2.0], [1.5, -1.0, 0.7, 0.1], [0.0, 0.2, 0.4, 0.6]]).unwrap();
        Batch::new(x, vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn mix_examples() {
        assert_eq!(mix_hidden(&[1.0, 2.0], &[3.0, 4.0], 1.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mix_hidden(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(), vec![3.0, 4.0]);
        let m = mix_hidden(&[1.0, 0.0], &[0.0, 1.0], 0.3).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.7).abs() < 1e-15);
        assert!(matches!(mix_hidden(&[1.0], &[1.0, 2.0], 0.5), Err(Error::ShapeError(_))));

        let y = mix_labels(&one_hot(0, 3), &one_hot(2, 3), 0.3).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-15 && y[1] == 0.0 && (y[2] - 0.7).abs() < 1e-15);
        assert_eq!(mix_labels(&one_hot(1, 3), &one_hot(1, 3), 0.42).unwrap(), one_hot(1, 3));
        assert_eq!(
            mix_labels(&one_hot(0, 3), &one_hot(2, 3), 0.5).unwrap(),
            mix_labels(&one_hot(2, 3), &one_hot(0, 3), 0.5).unwrap()
        );
        assert!(matches!(mix_labels(&[0.5, 0.5], &one_hot(0, 2), 0.5), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut m = model(false);
        m.params.classifier = crate::hct::model::Affine::zeros(5, 3);
        let (loss, _) = ce_loss(&m, &batch()).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let (loss, g) = soft_cross_entropy(&[50.0, 0.0, 0.0], &one_hot(0, 3));
        assert!(loss < 1e-6);
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn ce_errors() {
        let m = model(false);
        let empty = Batch::new(Matrix::empty(4), vec![]).unwrap();
        assert!(matches!(ce_loss(&m, &empty), Err(Error::EmptySet(_))));
        let mut b = batch();
        b.y[0] = 3;
        assert!(matches!(ce_loss(&m, &b), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn degenerate_lambda_reduces_to_ce() {
        let m = model(false);
        let pairs = make_pairs(&batch(), RngStream::new(1)).unwrap();
        let ident = HctConfig {
            weak_aug: AugmentPolicy::identity(),
            strong_aug: AugmentPolicy::identity(),
            eligible_layers: Some(vec![0]),
            fixed_lambda: Some(1.0),
            ..HctConfig::default()
        };
        let (hct, _) = hct_loss(&m, &pairs, RngStream::new(2), &ident).unwrap();
        let (ce, _) = ce_loss(&m, &pairs.first).unwrap();
        assert!((hct - ce).abs() < 1e-12);
        let zero = HctConfig { fixed_lambda: Some(0.0), eligible_layers: None, ..ident };
        let (hct, _) = hct_loss(&m, &pairs, RngStream::new(2), &zero).unwrap();
        let (ce, _) = ce_loss(&m, &pairs.second).unwrap();
        assert!((hct - ce).abs() < 1e-12);
    }

    #[test]
    fn draws_cover_eligible_layers() {
        let m = model(false);
        let b = Batch::new(Matrix::zeros(200, 4), vec![0; 200]).unwrap();
        let pairs = make_pairs(&b, RngStream::new(1)).unwrap();
        let cfg = HctConfig { eligible_layers: Some(vec![0, 2]), ..HctConfig::default() };
        let draws = hct_draws(&m, &pairs, RngStream::new(3), &cfg).unwrap();
        assert!(draws.iter().all(|d| d.layer == 0 || d.layer == 2));
        assert!(draws.iter().any(|d| d.layer == 0) && draws.iter().any(|d| d.layer == 2));
        assert!(draws.iter().all(|d| (0.0..=1.0).contains(&d.lambda)));
        let bad = HctConfig { eligible_layers: Some(vec![3]), ..HctConfig::default() };
        assert!(matches!(hct_loss(&m, &pairs, RngStream::new(3), &bad), Err(Error::InvalidLayer { .. })));
    }

    #[test]
    fn rotation_loss_cases() {
        let shape = ModelShape { input_dim: 9, widths: vec![5], num_classes: 2, rotation_head: true };
        let mut m = MlpModel::new(&shape, RngStream::new(4)).unwrap();
        let imgs = Matrix::from_rows(&[vec![0.7; 9], vec![0.7; 9]]).unwrap();
        m.params.rotation = Some(crate::hct::model::Affine::zeros(5, 4));
        let (loss, _) = rot_loss(&m, &imgs, RngStream::new(0)).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let m = MlpModel::new(&shape, RngStream::new(4)).unwrap();
        let varied = Matrix::from_rows(&[(0..9).map(f64::from).collect::<Vec<_>>()]).unwrap();
        let (l0, _) = rot_loss_with(&m, &varied, &[0]).unwrap();
        let logits = m.params.rotation.as_ref().unwrap().apply(&m.forward_full(varied.row(0)).unwrap());
        let (expect, _) = soft_cross_entropy(&logits, &one_hot(0, 4));
        assert_eq!(l0, expect);

        let no_head = model(false);
        assert!(matches!(rot_loss(&no_head, &batch().x, RngStream::new(0)), Err(Error::MissingHead(_))));
        let wrong = MlpModel::new(&ModelShape { input_dim: 3, widths: vec![2], num_classes: 2, rotation_head: true }, RngStream::new(0)).unwrap();
        let v = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(rot_loss(&wrong, &v, RngStream::new(0)), Err(Error::InvalidInput(_))));
    }
}
