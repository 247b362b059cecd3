//! Prototype-based episode inference: plain prototypes, soft k-means refinement,
//! and calibrated iterative prototype adaptation with momentum.
//!
//! Every prototype carries the convex weights that reconstruct it from the rows
//! it was built from. The basis is the support set followed by the adaptation
//! pool (queries in transductive mode, the auxiliary set in semi-supervised
//! mode); a weight matrix narrower than that basis covers its prefix.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedEpisode;
use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, norm, softmax_unchecked, squared_distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Cosine,
    /// Negative squared euclidean distance.
    NegEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Adapt prototypes with the query set itself.
    #[default]
    Transductive,
    /// Adapt with the auxiliary unlabeled set only; queries are predicted but
    /// never influence the prototypes.
    SemiSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "protonet")]
    ProtoNet,
    #[serde(rename = "semipn")]
    SemiPN,
    #[default]
    Cipa,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::ProtoNet => "protonet",
            Strategy::SemiPN => "semipn",
            Strategy::Cipa => "cipa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Softmax scale applied to similarities.
    pub tau: f64,
    /// Weight of the freshly estimated prototypes in the momentum blend.
    pub sigma: f64,
    /// Adaptation iterations (soft k-means steps for SemiPN).
    pub n_iter: usize,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub mode: InferenceMode,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_true")]
    pub keep_history: bool,
}

fn default_true() -> bool {
    true
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: 15.0,
            sigma: 0.2,
            n_iter: 20,
            distance: Distance::Cosine,
            mode: InferenceMode::Transductive,
            strategy: Strategy::Cipa,
            keep_history: true,
        }
    }
}

impl InferenceConfig {
    pub fn protonet() -> Self {
        Self {
            strategy: Strategy::ProtoNet,
            n_iter: 0,
            ..Self::default()
        }
    }

    pub fn semipn(steps: usize) -> Self {
        Self {
            strategy: Strategy::SemiPN,
            sigma: 1.0,
            n_iter: steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidConfig(format!("sigma must be in [0,1], got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Per-example class probabilities, one simplex row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub probs: Matrix,
}

impl SoftAssignment {
    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    /// Hard predictions; ties go to the lowest class id.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter_rows().map(argmax).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// `n_way x d` class centers.
    pub centers: Matrix,
    /// Center snapshots, one per iteration starting with the initial centers.
    /// Empty when history retention is off.
    pub history: Vec<Matrix>,
    /// `n_way x basis` convex weights reconstructing `centers` from the support
    /// rows followed by the pool rows.
    pub weights: Matrix,
}

impl Prototypes {
    pub fn n_way(&self) -> usize {
        self.centers.nrows()
    }
}

/// Class centroids of the support set.
pub fn init_prototypes(support: &Matrix, labels: &[usize], n_way: usize) -> Result<Prototypes> {
    if labels.len() != support.nrows() {
        return Err(Error::ShapeError(format!(
            "{} support labels for {} rows",
            labels.len(),
            support.nrows()
        )));
    }
    let counts = class_counts(labels, n_way)?;
    let d = support.ncols();
    let mut centers = Matrix::zeros(n_way, d);
    let mut weights = Matrix::zeros(n_way, support.nrows());
    for (i, (&c, row)) in labels.iter().zip(support.iter_rows()).enumerate() {
        for (acc, v) in centers.row_mut(c).iter_mut().zip(row) {
            *acc += v;
        }
        weights.set(c, i, 1.0 / counts[c] as f64);
    }
    for c in 0..n_way {
        let k = counts[c] as f64;
        for v in centers.row_mut(c) {
            *v /= k;
        }
    }
    Ok(Prototypes {
        history: vec![centers.clone()],
        centers,
        weights,
    })
}

fn class_counts(labels: &[usize], n_way: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::InvalidLabel(format!("support label {l} outside 0..{n_way}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::MissingClass(c));
    }
    Ok(counts)
}

/// `softmax(tau * sim(x, p_c))` over classes for each row, with `sim` the cosine
/// similarity or the negative squared euclidean distance.
pub fn predict_soft(features: &Matrix, centers: &Matrix, tau: f64, distance: Distance) -> Result<SoftAssignment> {
    if !features.is_empty() && features.ncols() != centers.ncols() {
        return Err(Error::ShapeError(format!(
            "features have {} columns, prototypes {}",
            features.ncols(),
            centers.ncols()
        )));
    }
    let n_way = centers.nrows();
    let mut probs = Matrix::zeros(features.nrows(), n_way);
    let center_norms: Vec<f64> = centers.iter_rows().map(norm).collect();
    if distance == Distance::Cosine {
        if let Some(c) = center_norms.iter().position(|&n| n == 0.0) {
            return Err(Error::DegenerateVector(format!("prototype {c} has zero norm")));
        }
    }
    let mut logits = vec![0.0; n_way];
    for (i, x) in features.iter_rows().enumerate() {
        match distance {
            Distance::Cosine => {
                let nx = norm(x);
                if nx == 0.0 {
                    return Err(Error::DegenerateVector(format!("feature row {i} has zero norm")));
                }
                for (c, p) in centers.iter_rows().enumerate() {
                    let cos = (dot(x, p) / (nx * center_norms[c])).clamp(-1.0, 1.0);
                    logits[c] = tau * cos;
                }
            }
            Distance::NegEuclidean => {
                for (c, p) in centers.iter_rows().enumerate() {
                    logits[c] = -tau * squared_distance(x, p);
                }
            }
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logits for row {i}")));
        }
        probs.row_mut(i).copy_from_slice(&softmax_unchecked(&logits));
    }
    Ok(SoftAssignment { probs })
}

/// One soft k-means step: support rows count fully for their class, each extra
/// row counts for class `c` with weight `p_c(x)`.
pub fn soft_kmeans_update(
    support: &Matrix,
    labels: &[usize],
    extra: &Matrix,
    assignment: &SoftAssignment,
    n_way: usize,
) -> Result<Prototypes> {
    if assignment.len() != extra.nrows() {
        return Err(Error::ShapeError(format!(
            "{} assignment rows for {} extra rows",
            assignment.len(),
            extra.nrows()
        )));
    }
    if !extra.is_empty() && (extra.ncols() != support.ncols() || assignment.probs.ncols() != n_way) {
        return Err(Error::ShapeError("extra features or assignment width mismatch".into()));
    }
    if labels.len() != support.nrows() {
        return Err(Error::ShapeError("support labels/rows mismatch".into()));
    }
    let s = support.nrows();
    let d = support.ncols();
    let mut raw = Matrix::zeros(n_way, s + extra.nrows());
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_way {
            return Err(Error::InvalidLabel(format!("support label {l} outside 0..{n_way}")));
        }
        raw.set(l, i, 1.0);
    }
    for j in 0..extra.nrows() {
        for c in 0..n_way {
            raw.set(c, s + j, assignment.probs.get(j, c));
        }
    }
    let mut centers = Matrix::zeros(n_way, d);
    let mut weights = raw;
    for c in 0..n_way {
        let total: f64 = weights.row(c).iter().sum();
        if !(total > 0.0) {
            return Err(Error::MissingClass(c));
        }
        let center = centers.row_mut(c);
        for (i, w) in weights.row_mut(c).iter_mut().enumerate() {
            let row = if i < s { support.row(i) } else { extra.row(i - s) };
            for (acc, v) in center.iter_mut().zip(row) {
                *acc += *w * v;
            }
            *w /= total;
        }
        for v in center.iter_mut() {
            *v /= total;
        }
    }
    Ok(Prototypes {
        history: vec![centers.clone()],
        centers,
        weights,
    })
}

/// `sigma * new + (1 - sigma) * old`. The result's history is `old.history`
/// followed by the blended centers.
pub fn momentum_blend(new: &Prototypes, old: &Prototypes, sigma: f64) -> Result<Prototypes> {
    if new.centers.nrows() != old.centers.nrows() || new.centers.ncols() != old.centers.ncols() {
        return Err(Error::ShapeError(format!(
            "blending {}x{} prototypes with {}x{}",
            new.centers.nrows(),
            new.centers.ncols(),
            old.centers.nrows(),
            old.centers.ncols()
        )));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidConfig(format!("sigma must be in [0,1], got {sigma}")));
    }
    let centers = if sigma == 0.0 {
        old.centers.clone()
    } else if sigma == 1.0 {
        new.centers.clone()
    } else {
        let data = new
            .centers
            .as_slice()
            .iter()
            .zip(old.centers.as_slice())
            .map(|(n, o)| sigma * n + (1.0 - sigma) * o)
            .collect();
        Matrix::from_vec(old.centers.nrows(), old.centers.ncols(), data)?
    };
    let width = new.weights.ncols().max(old.weights.ncols());
    let mut weights = Matrix::zeros(new.n_way(), width);
    for c in 0..new.n_way() {
        let out = weights.row_mut(c);
        for (j, w) in new.weights.row(c).iter().enumerate() {
            out[j] += sigma * w;
        }
        for (j, w) in old.weights.row(c).iter().enumerate() {
            out[j] += (1.0 - sigma) * w;
        }
    }
    let mut history = old.history.clone();
    if !history.is_empty() {
        history.push(centers.clone());
    }
    Ok(Prototypes {
        centers,
        history,
        weights,
    })
}

fn adaptation_pool<'a>(episode: &'a CalibratedEpisode, mode: InferenceMode) -> &'a Matrix {
    match mode {
        InferenceMode::Transductive => &episode.query_features,
        InferenceMode::SemiSupervised => &episode.unlabeled_features,
    }
}

fn adapt(episode: &CalibratedEpisode, config: &InferenceConfig, sigma: f64, n_iter: usize) -> Result<(SoftAssignment, Prototypes)> {
    config.validate()?;
    let support = &episode.support_features;
    let labels = &episode.support_labels;
    let pool = adaptation_pool(episode, config.mode);
    let mut protos = init_prototypes(support, labels, episode.n_way)?;
    if !config.keep_history {
        protos.history.clear();
    }
    for _ in 0..n_iter {
        // Pseudo-labels come from the current prototypes only.
        let pseudo = predict_soft(pool, &protos.centers, config.tau, config.distance)?;
        let fresh = soft_kmeans_update(support, labels, pool, &pseudo, episode.n_way)?;
        protos = momentum_blend(&fresh, &protos, sigma)?;
    }
    let out = predict_soft(&episode.query_features, &protos.centers, config.tau, config.distance)?;
    Ok((out, protos))
}

/// Calibrated iterative prototype adaptation on an already calibrated episode.
pub fn cipa_infer(episode: &CalibratedEpisode, config: &InferenceConfig) -> Result<(SoftAssignment, Prototypes)> {
    adapt(episode, config, config.sigma, config.n_iter)
}

/// Soft k-means refinement: full replacement (`sigma = 1`) for `config.n_iter` steps.
pub fn semipn_infer(episode: &CalibratedEpisode, config: &InferenceConfig) -> Result<SoftAssignment> {
    adapt(episode, config, 1.0, config.n_iter).map(|(a, _)| a)
}

/// Support centroids, no adaptation.
pub fn protonet_infer(episode: &CalibratedEpisode, config: &InferenceConfig) -> Result<SoftAssignment> {
    adapt(episode, config, config.sigma, 0).map(|(a, _)| a)
}

/// Dispatch on `config.strategy`, returning the final prototypes as well.
pub fn infer(episode: &CalibratedEpisode, config: &InferenceConfig) -> Result<(SoftAssignment, Prototypes)> {
    match config.strategy {
        Strategy::ProtoNet => adapt(episode, config, config.sigma, 0),
        Strategy::SemiPN => adapt(episode, config, 1.0, config.n_iter),
        Strategy::Cipa => adapt(episode, config, config.sigma, config.n_iter),
    }
}
