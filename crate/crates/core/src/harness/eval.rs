use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{calibrate_episode, CalibratedEpisode, CalibrationConfig};
use crate::episodes::{sample_episode, Episode, EpisodeSpec, FeatureSet};
use crate::error::{Error, Result};
use crate::hct::MlpModel;
use crate::proto_inference::{infer, InferenceConfig, Prototypes, SoftAssignment};
use crate::numerics::RngStream;

/// Summary of one strategy evaluated over many episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    /// SHA-256 of the canonical JSON of everything that determines the episodes
    /// and predictions, except the seed.
    pub config_fingerprint: String,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    /// `1.96 * s / sqrt(n)` with the sample standard deviation `s`.
    pub ci95_halfwidth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_episode: Option<Vec<f64>>,
    /// Not serialized: reports must not depend on scheduling.
    #[serde(skip_serializing, default)]
    pub wall_time_secs: f64,
    pub master_seed: u64,
}

/// `(mean, 1.96 * sample_std / sqrt(n))`; the halfwidth is 0 for a single value.
pub fn mean_and_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptySet("no accuracies to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Fraction of predictions equal to the ground truth.
pub fn score_predictions(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::ShapeError(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptySet("no queries to score".into()));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub n_episodes: usize,
    pub seed: u64,
    pub workers: usize,
    pub keep_per_episode: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_episodes: 1000,
            seed: 0,
            workers: 1,
            keep_per_episode: false,
        }
    }
}

/// Stream of the episode at `index` under `seed`.
pub fn episode_stream(seed: u64, index: usize) -> RngStream {
    RngStream::new(seed).derive(index as u64)
}

/// Everything one episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub episode: Episode,
    pub calibrated: CalibratedEpisode,
    pub assignment: SoftAssignment,
    pub prototypes: Prototypes,
    pub accuracy: f64,
}

pub fn run_episode(
    set: &FeatureSet,
    spec: &EpisodeSpec,
    calibration: &CalibrationConfig,
    inference: &InferenceConfig,
    stream: RngStream,
) -> Result<EpisodeRun> {
    let episode = sample_episode(set, spec, stream)?;
    let calibrated = calibrate_episode(&episode, calibration)?;
    let (assignment, prototypes) = infer(&calibrated, inference)?;
    let accuracy = score_predictions(&assignment.predictions(), &episode.query.labels)?;
    Ok(EpisodeRun {
        episode,
        calibrated,
        assignment,
        prototypes,
        accuracy,
    })
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    dataset: DatasetSummary<'a>,
    episode: &'a EpisodeSpec,
    calibration: &'a CalibrationConfig,
    inference: &'a InferenceConfig,
    n_episodes: usize,
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    source: &'a str,
    n: usize,
    dim: usize,
    classes: usize,
}

/// Configuration problems worth a warning that are not errors.
pub fn config_warnings(spec: &EpisodeSpec, calibration: &CalibrationConfig) -> Vec<String> {
    let mut out = Vec::new();
    if calibration.apply_center && spec.n_way * spec.k_shot < 2 {
        out.push("support set has a single element; centering maps it to zero".to_string());
    }
    let min_q = spec.imbalance.as_ref().and_then(|c| c.iter().copied().min()).unwrap_or(spec.q_query);
    if calibration.apply_center && calibration.center_query_set && spec.n_way * min_q < 2 {
        out.push("query set may have a single element; centering maps it to zero".to_string());
    }
    if calibration.apply_center && calibration.center_unlabeled_set && spec.m_unlabeled > 0 && spec.n_way * spec.m_unlabeled < 2 {
        out.push("unlabeled set has a single element; centering maps it to zero".to_string());
    }
    out
}

/// Evaluate one calibration + inference configuration over `n_episodes`
/// episodes. Episode `i` uses the stream derived from `(seed, i)`, episodes run
/// on `workers` threads and results are reduced in index order, so the report
/// does not depend on the worker count. The first failing episode (by index)
/// aborts the run.
pub fn evaluate(
    set: &FeatureSet,
    spec: &EpisodeSpec,
    calibration: &CalibrationConfig,
    inference: &InferenceConfig,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if options.n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be positive".into()));
    }
    spec.check_feasible(set)?;
    calibration.validate()?;
    inference.validate()?;
    let start = Instant::now();
    let infer_cfg = InferenceConfig {
        keep_history: false,
        ..inference.clone()
    };
    let one = |i: usize| {
        run_episode(set, spec, calibration, &infer_cfg, episode_stream(options.seed, i))
            .map(|r| r.accuracy)
            .map_err(|e| Error::EpisodeFailed {
                index: i,
                source: Box::new(e),
            })
    };
    let results: Vec<Result<f64>> = if options.workers <= 1 {
        (0..options.n_episodes).map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| (0..options.n_episodes).into_par_iter().map(one).collect())
    };
    let accuracies = results.into_iter().collect::<Result<Vec<f64>>>()?;
    let (mean_accuracy, ci95_halfwidth) = mean_and_ci95(&accuracies)?;
    let config_fingerprint = fingerprint(&FingerprintInput {
        dataset: DatasetSummary {
            source: &set.source,
            n: set.len(),
            dim: set.dim(),
            classes: set.num_classes(),
        },
        episode: spec,
        calibration,
        inference: &infer_cfg,
        n_episodes: options.n_episodes,
    })?;
    Ok(EvalReport {
        strategy: inference.strategy.name().to_string(),
        config_fingerprint,
        n_episodes: options.n_episodes,
        mean_accuracy,
        ci95_halfwidth,
        per_episode: options.keep_per_episode.then_some(accuracies),
        wall_time_secs: start.elapsed().as_secs_f64(),
        master_seed: options.seed,
    })
}

/// Replace every row of `set` by the model's embedding.
pub fn embed_feature_set(model: &MlpModel, set: &FeatureSet) -> Result<FeatureSet> {
    let mut out = set.clone();
    out.features = model.embed(&set.features)?;
    out.source = format!("{}+embedded", set.source);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_gaussian_dataset, GaussianSynthConfig};

    #[test]
    fn zero_variance_ci() {
        let (m, ci) = mean_and_ci95(&[0.8; 10]).unwrap();
        assert!((m - 0.8).abs() < 1e-15);
        assert!(ci.abs() < 1e-15);
    }

    #[test]
    fn ci_formula() {
        // values 0 and 1: s = sqrt(0.5), n = 2
        let (m, ci) = mean_and_ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((ci - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn scoring_by_hand() {
        assert_eq!(score_predictions(&[0, 1, 2], &[0, 1, 1]).unwrap(), 2.0 / 3.0);
        assert!(score_predictions(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn noise_free_data_scores_one() {
        let cfg = GaussianSynthConfig {
            classes: 8,
            per_class: 20,
            dim: 10,
            spread: 1.0,
            noise: 0.0,
            offset: 2.0,
            ..Default::default()
        };
        let set = synth_gaussian_dataset(RngStream::new(0), &cfg).unwrap();
        let spec = EpisodeSpec::new(5, 1, 5);
        let opts = EvalOptions { n_episodes: 20, ..Default::default() };
        for inference in [InferenceConfig::protonet(), InferenceConfig::semipn(5), InferenceConfig::default()] {
            let r = evaluate(&set, &spec, &CalibrationConfig::identity(), &inference, &opts).unwrap();
            assert_eq!(r.mean_accuracy, 1.0);
        }
    }

    #[test]
    fn failure_reports_episode_index() {
        let cfg = GaussianSynthConfig { classes: 6, per_class: 10, dim: 4, ..Default::default() };
        let set = synth_gaussian_dataset(RngStream::new(0), &cfg).unwrap();
        // Negative features are rejected by the power transform.
        let err = evaluate(
            &set,
            &EpisodeSpec::new(5, 1, 3),
            &CalibrationConfig::default(),
            &InferenceConfig::default(),
            &EvalOptions { n_episodes: 5, ..Default::default() },
        )
        .unwrap_err();
        assert!(matches!(err, Error::EpisodeFailed { index: 0, .. }));
    }

    #[test]
    fn warns_on_single_support() {
        let spec = EpisodeSpec::new(2, 1, 15);
        assert!(config_warnings(&spec, &CalibrationConfig::default()).is_empty());
        let spec = EpisodeSpec { imbalance: Some(vec![1, 0]), ..spec };
        assert_eq!(config_warnings(&spec, &CalibrationConfig::default()).len(), 1);
    }
}
