//! JSON run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationConfig;
use crate::episodes::{
    load_feature_set, synth_gaussian_dataset, synth_image_dataset, EpisodeSpec, FeatureSet, GaussianSynthConfig,
    ImageSynthConfig, SplitPart, SplitSpec,
};
use crate::error::{Error, Result};
use crate::harness::ablation::AblationGrid;
use crate::hct::{load_checkpoint, MlpModel, ModelShape, TrainConfig};
use crate::numerics::RngStream;
use crate::proto_inference::InferenceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// FSLE binary or `.csv` file.
    Path(PathBuf),
    SyntheticGaussian {
        #[serde(default)]
        seed: u64,
        #[serde(flatten)]
        config: GaussianSynthConfig,
    },
    SyntheticImage {
        #[serde(default)]
        seed: u64,
        #[serde(flatten)]
        config: ImageSynthConfig,
    },
}

impl DatasetSource {
    /// Relative paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<FeatureSet> {
        match self {
            DatasetSource::Path(p) => load_feature_set(base_dir.join(p)),
            DatasetSource::SyntheticGaussian { seed, config } => synth_gaussian_dataset(RngStream::new(*seed), config),
            DatasetSource::SyntheticImage { seed, config } => synth_image_dataset(RngStream::new(*seed), config),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Block widths; the last is the embedding size. Defaults to 128-128-128-64.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub rotation_head: bool,
    /// Checkpoint to load for `embed`, `eval` and `export-traj`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_episodes() -> usize {
    1000
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub episode: EpisodeSpec,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationGrid>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.calibration.validate()?;
        self.inference.validate()?;
        if let Some(s) = &self.split {
            s.validate(None)?;
        }
        if let Some(g) = &self.ablation {
            g.validate()?;
        }
        if self.episodes == 0 || self.workers == 0 {
            return Err(Error::InvalidConfig("episodes and workers must be positive".into()));
        }
        Ok(())
    }

    /// The requested part of the dataset, or all of it without a split.
    pub fn dataset_part(&self, set: &FeatureSet, part: SplitPart) -> Result<FeatureSet> {
        match &self.split {
            Some(s) => s.apply(set, part),
            None => Ok(set.clone()),
        }
    }

    pub fn model_shape(&self, input_dim: usize, num_classes: usize) -> ModelShape {
        let spec = self.model.clone().unwrap_or_default();
        let mut shape = ModelShape::default_for(input_dim, num_classes);
        if let Some(w) = spec.widths {
            shape.widths = w;
        }
        shape.rotation_head = spec.rotation_head;
        shape
    }

    pub fn load_model(&self, base_dir: &Path) -> Result<Option<MlpModel>> {
        match self.model.as_ref().and_then(|m| m.path.as_ref()) {
            Some(p) => Ok(Some(load_checkpoint(base_dir.join(p))?.0)),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults() {
        let cfg = RunConfig::from_json(r#"{"dataset": {"synthetic_gaussian": {"seed": 3, "classes": 10}}}"#).unwrap();
        assert_eq!(cfg.episodes, 1000);
        assert_eq!(cfg.episode, EpisodeSpec::new(5, 1, 15));
        assert_eq!(cfg.inference, InferenceConfig::default());
        let set = cfg.dataset.load(Path::new(".")).unwrap();
        assert_eq!(set.num_classes(), 10);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = r#"{"dataset": {"path": "x.fsle"}, "inference": {"tau": -1, "sigma": 0.2, "n_iter": 3}}"#;
        assert!(RunConfig::from_json(bad).unwrap_err().is_config_error());
        let unknown = r#"{"dataset": {"path": "x.fsle"}, "bogus": 1}"#;
        assert!(RunConfig::from_json(unknown).unwrap_err().is_config_error());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::from_json(
            r#"{"dataset": {"synthetic_image": {"classes": 4}}, "training": {"epochs": 2, "batch_size": 8}}"#,
        )
        .unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
