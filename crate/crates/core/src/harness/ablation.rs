use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationConfig;
use crate::episodes::{EpisodeSpec, FeatureSet};
use crate::error::{Error, Result};
use crate::harness::eval::{embed_feature_set, evaluate, EvalOptions, EvalReport};
use crate::hct::{train, HctConfig, MlpModel, ModelShape, TrainConfig};
use crate::numerics::RngStream;
use crate::proto_inference::{InferenceConfig, InferenceMode};

/// One inference column: a calibration setting plus an inference setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub calibration: CalibrationConfig,
    pub inference: InferenceConfig,
}

impl MethodSpec {
    pub fn new(label: impl Into<String>, calibration: CalibrationConfig, inference: InferenceConfig) -> Self {
        Self {
            label: label.into(),
            calibration,
            inference,
        }
    }

    /// Support centroids on raw features.
    pub fn protonet() -> Self {
        Self::new("PN", CalibrationConfig::identity(), InferenceConfig::protonet())
    }

    /// Soft k-means refinement on raw features.
    pub fn semipn(steps: usize) -> Self {
        Self::new("SemiPN", CalibrationConfig::identity(), InferenceConfig::semipn(steps))
    }

    /// Full calibration and momentum adaptation with default settings.
    pub fn cipa() -> Self {
        Self::new("CIPA", CalibrationConfig::default(), InferenceConfig::default())
    }

    /// Calibration and adaptation rows: (a) nothing, (b) centering, (c) + l2,
    /// (d) + power, all without adaptation; then full calibration with
    /// (e) sigma 1 for one step, (f) sigma 1 for 20 steps, (g) sigma 0.2 for 20 steps.
    pub fn calibration_rows() -> Vec<Self> {
        let cal = |power, center, l2| CalibrationConfig {
            apply_power: power,
            apply_center: center,
            apply_l2: l2,
            ..CalibrationConfig::default()
        };
        let inf = |sigma, n_iter| InferenceConfig {
            sigma,
            n_iter,
            ..InferenceConfig::default()
        };
        vec![
            Self::new("a", cal(false, false, false), inf(0.2, 0)),
            Self::new("b", cal(false, true, false), inf(0.2, 0)),
            Self::new("c", cal(false, true, true), inf(0.2, 0)),
            Self::new("d", cal(true, true, true), inf(0.2, 0)),
            Self::new("e", cal(true, true, true), inf(1.0, 1)),
            Self::new("f", cal(true, true, true), inf(1.0, 20)),
            Self::new("g", cal(true, true, true), inf(0.2, 20)),
        ]
    }

    /// The method as used with `m` auxiliary examples per class: `m > 0`
    /// switches to semi-supervised adaptation and stops centering the queries.
    fn for_unlabeled(&self, m: usize) -> Self {
        let mut out = self.clone();
        if m > 0 {
            out.inference.mode = InferenceMode::SemiSupervised;
            out.calibration.center_query_set = false;
        }
        out
    }
}

/// One training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainVariant {
    pub label: String,
    pub config: TrainConfig,
}

impl TrainVariant {
    /// Cross entropy, Manifold Mixup, consistency loss, and both with rotation.
    pub fn standard_rows(base: &TrainConfig, images: bool) -> Vec<Self> {
        let hct = if images { HctConfig::for_images() } else { HctConfig::default() };
        let plain = TrainConfig {
            hct: None,
            rotation: false,
            ..base.clone()
        };
        let with = |hct: Option<HctConfig>, rotation| TrainConfig {
            hct,
            rotation,
            ..plain.clone()
        };
        let mut rows = vec![
            Self { label: "ce".into(), config: plain.clone() },
            Self { label: "mm".into(), config: with(Some(hct.clone().manifold_mixup()), false) },
            Self { label: "hct".into(), config: with(Some(hct.clone()), false) },
        ];
        if images {
            rows.push(Self { label: "mm_rot".into(), config: with(Some(hct.clone().manifold_mixup()), true) });
            rows.push(Self { label: "hct_rot".into(), config: with(Some(hct), true) });
        }
        rows
    }
}

fn default_alphas() -> Vec<f64> {
    vec![2.0]
}

fn default_m() -> Vec<usize> {
    vec![0]
}

fn default_shots() -> Vec<usize> {
    vec![1]
}

/// Cartesian grid of training rows, alpha values, inference columns, shots and
/// auxiliary-set sizes. Alpha only varies rows that use the consistency loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub train_variants: Vec<TrainVariant>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_m")]
    pub m_values: Vec<usize>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    /// Template; `k_shot` and `m_unlabeled` are overridden per cell.
    #[serde(default)]
    pub episode: EpisodeSpec,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.m_values.is_empty() || self.shots.is_empty() || self.alphas.is_empty() {
            return Err(Error::InvalidConfig("ablation axes must be non-empty".into()));
        }
        Ok(())
    }
}

/// Where grid features come from.
pub enum AblationInput<'a> {
    /// Evaluate directly on fixed features; training rows are ignored.
    Features(&'a FeatureSet),
    /// Train one model per training row on `base` and evaluate on the
    /// embedded `novel` classes.
    Train {
        base: &'a FeatureSet,
        novel: &'a FeatureSet,
        shape: &'a ModelShape,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub train: String,
    pub alpha: Option<f64>,
    pub method: String,
    pub k_shot: usize,
    pub m_unlabeled: usize,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Stream tag for model initialization in ablations.
const INIT_TAG: u64 = 0x1417;
/// Stream tag for training in ablations.
const TRAIN_TAG: u64 = 0x7121;

/// Run every cell. All training rows share the same initialization and
/// training streams and all cells with the same episode shape share episodes,
/// so differences between cells come from the configuration alone. A failing
/// cell records its error and the grid continues.
pub fn run_ablation(grid: &AblationGrid, input: &AblationInput<'_>, options: &EvalOptions) -> Result<Vec<AblationCell>> {
    grid.validate()?;
    let mut cells = Vec::new();
    match input {
        AblationInput::Features(set) => {
            eval_cells(grid, Ok(set), "none", None, options, &mut cells);
        }
        AblationInput::Train { base, novel, shape } => {
            if grid.train_variants.is_empty() {
                return Err(Error::InvalidConfig("training ablation needs train_variants".into()));
            }
            let root = RngStream::new(options.seed);
            for variant in &grid.train_variants {
                let alphas: Vec<Option<f64>> = match &variant.config.hct {
                    Some(_) => grid.alphas.iter().map(|&a| Some(a)).collect(),
                    None => vec![None],
                };
                for alpha in alphas {
                    let mut cfg = variant.config.clone();
                    if let (Some(h), Some(a)) = (cfg.hct.as_mut(), alpha) {
                        h.alpha = a;
                    }
                    let embedded = MlpModel::new(shape, root.derive(INIT_TAG))
                        .and_then(|m| train(m, base, &cfg, root.derive(TRAIN_TAG)))
                        .and_then(|out| embed_feature_set(&out.model, novel));
                    eval_cells(grid, embedded.as_ref(), &variant.label, alpha, options, &mut cells);
                }
            }
        }
    }
    Ok(cells)
}

fn eval_cells(
    grid: &AblationGrid,
    set: std::result::Result<&FeatureSet, &Error>,
    train: &str,
    alpha: Option<f64>,
    options: &EvalOptions,
    cells: &mut Vec<AblationCell>,
) {
    for &k in &grid.shots {
        for &m in &grid.m_values {
            let spec = EpisodeSpec {
                k_shot: k,
                m_unlabeled: m,
                ..grid.episode.clone()
            };
            for method in &grid.methods {
                let method = method.for_unlabeled(m);
                let result = match set {
                    Ok(set) => evaluate(set, &spec, &method.calibration, &method.inference, options),
                    Err(e) => Err(Error::InvalidInput(format!("training failed: {e}"))),
                };
                let (report, error) = match result {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                cells.push(AblationCell {
                    train: train.to_string(),
                    alpha,
                    method: method.label.clone(),
                    k_shot: k,
                    m_unlabeled: m,
                    report,
                    error,
                });
            }
        }
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    train: &'a str,
    alpha: Option<f64>,
    method: &'a str,
    k_shot: usize,
    m_unlabeled: usize,
    n_episodes: Option<usize>,
    mean_accuracy: Option<f64>,
    ci95_halfwidth: Option<f64>,
    error: Option<&'a str>,
}

/// One row per cell: `train,alpha,method,k_shot,m_unlabeled,n_episodes,mean_accuracy,ci95_halfwidth,error`.
pub fn write_ablation_csv<W: Write>(cells: &[AblationCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(CsvRow {
            train: &c.train,
            alpha: c.alpha,
            method: &c.method,
            k_shot: c.k_shot,
            m_unlabeled: c.m_unlabeled,
            n_episodes: c.report.as_ref().map(|r| r.n_episodes),
            mean_accuracy: c.report.as_ref().map(|r| r.mean_accuracy),
            ci95_halfwidth: c.report.as_ref().map(|r| r.ci95_halfwidth),
            error: c.error.as_deref(),
        })?;
    }
    w.flush()?;
    Ok(())
}
