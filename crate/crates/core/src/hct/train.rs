use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::episodes::FeatureSet;
use crate::error::{Error, Result};
use crate::hct::augment::{augment, AugmentPolicy};
use crate::hct::loss::{ce_loss, hct_loss, make_pairs, rot_loss, Batch, HctConfig};
use crate::hct::model::{MlpModel, Params};
use crate::numerics::{argmax, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected Adam step on `params` given `grads`.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        let g = grads.to_flat();
        if g.len() != self.m.len() {
            return Err(Error::ShapeError("gradient size changed between steps".into()));
        }
        let c = &self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let mut p = params.to_flat();
        for i in 0..p.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        params.set_flat(&p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Consistency loss; `None` trains with cross entropy only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hct: Option<HctConfig>,
    /// Add the self-supervised rotation loss (image inputs only).
    #[serde(default)]
    pub rotation: bool,
    /// Augmentation applied to inputs of the cross-entropy term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            hct: None,
            rotation: false,
            ce_augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &MlpModel) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::InvalidConfig("optimizer needs lr > 0, eps > 0, betas in [0,1)".into()));
        }
        if let Some(h) = &self.hct {
            h.validate(model.depth())?;
        }
        if let Some(a) = &self.ce_augment {
            a.validate()?;
        }
        if self.rotation && model.params.rotation.is_none() {
            return Err(Error::MissingHead("rotation"));
        }
        Ok(())
    }

    /// First epoch index at which the consistency term is active.
    pub fn hct_start_epoch(&self) -> Option<usize> {
        self.hct
            .as_ref()
            .map(|h| (h.schedule_fraction * self.epochs as f64 - 1e-9).ceil().max(0.0) as usize)
    }
}

/// Mean per-batch losses of one epoch. Inactive terms are recorded as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_hct: f64,
    pub loss_rot: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub curve: Vec<EpochLosses>,
}

/// Minibatch training with Adam. Cross entropy (plus rotation, if enabled) for
/// the first `ceil(schedule_fraction * epochs)` epochs, then `eta * L_hct` is
/// added. Every random choice comes from a stream derived from `stream`, the
/// epoch and the batch index.
pub fn train(mut model: MlpModel, data: &FeatureSet, config: &TrainConfig, stream: RngStream) -> Result<TrainOutcome> {
    config.validate(&model)?;
    if data.dim() != model.input_dim() {
        return Err(Error::ShapeError(format!(
            "dataset dim {} for model input {}",
            data.dim(),
            model.input_dim()
        )));
    }
    if data.num_classes() > model.num_classes() {
        return Err(Error::InvalidLabel(format!(
            "dataset has {} classes, classifier only {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    let mut adam = Adam::new(config.optimizer.clone(), model.params.len());
    let hct_start = config.hct_start_epoch();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        let es = stream.derive(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut es.derive(0).rng());
        let hct_on = hct_start.is_some_and(|s| epoch >= s);
        let (mut sum_ce, mut sum_hct, mut sum_rot, mut batches) = (0.0, 0.0, 0.0, 0usize);

        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let bs = es.derive(b as u64 + 1);
            let mut x = data.features.select_rows(idx);
            if let Some(policy) = &config.ce_augment {
                x = augment_rows(&x, policy, bs.derive(0))?;
            }
            let batch = Batch::new(x, idx.iter().map(|&i| data.labels[i]).collect())?;
            let (l_ce, mut grads) = ce_loss(&model, &batch)?;
            sum_ce += l_ce;
            if config.rotation {
                let raw = data.features.select_rows(idx);
                let (l_rot, g) = rot_loss(&model, &raw, bs.derive(3))?;
                sum_rot += l_rot;
                grads.add_scaled(&g, 1.0);
            }
            if hct_on {
                let h = config.hct.as_ref().expect("hct_start implies hct config");
                let raw = Batch::new(data.features.select_rows(idx), batch.y.clone())?;
                let pairs = make_pairs(&raw, bs.derive(1))?;
                let (l_hct, g) = hct_loss(&model, &pairs, bs.derive(2), h)?;
                sum_hct += l_hct;
                if h.eta > 0.0 {
                    grads.add_scaled(&g, h.eta);
                }
            }
            if !(sum_ce + sum_hct + sum_rot).is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(&mut model.params, &grads)?;
            if !model.params.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            batches += 1;
        }
        let n = batches as f64;
        curve.push(EpochLosses {
            epoch,
            loss_ce: sum_ce / n,
            loss_hct: sum_hct / n,
            loss_rot: sum_rot / n,
        });
    }
    Ok(TrainOutcome { model, curve })
}

fn augment_rows(x: &Matrix, policy: &AugmentPolicy, stream: RngStream) -> Result<Matrix> {
    let mut out = Matrix::empty(x.ncols());
    for (i, row) in x.iter_rows().enumerate() {
        let mut rng = stream.derive(i as u64).rng();
        out.push_row(&augment(row, &mut rng, policy)?)?;
    }
    Ok(out)
}

/// Fraction of rows whose classifier argmax matches the label.
pub fn classification_accuracy(model: &MlpModel, data: &FeatureSet) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in data.features.iter_rows().zip(&data.labels) {
        correct += usize::from(argmax(&model.logits(x)?) == y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// CSV with header `epoch,loss_ce,loss_hct,loss_rot`.
pub fn write_loss_curve<W: Write>(curve: &[EpochLosses], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_gaussian_dataset, GaussianSynthConfig};
    use crate::hct::model::ModelShape;

    fn toy() -> FeatureSet {
        let cfg = GaussianSynthConfig {
            classes: 4,
            per_class: 20,
            dim: 6,
            spread: 3.0,
            noise: 0.3,
            ..Default::default()
        };
        synth_gaussian_dataset(RngStream::new(11), &cfg).unwrap()
    }

    fn small_model(seed: u64) -> MlpModel {
        let shape = ModelShape {
            input_dim: 6,
            widths: vec![16, 8],
            num_classes: 4,
            rotation_head: false,
        };
        MlpModel::new(&shape, RngStream::new(seed)).unwrap()
    }

    #[test]
    fn schedule_start() {
        let cfg = TrainConfig {
            epochs: 30,
            hct: Some(HctConfig::default()),
            ..Default::default()
        };
        assert_eq!(cfg.hct_start_epoch(), Some(10));
        let cfg = TrainConfig { epochs: 10, ..cfg };
        assert_eq!(cfg.hct_start_epoch(), Some(4));
        assert_eq!(TrainConfig::default().hct_start_epoch(), None);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            hct: Some(HctConfig::default()),
            ..Default::default()
        };
        let a = train(small_model(1), &toy(), &cfg, RngStream::new(5)).unwrap();
        let b = train(small_model(1), &toy(), &cfg, RngStream::new(5)).unwrap();
        let bits = |m: &MlpModel| m.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve[0].loss_hct, 0.0);
        assert!(a.curve[3].loss_hct > 0.0);
    }

    #[test]
    fn rotation_requires_head() {
        let cfg = TrainConfig {
            rotation: true,
            ..Default::default()
        };
        assert!(matches!(
            train(small_model(0), &toy(), &cfg, RngStream::new(0)),
            Err(Error::MissingHead(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges_or_survives_finitely() {
        let cfg = TrainConfig {
            epochs: 3,
            optimizer: AdamConfig {
                lr: f64::MAX,
                ..Default::default()
            },
            ..Default::default()
        };
        match train(small_model(0), &toy(), &cfg, RngStream::new(0)) {
            Err(Error::TrainingDiverged { .. }) => {}
            Ok(out) => assert!(out.model.params.is_finite()),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn curve_csv_header() {
        let curve = [EpochLosses { epoch: 0, loss_ce: 1.5, loss_hct: 0.0, loss_rot: 0.25 }];
        let mut buf = Vec::new();
        write_loss_curve(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,loss_ce,loss_hct,loss_rot\n0,1.5,0.0,0.25\n");
    }
}
