//! Per-episode feature calibration: power transform, set-wise centering and
//! l2 normalization, applied in that order with each step switchable.

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};

/// How the power transform treats negative entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Negative entries are an error.
    #[default]
    Reject,
    /// `sign(x) * |x|^beta`.
    SignedPower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub beta: f64,
    #[serde(rename = "power")]
    pub apply_power: bool,
    #[serde(rename = "center")]
    pub apply_center: bool,
    #[serde(rename = "l2")]
    pub apply_l2: bool,
    /// Center the query set by its own mean. Off in semi-supervised mode, where
    /// query statistics must not be used.
    #[serde(rename = "center_query")]
    pub center_query_set: bool,
    /// Center the auxiliary unlabeled set by its own mean.
    #[serde(rename = "center_unlabeled", default = "default_true")]
    pub center_unlabeled_set: bool,
    #[serde(default)]
    pub negative_policy: NegativePolicy,
}

fn default_true() -> bool {
    true
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            apply_power: true,
            apply_center: true,
            apply_l2: true,
            center_query_set: true,
            center_unlabeled_set: true,
            negative_policy: NegativePolicy::Reject,
        }
    }
}

impl CalibrationConfig {
    /// Every step disabled: calibration is the identity.
    pub fn identity() -> Self {
        Self {
            apply_power: false,
            apply_center: false,
            apply_l2: false,
            ..Self::default()
        }
    }

    /// Semi-supervised variant: no centering of the query set.
    pub fn semi_supervised() -> Self {
        Self {
            center_query_set: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.apply_power && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "power exponent beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !(self.apply_power || self.apply_center || self.apply_l2)
    }
}

/// Episode features after calibration. Query labels are deliberately absent.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedEpisode {
    pub n_way: usize,
    pub support_features: Matrix,
    pub support_labels: Vec<usize>,
    pub query_features: Matrix,
    pub unlabeled_features: Matrix,
    pub provenance: CalibrationConfig,
}

/// `x^beta / ||x^beta||`, elementwise power.
pub fn power_transform(x: &[f64], beta: f64, policy: NegativePolicy) -> Result<Vec<f64>> {
    let powered: Vec<f64> = match policy {
        NegativePolicy::Reject => {
            if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(Error::NegativeFeature { index, value });
            }
            x.iter().map(|v| v.powf(beta)).collect()
        }
        NegativePolicy::SignedPower => x
            .iter()
            .map(|v| v.signum() * v.abs().powf(beta))
            .map(|v| if v.is_nan() { 0.0 } else { v })
            .collect(),
    };
    l2_normalize(&powered)
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector(format!(
            "cannot l2-normalize a vector of norm {n}"
        )));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Subtract the set's own per-coordinate mean from every row.
pub fn center_set(rows: &Matrix) -> Result<Matrix> {
    let mean = rows.column_mean()?;
    let mut out = rows.clone();
    for i in 0..out.nrows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok(out)
}

/// Calibrate one set of rows. `center` says whether this particular set is centered.
pub fn calibrate_set(rows: &Matrix, config: &CalibrationConfig, center: bool) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(rows.clone());
    }
    let mut out = rows.clone();
    if config.apply_power {
        for i in 0..out.nrows() {
            let t = power_transform(out.row(i), config.beta, config.negative_policy)?;
            out.row_mut(i).copy_from_slice(&t);
        }
    }
    if config.apply_center && center {
        out = center_set(&out)?;
    }
    if config.apply_l2 {
        for i in 0..out.nrows() {
            let t = l2_normalize(out.row(i))?;
            out.row_mut(i).copy_from_slice(&t);
        }
    }
    Ok(out)
}

/// Apply the enabled steps (power, then center, then l2) to every set of the
/// episode. Support, query and unlabeled sets are each centered by their own mean.
pub fn calibrate_episode(episode: &Episode, config: &CalibrationConfig) -> Result<CalibratedEpisode> {
    config.validate()?;
    let d = episode.support.features.ncols();
    for (name, set) in [
        ("query", &episode.query.features),
        ("unlabeled", &episode.unlabeled.features),
    ] {
        if !set.is_empty() && set.ncols() != d {
            return Err(Error::ShapeError(format!(
                "{name} features have {} columns, support has {d}",
                set.ncols()
            )));
        }
    }
    Ok(CalibratedEpisode {
        n_way: episode.n_way,
        support_features: calibrate_set(&episode.support.features, config, true)?,
        support_labels: episode.support.labels.clone(),
        query_features: calibrate_set(&episode.query.features, config, config.center_query_set)?,
        unlabeled_features: calibrate_set(
            &episode.unlabeled.features,
            config,
            config.center_unlabeled_set,
        )?,
        provenance: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::LabeledSet;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn episode(support: Matrix, query: Matrix) -> Episode {
        let n = support.nrows();
        Episode {
            n_way: n,
            class_ids: (0..n).collect(),
            support: LabeledSet {
                features: support,
                labels: (0..n).collect(),
            },
            query: LabeledSet {
                labels: vec![0; query.nrows()],
                features: query,
            },
            unlabeled: LabeledSet::empty(2),
            indices: Default::default(),
        }
    }

    #[test]
    fn power_transform_examples() {
        let r = NegativePolicy::Reject;
        assert!(close(&power_transform(&[4.0, 0.0], 0.5, r).unwrap(), &[1.0, 0.0], 1e-15));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for beta in [0.1, 0.5, 1.0, 3.0] {
            assert!(close(&power_transform(&[1.0, 1.0], beta, r).unwrap(), &[s, s], 1e-15));
        }
        assert!(close(&power_transform(&[9.0, 16.0], 0.5, r).unwrap(), &[0.6, 0.8], 1e-15));
    }

    #[test]
    fn power_transform_errors() {
        assert!(matches!(
            power_transform(&[1.0, -2.0], 0.5, NegativePolicy::Reject),
            Err(Error::NegativeFeature { index: 1, .. })
        ));
        assert!(matches!(
            power_transform(&[0.0, 0.0], 0.5, NegativePolicy::Reject),
            Err(Error::DegenerateVector(_))
        ));
        let signed = power_transform(&[-4.0, 0.0], 0.5, NegativePolicy::SignedPower).unwrap();
        assert!(close(&signed, &[-1.0, 0.0], 1e-15));
    }

    #[test]
    fn center_set_examples() {
        let c = center_set(&m(&[&[1.0, 0.0], &[3.0, 2.0]])).unwrap();
        assert_eq!(c, m(&[&[-1.0, -1.0], &[1.0, 1.0]]));
        assert_eq!(center_set(&m(&[&[5.0, 5.0]])).unwrap(), m(&[&[0.0, 0.0]]));
        let again = center_set(&c).unwrap();
        assert!(close(again.as_slice(), c.as_slice(), 1e-12));
        assert!(matches!(center_set(&Matrix::empty(2)), Err(Error::EmptySet(_))));
    }

    #[test]
    fn l2_examples() {
        assert!(close(&l2_normalize(&[3.0, 4.0]).unwrap(), &[0.6, 0.8], 1e-15));
        assert!(close(&l2_normalize(&[0.6, 0.8]).unwrap(), &[0.6, 0.8], 1e-15));
        assert_eq!(l2_normalize(&[-2.0, 0.0]).unwrap(), vec![-1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn identity_config_is_bitwise_identity() {
        let ep = episode(m(&[&[1.5, -0.25], &[3.0, 2.0]]), m(&[&[0.1, 7.0]]));
        let cal = calibrate_episode(&ep, &CalibrationConfig::identity()).unwrap();
        assert_eq!(cal.support_features, ep.support.features);
        assert_eq!(cal.query_features, ep.query.features);
    }

    #[test]
    fn center_only_leaves_queries_when_disabled() {
        let cfg = CalibrationConfig {
            apply_center: true,
            center_query_set: false,
            ..CalibrationConfig::identity()
        };
        let ep = episode(m(&[&[1.0, 0.0], &[3.0, 2.0]]), m(&[&[4.0, 4.0], &[2.0, 0.0]]));
        let cal = calibrate_episode(&ep, &cfg).unwrap();
        assert_eq!(cal.support_features, m(&[&[-1.0, -1.0], &[1.0, 1.0]]));
        assert_eq!(cal.query_features, ep.query.features);
    }

    #[test]
    fn full_pipeline_hand_computed() {
        // power: [4,0]->[1,0], [0,4]->[0,1]; center: mean [.5,.5]; l2 of [.5,-.5].
        let ep = episode(m(&[&[4.0, 0.0], &[0.0, 4.0]]), Matrix::empty(2));
        let cal = calibrate_episode(&ep, &CalibrationConfig::default()).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(cal.support_features.row(0), &[s, -s], 1e-12));
        assert!(close(cal.support_features.row(1), &[-s, s], 1e-12));
    }

    #[test]
    fn single_element_set_with_centering_is_degenerate() {
        let ep = episode(m(&[&[4.0, 1.0]]), Matrix::empty(2));
        assert!(matches!(
            calibrate_episode(&ep, &CalibrationConfig::default()),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn rejects_non_positive_beta() {
        let cfg = CalibrationConfig {
            beta: 0.0,
            ..CalibrationConfig::default()
        };
        let ep = episode(m(&[&[1.0, 0.0], &[0.0, 1.0]]), Matrix::empty(2));
        assert!(matches!(calibrate_episode(&ep, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn json_field_names() {
        let v = serde_json::to_value(CalibrationConfig::default()).unwrap();
        for key in ["beta", "power", "center", "l2", "center_query", "negative_policy"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["negative_policy"], "reject");
    }

    fn nonneg_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6).prop_flat_map(|d| {
            prop::collection::vec(prop::collection::vec(0.01f64..10.0, d), 2..10)
        })
    }

    proptest! {
        #[test]
        fn pipeline_invariants(rows in nonneg_rows()) {
            let x = Matrix::from_rows(&rows).unwrap();
            let cfg = CalibrationConfig::default();
            // Intermediate after power + center has zero mean.
            let powered = calibrate_set(&x, &CalibrationConfig { apply_center: false, apply_l2: false, ..cfg.clone() }, true).unwrap();
            let centered = center_set(&powered).unwrap();
            for m in centered.column_mean().unwrap() {
                prop_assert!(m.abs() < 1e-9);
            }
            prop_assume!(centered.iter_rows().all(|r| norm(r) > 1e-9));
            let out = calibrate_set(&x, &cfg, true).unwrap();
            for r in out.iter_rows() {
                prop_assert!((norm(r) - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn centering_is_idempotent(rows in nonneg_rows()) {
            let x = Matrix::from_rows(&rows).unwrap();
            let once = center_set(&x).unwrap();
            let twice = center_set(&once).unwrap();
            prop_assert!(close(once.as_slice(), twice.as_slice(), 1e-12));
        }

        #[test]
        fn row_permutation_is_equivariant(rows in nonneg_rows(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let x = Matrix::from_rows(&rows).unwrap();
            let mut perm: Vec<usize> = (0..x.nrows()).collect();
            perm.shuffle(&mut crate::numerics::RngStream::new(seed).rng());
            let cfg = CalibrationConfig { apply_l2: false, ..CalibrationConfig::default() };
            let a = calibrate_set(&x, &cfg, true).unwrap();
            let b = calibrate_set(&x.select_rows(&perm), &cfg, true).unwrap();
            prop_assert!(close(a.select_rows(&perm).as_slice(), b.as_slice(), 1e-12));
        }

        #[test]
        fn signed_power_beta_one_is_normalization(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
            prop_assume!(norm(&v) > 1e-6);
            let a = power_transform(&v, 1.0, NegativePolicy::SignedPower).unwrap();
            let b = l2_normalize(&v).unwrap();
            prop_assert!(close(&a, &b, 1e-12));
        }
    }
}
