//! Synthetic datasets standing in for extracted embeddings and for small images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::{norm, sample_normal, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianSynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub spread: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise: f64,
    /// Constant added to every coordinate of every class mean.
    pub offset: f64,
    /// Clamp features at zero, like post-ReLU embeddings.
    pub nonnegative: bool,
}

impl Default for GaussianSynthConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            per_class: 100,
            dim: 32,
            spread: 1.0,
            noise: 1.0,
            offset: 0.0,
            nonnegative: false,
        }
    }
}

/// Isotropic Gaussian classes. Rows are grouped by class, `per_class` each.
pub fn synth_gaussian_dataset(stream: RngStream, cfg: &GaussianSynthConfig) -> Result<FeatureSet> {
    if cfg.classes < 2 || cfg.per_class < 1 || cfg.dim < 1 {
        return Err(Error::InvalidConfig(format!(
            "synthetic dataset needs >= 2 classes, >= 1 example per class and dim >= 1, got {}/{}/{}",
            cfg.classes, cfg.per_class, cfg.dim
        )));
    }
    if !(cfg.spread >= 0.0 && cfg.noise >= 0.0 && cfg.offset.is_finite() && cfg.spread.is_finite() && cfg.noise.is_finite()) {
        return Err(Error::InvalidConfig("spread and noise must be finite and >= 0".into()));
    }
    let mut rng = stream.rng();
    let mut means = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        let mut dir: Vec<f64> = (0..cfg.dim).map(|_| sample_normal(&mut rng)).collect();
        let n = norm(&dir);
        for v in &mut dir {
            *v = *v / n * cfg.spread + cfg.offset;
        }
        means.push(dir);
    }
    let mut data = Vec::with_capacity(cfg.classes * cfg.per_class * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            for &m in mean {
                let mut v = m + cfg.noise * sample_normal(&mut rng);
                if cfg.nonnegative {
                    v = v.max(0.0);
                }
                data.push(v);
            }
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(labels.len(), cfg.dim, data)?;
    FeatureSet::new(features, labels, "synthetic-gaussian")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageSynthConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Images are `side x side`, single channel, flattened row-major.
    pub side: usize,
    /// Gaussian bumps per class template.
    pub blobs: usize,
    pub noise: f64,
    /// Maximum translation in pixels applied per example.
    pub max_shift: usize,
    /// Randomly mirror half the examples so horizontal flips preserve the label.
    pub random_flip: bool,
}

impl Default for ImageSynthConfig {
    fn default() -> Self {
        Self {
            classes: 30,
            per_class: 60,
            side: 8,
            blobs: 3,
            noise: 0.15,
            max_shift: 1,
            random_flip: true,
        }
    }
}

/// Toy single-channel images: each class is a template of Gaussian bumps; each
/// example is a shifted, possibly mirrored, contrast-jittered and noisy copy,
/// clamped to be non-negative.
pub fn synth_image_dataset(stream: RngStream, cfg: &ImageSynthConfig) -> Result<FeatureSet> {
    if cfg.classes < 2 || cfg.per_class < 1 || cfg.side < 2 || cfg.blobs < 1 {
        return Err(Error::InvalidConfig("image dataset needs >= 2 classes, side >= 2, >= 1 blob".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidConfig("noise must be finite and >= 0".into()));
    }
    let s = cfg.side;
    let mut rng = stream.rng();
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let mut img = vec![0.0; s * s];
            for _ in 0..cfg.blobs {
                let cy = rng.random::<f64>() * (s - 1) as f64;
                let cx = rng.random::<f64>() * (s - 1) as f64;
                let width = 0.6 + rng.random::<f64>() * (s as f64 / 4.0);
                let amp = 0.5 + rng.random::<f64>();
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[y * s + x] += amp * (-d2 / (2.0 * width * width)).exp();
                    }
                }
            }
            img
        })
        .collect();

    let shift = cfg.max_shift as i64;
    let mut data = Vec::with_capacity(cfg.classes * cfg.per_class * s * s);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (c, t) in templates.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let dy = rng.random_range(-shift..=shift);
            let dx = rng.random_range(-shift..=shift);
            let flip = cfg.random_flip && rng.random::<bool>();
            let contrast = 0.8 + 0.4 * rng.random::<f64>();
            for y in 0..s as i64 {
                for x in 0..s as i64 {
                    let (sy, mut sx) = (y - dy, x - dx);
                    if flip {
                        sx = s as i64 - 1 - sx;
                    }
                    let base = if (0..s as i64).contains(&sy) && (0..s as i64).contains(&sx) {
                        t[(sy as usize) * s + sx as usize]
                    } else {
                        0.0
                    };
                    let v = contrast * base + cfg.noise * sample_normal(&mut rng);
                    data.push(v.max(0.0));
                }
            }
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(labels.len(), s * s, data)?;
    FeatureSet::new(features, labels, "synthetic-image")
}
