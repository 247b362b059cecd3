//! Label-preserving augmentations for vector and square single-channel image inputs.
//!
//! Strong image augmentation applies two ops drawn uniformly (with replacement)
//! from an 8-op suite, then zeroes one `cutout x cutout` square.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_normal, RngStream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Identity,
    WeakVector,
    StrongVector,
    WeakImage,
    StrongImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    /// Gaussian noise standard deviation (vector policies).
    #[serde(default)]
    pub noise: f64,
    /// Probability of zeroing each coordinate (strong vector).
    #[serde(default)]
    pub dropout: f64,
    /// Multiplicative jitter: a factor drawn from `[1 - scale, 1 + scale]`.
    #[serde(default)]
    pub scale: f64,
    /// Zero padding before the random crop (weak image), in pixels.
    #[serde(default)]
    pub crop_pad: usize,
    /// Ops drawn from the strong image suite.
    #[serde(default)]
    pub num_ops: usize,
    /// Side of the cutout square (strong image); 0 disables cutout.
    #[serde(default)]
    pub cutout: usize,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            kind: AugmentKind::Identity,
            noise: 0.0,
            dropout: 0.0,
            scale: 0.0,
            crop_pad: 0,
            num_ops: 0,
            cutout: 0,
        }
    }

    pub fn weak_vector() -> Self {
        Self {
            kind: AugmentKind::WeakVector,
            noise: 0.05,
            scale: 0.05,
            ..Self::identity()
        }
    }

    pub fn strong_vector() -> Self {
        Self {
            kind: AugmentKind::StrongVector,
            noise: 0.3,
            dropout: 0.2,
            scale: 0.3,
            ..Self::identity()
        }
    }

    /// Random crop (1 px padding) and horizontal flip at 50%.
    pub fn weak_image() -> Self {
        Self {
            kind: AugmentKind::WeakImage,
            crop_pad: 1,
            ..Self::identity()
        }
    }

    /// Two random ops then a 3x3 cutout.
    pub fn strong_image() -> Self {
        Self {
            kind: AugmentKind::StrongImage,
            num_ops: 2,
            cutout: 3,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("augment policy {:?}: {m}", self.kind)));
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0,1)");
        }
        if !(0.0..1.0).contains(&self.scale) {
            return bad("scale must be in [0,1)");
        }
        if self.num_ops > 8 {
            return bad("at most 8 ops");
        }
        Ok(())
    }
}

/// Side length of a square image with `len` pixels.
pub fn image_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len || side == 0 {
        return Err(Error::InvalidInput(format!(
            "input of length {len} is not a square single-channel image"
        )));
    }
    Ok(side)
}

pub fn flip_horizontal(x: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for y in 0..side {
        for c in 0..side {
            out[y * side + c] = x[y * side + side - 1 - c];
        }
    }
    out
}

/// Pad by `pad` zeros on every side, then crop `side x side` at `(top, left)`
/// of the padded image. `(pad, pad)` is the identity.
pub fn crop_with_offset(x: &[f64], side: usize, pad: usize, top: usize, left: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for y in 0..side {
        for c in 0..side {
            let sy = (y + top) as i64 - pad as i64;
            let sx = (c + left) as i64 - pad as i64;
            if (0..side as i64).contains(&sy) && (0..side as i64).contains(&sx) {
                out[y * side + c] = x[sy as usize * side + sx as usize];
            }
        }
    }
    out
}

/// Rotate a square image counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate90(x: &[f64], side: usize, quarter_turns: usize) -> Vec<f64> {
    let mut cur = x.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0.0; x.len()];
        for y in 0..side {
            for c in 0..side {
                // (y, c) receives the pixel from (c, side-1-y).
                next[y * side + c] = cur[c * side + (side - 1 - y)];
            }
        }
        cur = next;
    }
    cur
}

/// One op from the strong image suite with its drawn magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrongOp {
    Invert,
    Quantize { levels: u32 },
    Contrast { factor: f64 },
    Brightness { factor: f64 },
    Translate { dy: i64, dx: i64 },
    Rotate { radians: f64 },
    Shear { k: f64 },
    Noise { std: f64, stream: RngStream },
}

/// What a strong image augmentation drew.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongTrace {
    pub ops: Vec<StrongOp>,
    /// Top-left corner of the cutout square.
    pub cutout: Option<(usize, usize)>,
}

fn draw_op(rng: &mut StreamRng) -> StrongOp {
    match rng.random_range(0..8) {
        0 => StrongOp::Invert,
        1 => StrongOp::Quantize { levels: rng.random_range(2..=8) },
        2 => StrongOp::Contrast { factor: rng.random_range(0.3..1.7) },
        3 => StrongOp::Brightness { factor: rng.random_range(0.3..1.7) },
        4 => StrongOp::Translate {
            dy: rng.random_range(-2..=2),
            dx: rng.random_range(-2..=2),
        },
        5 => StrongOp::Rotate { radians: rng.random_range(-30.0f64..30.0).to_radians() },
        6 => StrongOp::Shear { k: rng.random_range(-0.4..0.4) },
        _ => StrongOp::Noise {
            std: rng.random_range(0.05..0.3),
            stream: RngStream { seed: rng.random(), stream_id: rng.random() },
        },
    }
}

/// Nearest-neighbour resampling: output `(y, x)` reads `src(y, x)`.
fn resample(x: &[f64], side: usize, src: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for y in 0..side {
        for c in 0..side {
            let (sy, sx) = src(y as f64, c as f64);
            let (sy, sx) = (sy.round() as i64, sx.round() as i64);
            if (0..side as i64).contains(&sy) && (0..side as i64).contains(&sx) {
                out[y * side + c] = x[sy as usize * side + sx as usize];
            }
        }
    }
    out
}

pub fn apply_strong_op(x: &[f64], side: usize, op: &StrongOp) -> Vec<f64> {
    let center = (side as f64 - 1.0) / 2.0;
    match *op {
        StrongOp::Invert => {
            let max = x.iter().copied().fold(0.0, f64::max);
            x.iter().map(|v| max - v).collect()
        }
        StrongOp::Quantize { levels } => {
            let max = x.iter().copied().fold(0.0, f64::max);
            if max <= 0.0 {
                return x.to_vec();
            }
            let l = f64::from(levels);
            x.iter().map(|v| (v / max * l).round() / l * max).collect()
        }
        StrongOp::Contrast { factor } => {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| mean + factor * (v - mean)).collect()
        }
        StrongOp::Brightness { factor } => x.iter().map(|v| v * factor).collect(),
        StrongOp::Translate { dy, dx } => {
            resample(x, side, |y, c| (y - dy as f64, c - dx as f64))
        }
        StrongOp::Rotate { radians } => {
            let (s, co) = radians.sin_cos();
            resample(x, side, |y, c| {
                let (ry, rx) = (y - center, c - center);
                (co * ry - s * rx + center, s * ry + co * rx + center)
            })
        }
        StrongOp::Shear { k } => resample(x, side, |y, c| (y, c + k * (y - center))),
        StrongOp::Noise { std, stream } => {
            let mut rng = stream.rng();
            x.iter().map(|v| v + std * sample_normal(&mut rng)).collect()
        }
    }
}

pub fn apply_cutout(x: &mut [f64], side: usize, size: usize, top: usize, left: usize) {
    for y in top..(top + size).min(side) {
        for c in left..(left + size).min(side) {
            x[y * side + c] = 0.0;
        }
    }
}

/// Strong image augmentation that also reports the ops and cutout it drew.
pub fn strong_image_traced(x: &[f64], rng: &mut StreamRng, policy: &AugmentPolicy) -> Result<(Vec<f64>, StrongTrace)> {
    let side = image_side(x.len())?;
    let ops: Vec<StrongOp> = (0..policy.num_ops).map(|_| draw_op(rng)).collect();
    let mut out = x.to_vec();
    for op in &ops {
        out = apply_strong_op(&out, side, op);
    }
    let cutout = if policy.cutout > 0 {
        let size = policy.cutout.min(side);
        let top = rng.random_range(0..=side - size);
        let left = rng.random_range(0..=side - size);
        apply_cutout(&mut out, side, size, top, left);
        Some((top, left))
    } else {
        None
    };
    Ok((out, StrongTrace { ops, cutout }))
}

fn vector_augment(x: &[f64], rng: &mut StreamRng, policy: &AugmentPolicy) -> Vec<f64> {
    let factor = if policy.scale > 0.0 {
        rng.random_range(1.0 - policy.scale..=1.0 + policy.scale)
    } else {
        1.0
    };
    x.iter()
        .map(|&v| {
            let noise = if policy.noise > 0.0 { policy.noise * sample_normal(rng) } else { 0.0 };
            let keep = policy.dropout == 0.0 || rng.random::<f64>() >= policy.dropout;
            if keep {
                factor * v + noise
            } else {
                0.0
            }
        })
        .collect()
}

/// Apply any policy.
pub fn augment(x: &[f64], rng: &mut StreamRng, policy: &AugmentPolicy) -> Result<Vec<f64>> {
    match policy.kind {
        AugmentKind::Identity => Ok(x.to_vec()),
        AugmentKind::WeakVector | AugmentKind::StrongVector => Ok(vector_augment(x, rng, policy)),
        AugmentKind::WeakImage => {
            let side = image_side(x.len())?;
            let pad = policy.crop_pad;
            let top = rng.random_range(0..=2 * pad);
            let left = rng.random_range(0..=2 * pad);
            let flip = rng.random::<bool>();
            let cropped = crop_with_offset(x, side, pad, top, left);
            Ok(if flip { flip_horizontal(&cropped, side) } else { cropped })
        }
        AugmentKind::StrongImage => strong_image_traced(x, rng, policy).map(|(v, _)| v),
    }
}

/// Small perturbation. Errors if `policy` is a strong kind.
pub fn weak_augment(x: &[f64], rng: &mut StreamRng, policy: &AugmentPolicy) -> Result<Vec<f64>> {
    match policy.kind {
        AugmentKind::Identity | AugmentKind::WeakVector | AugmentKind::WeakImage => augment(x, rng, policy),
        k => Err(Error::InvalidInput(format!("{k:?} is not a weak augmentation"))),
    }
}

/// Heavy distortion. Errors if `policy` is a weak kind.
pub fn strong_augment(x: &[f64], rng: &mut StreamRng, policy: &AugmentPolicy) -> Result<Vec<f64>> {
    match policy.kind {
        AugmentKind::Identity | AugmentKind::StrongVector | AugmentKind::StrongImage => augment(x, rng, policy),
        k => Err(Error::InvalidInput(format!("{k:?} is not a strong augmentation"))),
    }
}
