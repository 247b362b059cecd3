//! Shared helpers for integration tests: a loop-based reference of the
//! calibrate-then-adapt inference, finite-difference gradients, and the
//! synthetic benchmark datasets.
#![allow(dead_code)]

use fewshot_core::episodes::{synth_gaussian_dataset, FeatureSet, GaussianSynthConfig};
use fewshot_core::hct::{MlpModel, Params};
use fewshot_core::numerics::RngStream;
use fewshot_core::Result;

type Rows = Vec<Vec<f64>>;

fn unit(v: &[f64]) -> Vec<f64> {
    let mut n = 0.0;
    for x in v {
        n += x * x;
    }
    let n = n.sqrt();
    v.iter().map(|x| x / n).collect()
}

fn center(rows: &Rows) -> Rows {
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    rows.iter().map(|r| (0..d).map(|j| r[j] - mean[j]).collect()).collect()
}

/// Power, centering (per set) and l2, written out step by step.
pub fn naive_calibrate(rows: &Rows, beta: f64, center_set: bool) -> Rows {
    let powered: Rows = rows
        .iter()
        .map(|r| unit(&r.iter().map(|x| x.powf(beta)).collect::<Vec<_>>()))
        .collect();
    let centered = if center_set { center(&powered) } else { powered };
    centered.iter().map(|r| unit(r)).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn probs(x: &[f64], protos: &Rows, tau: f64) -> Vec<f64> {
    let s: Vec<f64> = protos.iter().map(|p| tau * cos(x, p)).collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Reference transductive inference on raw (uncalibrated) episode features.
/// Returns query class probabilities.
pub fn naive_cipa(
    support: &Rows,
    labels: &[usize],
    query: &Rows,
    n_way: usize,
    beta: f64,
    tau: f64,
    sigma: f64,
    n_iter: usize,
) -> Rows {
    let s = naive_calibrate(support, beta, true);
    let q = naive_calibrate(query, beta, true);
    let d = s[0].len();
    let mut protos = vec![vec![0.0; d]; n_way];
    let mut counts = vec![0.0; n_way];
    for (x, &y) in s.iter().zip(labels) {
        for j in 0..d {
            protos[y][j] += x[j];
        }
        counts[y] += 1.0;
    }
    for c in 0..n_way {
        for j in 0..d {
            protos[c][j] /= counts[c];
        }
    }
    for _ in 0..n_iter {
        let p: Rows = q.iter().map(|x| probs(x, &protos, tau)).collect();
        let mut next = vec![vec![0.0; d]; n_way];
        for c in 0..n_way {
            let mut num = vec![0.0; d];
            let mut den = 0.0;
            for (x, &y) in s.iter().zip(labels) {
                if y == c {
                    for j in 0..d {
                        num[j] += x[j];
                    }
                    den += 1.0;
                }
            }
            for (x, pq) in q.iter().zip(&p) {
                for j in 0..d {
                    num[j] += pq[c] * x[j];
                }
                den += pq[c];
            }
            for j in 0..d {
                next[c][j] = sigma * num[j] / den + (1.0 - sigma) * protos[c][j];
            }
        }
        protos = next;
    }
    q.iter().map(|x| probs(x, &protos, tau)).collect()
}

pub fn rows(m: &fewshot_core::numerics::Matrix) -> Rows {
    m.iter_rows().map(|r| r.to_vec()).collect()
}

/// Max over coordinates of `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `loss` with respect to every parameter of `model`.
pub fn numeric_gradient(model: &MlpModel, step: f64, loss: impl Fn(&MlpModel) -> Result<f64>) -> Vec<f64> {
    let base = model.params.to_flat();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + step;
        probe.params.set_flat(&p).unwrap();
        let up = loss(&probe).unwrap();
        p[i] = base[i] - step;
        probe.params.set_flat(&p).unwrap();
        let down = loss(&probe).unwrap();
        out.push((up - down) / (2.0 * step));
    }
    out
}

pub fn flat(p: &Params) -> Vec<f64> {
    p.to_flat()
}

/// Non-negative Gaussian benchmark used by the inference trend checks:
/// 20 classes in 32 dimensions, class means on a unit sphere shifted by 1.
pub fn gaussian_benchmark(noise: f64, per_class: usize) -> FeatureSet {
    let cfg = GaussianSynthConfig {
        classes: 20,
        per_class,
        dim: 32,
        spread: 1.0,
        noise,
        offset: 1.0,
        nonnegative: true,
    };
    synth_gaussian_dataset(RngStream::new(7), &cfg).unwrap()
}

/// Noise level at which support-centroid classification of raw benchmark
/// features scores about 0.70 (5-way 1-shot).
pub const BENCHMARK_NOISE: f64 = 0.26;
