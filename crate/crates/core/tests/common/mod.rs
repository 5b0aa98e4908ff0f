//! Independent reference computations shared by the integration tests.
//! Nothing here calls the library's solvers or head code.

#![allow(dead_code)]

use fedcgs::personalize::{objective, MlpModel};
use fedcgs::LabeledFeatureSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gauss-Jordan inverse with partial pivoting; also returns `ln |det|`.
pub fn invert(m: &[f64], d: usize) -> (Vec<f64>, f64) {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        inv[i * d + i] = 1.0;
    }
    let mut log_det = 0.0;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&x, &y| a[x * d + col].abs().total_cmp(&a[y * d + col].abs()))
            .unwrap();
        if pivot != col {
            for k in 0..d {
                a.swap(pivot * d + k, col * d + k);
                inv.swap(pivot * d + k, col * d + k);
            }
        }
        let p = a[col * d + col];
        log_det += p.abs().ln();
        for k in 0..d {
            a[col * d + k] /= p;
            inv[col * d + k] /= p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let factor = a[r * d + col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..d {
                a[r * d + k] -= factor * a[col * d + k];
                inv[r * d + k] -= factor * inv[col * d + k];
            }
        }
    }
    (inv, log_det)
}

/// `ln N(f | mu, Sigma)` given `Sigma⁻¹` and `ln det Sigma`.
pub fn gaussian_log_density(f: &[f64], mu: &[f64], inv: &[f64], log_det: f64) -> f64 {
    let d = f.len();
    let diff: Vec<f64> = f.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for r in 0..d {
        for c in 0..d {
            quad += diff[r] * inv[r * d + c] * diff[c];
        }
    }
    -0.5 * quad - 0.5 * log_det - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Posterior `pi_j N(f|mu_j,Sigma) / sum_k pi_k N(f|mu_k,Sigma)` by direct
/// density evaluation, normalized with log-sum-exp.
pub fn density_ratio_posterior(
    f: &[f64],
    priors: &[f64],
    means: &[Vec<f64>],
    sigma: &[f64],
) -> Vec<f64> {
    let d = f.len();
    let (inv, log_det) = invert(sigma, d);
    let logs: Vec<f64> = priors
        .iter()
        .zip(means)
        .map(|(p, m)| p.ln() + gaussian_log_density(f, m, &inv, log_det))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    logs.iter().map(|l| (l - max).exp() / total).collect()
}

/// Bayes rule for equal-prior isotropic Gaussians `N(m_j, s I)`.
pub fn isotropic_bayes_accuracy(data: &LabeledFeatureSet, means: &[f64]) -> f64 {
    let d = data.dim();
    let correct = data
        .samples()
        .filter(|(x, y)| {
            let dist = |j: usize| -> f64 {
                x.iter()
                    .zip(&means[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            let best = (0..data.num_classes())
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                .unwrap();
            best == *y as usize
        })
        .count();
    correct as f64 / data.len() as f64
}

/// Central-difference gradient of the full training objective, laid out
/// like `MlpModel::tensors`.
pub fn finite_difference_gradient(
    model: &MlpModel,
    data: &LabeledFeatureSet,
    prototypes: &[Option<Vec<f64>>],
    lambda: f64,
    step: f64,
) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (t, &len) in shapes.iter().enumerate() {
        let mut grads = Vec::with_capacity(len);
        for i in 0..len {
            let mut plus = model.clone();
            plus.tensors_mut()[t][i] += step;
            let mut minus = model.clone();
            minus.tensors_mut()[t][i] -= step;
            let lp = objective(&plus, data, prototypes, lambda).unwrap().total;
            let lm = objective(&minus, data, prototypes, lambda).unwrap().total;
            grads.push((lp - lm) / (2.0 * step));
        }
        out.push(grads);
    }
    out
}

/// Splits rows alternately into two halves (rows are class-interleaved by
/// the synthetic generator, so both halves stay balanced).
pub fn split_alternating(
    data: &LabeledFeatureSet,
    period: usize,
) -> (LabeledFeatureSet, LabeledFeatureSet) {
    let (a, b): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|i| (i / period).is_multiple_of(2));
    (data.subset(&a), data.subset(&b))
}

pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// A random small model (`d_in <= 8, h <= 16, d_f <= 8, C <= 4`), 50 random
/// labelled rows and random prototypes.
pub fn gradient_case(seed: u64) -> (MlpModel, LabeledFeatureSet, Vec<Option<Vec<f64>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(1..=8);
    let h = rng.random_range(1..=16);
    let d_f = rng.random_range(1..=8);
    let c = rng.random_range(1..=4);
    let model = MlpModel::new(d_in, h, d_f, c, seed);
    let n = 50;
    let features = (0..n * d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
    let data = LabeledFeatureSet::new(features, labels, c, d_in).unwrap();
    let prototypes = (0..c)
        .map(|_| Some((0..d_f).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    (model, data, prototypes)
}

/// Worst per-tensor `||a - n|| / max(||a||, ||n||)`. Per-entry ratios are
/// dominated by finite-difference round-off (~1e-11 absolute at step 1e-5)
/// on entries whose true gradient is ~1e-7.
pub fn max_relative_error(analytic: &[&[f64]; 6], numeric: &[Vec<f64>]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(n));
        if scale > 0.0 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

/// Pooled mean, class means (`None` when empty) and the `N - 1` sample
/// covariance, by the textbook two-pass method over raw rows.
pub fn two_pass_moments(data: &LabeledFeatureSet) -> (Vec<f64>, Vec<Option<Vec<f64>>>, Vec<f64>) {
    let d = data.dim();
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    let mut class_sum = vec![vec![0.0; d]; data.num_classes()];
    let mut class_n = vec![0usize; data.num_classes()];
    for (x, y) in data.samples() {
        class_n[y as usize] += 1;
        for k in 0..d {
            mean[k] += x[k];
            class_sum[y as usize][k] += x[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let class_means = class_sum
        .into_iter()
        .zip(&class_n)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let mut cov = vec![0.0; d * d];
    for (x, _) in data.samples() {
        for r in 0..d {
            let dr = x[r] - mean[r];
            for c in 0..d {
                cov[r * d + c] += dr * (x[c] - mean[c]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n - 1.0);
    (mean, class_means, cov)
}
