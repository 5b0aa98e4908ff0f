//! Server-side reconstruction of global feature statistics.
//!
//! From the summed uploads (class sums `A^j`, second moment `B`, counts
//! `N^j`) the server forms
//!
//! ```text
//! mu_j  = A^j / N^j
//! mu    = A / N,            A = sum_j A^j
//! Sigma = (B - muᵀA - Aᵀmu + N muᵀmu) / (N - 1)
//! ```
//!
//! which equals the pooled sample covariance without any raw features
//! leaving the clients.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client_stats::ClientStatistics;
use crate::dataio::{DataError, LabeledFeatureSet};
use crate::numcore::{NumError, SymmetricMatrix};
use crate::sidecar;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("need at least two samples for a covariance, got {0}")]
    DegenerateCovariance(u64),

    #[error("invalid global statistics: {0}")]
    Invalid(String),

    #[error(transparent)]
    Num(#[from] NumError),

    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalStatistics {
    dim: usize,
    num_classes: usize,
    class_sums: Vec<f64>,
    class_counts: Vec<u64>,
    total_count: u64,
    /// `None` for classes no client holds.
    prototypes: Vec<Option<Vec<f64>>>,
    global_mean: Vec<f64>,
    covariance: SymmetricMatrix,
    priors: Vec<f64>,
}

impl GlobalStatistics {
    /// Assembles statistics from prototypes, counts and a covariance, e.g.
    /// for a model specified directly rather than aggregated.
    pub fn from_moments(
        class_counts: Vec<u64>,
        prototypes: Vec<Option<Vec<f64>>>,
        covariance: SymmetricMatrix,
    ) -> Result<Self, AggregateError> {
        let dim = covariance.dim();
        let num_classes = class_counts.len();
        if prototypes.len() != num_classes {
            return Err(AggregateError::Invalid(
                "one prototype slot per class".into(),
            ));
        }
        let total_count: u64 = class_counts.iter().sum();
        if total_count == 0 {
            return Err(AggregateError::DegenerateCovariance(0));
        }
        let mut class_sums = vec![0.0; dim * num_classes];
        for (j, (p, &n)) in prototypes.iter().zip(&class_counts).enumerate() {
            match p {
                Some(p) if p.len() == dim && n > 0 => {
                    for (s, x) in class_sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
                        *s = x * n as f64;
                    }
                }
                None if n == 0 => {}
                _ => {
                    return Err(AggregateError::Invalid(format!(
                    "class {j}: prototype presence must match a positive count of dimension {dim}"
                )))
                }
            }
        }
        let mut global_mean = vec![0.0; dim];
        for row in class_sums.chunks_exact(dim) {
            for (m, x) in global_mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut global_mean {
            *m /= total_count as f64;
        }
        let priors = class_counts
            .iter()
            .map(|&n| n as f64 / total_count as f64)
            .collect();
        Ok(GlobalStatistics {
            dim,
            num_classes,
            class_sums,
            class_counts,
            total_count,
            prototypes,
            global_mean,
            covariance,
            priors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_sums(&self) -> &[f64] {
        &self.class_sums
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    pub fn prototypes(&self) -> &[Option<Vec<f64>>] {
        &self.prototypes
    }

    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.prototypes[class].as_deref()
    }

    pub fn present_classes(&self) -> Vec<bool> {
        self.prototypes.iter().map(Option::is_some).collect()
    }

    pub fn global_mean(&self) -> &[f64] {
        &self.global_mean
    }

    pub fn covariance(&self) -> &SymmetricMatrix {
        &self.covariance
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }
}

/// Global statistics from the (plain or securely) summed client uploads.
pub fn aggregate(stats_sum: &ClientStatistics) -> Result<GlobalStatistics, AggregateError> {
    let d = stats_sum.dim();
    let c = stats_sum.num_classes();
    let n = stats_sum.total_count();
    if n < 2 {
        return Err(AggregateError::DegenerateCovariance(n));
    }
    let nf = n as f64;

    let prototypes: Vec<Option<Vec<f64>>> = (0..c)
        .map(|j| {
            let count = stats_sum.class_counts()[j];
            (count > 0).then(|| {
                stats_sum
                    .class_sum(j)
                    .iter()
                    .map(|x| x / count as f64)
                    .collect()
            })
        })
        .collect();

    let a = stats_sum.feature_sum();
    let mu: Vec<f64> = a.iter().map(|x| x / nf).collect();

    let b = stats_sum.second_moment();
    let mut sigma = vec![0.0; d * d];
    for r in 0..d {
        for col in 0..d {
            let centered = b.get(r, col) - mu[r] * a[col] - a[r] * mu[col] + nf * mu[r] * mu[col];
            sigma[r * d + col] = centered / (nf - 1.0);
        }
    }
    let covariance = SymmetricMatrix::symmetrized(d, sigma)?;

    let priors = stats_sum
        .class_counts()
        .iter()
        .map(|&k| k as f64 / nf)
        .collect();

    Ok(GlobalStatistics {
        dim: d,
        num_classes: c,
        class_sums: stats_sum.class_sums().to_vec(),
        class_counts: stats_sum.class_counts().to_vec(),
        total_count: n,
        prototypes,
        global_mean: mu,
        covariance,
        priors,
    })
}

/// Pooled statistics computed directly from all features with the two-pass
/// definitions (mean first, then centered outer products). This is the
/// reference the federated reconstruction is measured against.
pub fn centralized_reference(data: &LabeledFeatureSet) -> Result<GlobalStatistics, AggregateError> {
    let n = data.len();
    if n < 2 {
        return Err(AggregateError::DegenerateCovariance(n as u64));
    }
    let d = data.dim();
    let c = data.num_classes();

    let mut class_sums = vec![0.0; c * d];
    let mut class_counts = vec![0u64; c];
    let mut total = vec![0.0; d];
    for (row, label) in data.samples() {
        let j = label as usize;
        class_counts[j] += 1;
        for k in 0..d {
            class_sums[j * d + k] += row[k];
            total[k] += row[k];
        }
    }
    let mean: Vec<f64> = total.iter().map(|x| x / n as f64).collect();

    let mut sigma = vec![0.0; d * d];
    for (row, _) in data.samples() {
        for r in 0..d {
            let dr = row[r] - mean[r];
            for col in 0..d {
                sigma[r * d + col] += dr * (row[col] - mean[col]);
            }
        }
    }
    for s in &mut sigma {
        *s /= (n - 1) as f64;
    }
    let covariance = SymmetricMatrix::from_row_major(d, sigma)?;

    let prototypes = (0..c)
        .map(|j| {
            (class_counts[j] > 0).then(|| {
                class_sums[j * d..(j + 1) * d]
                    .iter()
                    .map(|x| x / class_counts[j] as f64)
                    .collect()
            })
        })
        .collect();
    let priors = class_counts.iter().map(|&k| k as f64 / n as f64).collect();

    Ok(GlobalStatistics {
        dim: d,
        num_classes: c,
        class_sums,
        class_counts,
        total_count: n as u64,
        prototypes,
        global_mean: mean,
        covariance,
        priors,
    })
}

const GLOBAL_MAGIC: &[u8; 4] = b"FCGG";

#[derive(Debug, Serialize, Deserialize)]
struct GlobalMeta {
    format: String,
    dim: usize,
    num_classes: usize,
    total_count: u64,
    class_counts: Vec<u64>,
    present: Vec<bool>,
    binary: String,
}

/// Writes `<path>` (JSON metadata) and the same path with a `.bin` extension holding, in order:
/// class sums (`C*d`), prototypes (`C*d`, zero rows for absent classes),
/// global mean (`d`) and covariance (`d*d`), all `f64`.
pub fn write_global(g: &GlobalStatistics, json_path: impl AsRef<Path>) -> Result<(), DataError> {
    let json_path = json_path.as_ref();
    let (d, c) = (g.dim, g.num_classes);
    let mut values = Vec::with_capacity(2 * c * d + d + d * d);
    values.extend_from_slice(&g.class_sums);
    for p in &g.prototypes {
        match p {
            Some(p) => values.extend_from_slice(p),
            None => values.extend(std::iter::repeat_n(0.0, d)),
        }
    }
    values.extend_from_slice(&g.global_mean);
    values.extend_from_slice(g.covariance.as_slice());
    let meta = GlobalMeta {
        format: "fcgs-global-statistics".into(),
        dim: d,
        num_classes: c,
        total_count: g.total_count,
        class_counts: g.class_counts.clone(),
        present: g.present_classes(),
        binary: sidecar::sidecar_name(json_path),
    };
    sidecar::write(json_path, &meta, GLOBAL_MAGIC, d, c, &values)
}

pub fn read_global(json_path: impl AsRef<Path>) -> Result<GlobalStatistics, AggregateError> {
    let (meta, values) = sidecar::read::<GlobalMeta>(
        json_path.as_ref(),
        GLOBAL_MAGIC,
        |m| &m.binary,
        |m| {
            (
                m.dim,
                m.num_classes,
                2 * m.num_classes * m.dim + m.dim + m.dim * m.dim,
            )
        },
    )?;
    let (d, c) = (meta.dim, meta.num_classes);
    if meta.class_counts.len() != c || meta.present.len() != c {
        return Err(AggregateError::Invalid("per-class metadata length".into()));
    }
    let total: u64 = meta.class_counts.iter().sum();
    if total != meta.total_count {
        return Err(AggregateError::Invalid(
            "class counts do not sum to total".into(),
        ));
    }
    let class_sums = values[..c * d].to_vec();
    let prototypes = (0..c)
        .map(|j| meta.present[j].then(|| values[c * d + j * d..c * d + (j + 1) * d].to_vec()))
        .collect();
    let mean_start = 2 * c * d;
    let global_mean = values[mean_start..mean_start + d].to_vec();
    let covariance = SymmetricMatrix::from_row_major(d, values[mean_start + d..].to_vec())?;
    let priors = meta
        .class_counts
        .iter()
        .map(|&k| k as f64 / total.max(1) as f64)
        .collect();
    Ok(GlobalStatistics {
        dim: d,
        num_classes: c,
        class_sums,
        class_counts: meta.class_counts,
        total_count: meta.total_count,
        prototypes,
        global_mean,
        covariance,
        priors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client_stats::{compute_client_stats, merge_all};
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::numcore::distance;
    use crate::partitioner::{partition, PartitionSpec};

    fn set(rows: &[&[f64]], labels: &[u32], classes: usize) -> LabeledFeatureSet {
        let d = rows[0].len();
        LabeledFeatureSet::new(rows.concat(), labels.to_vec(), classes, d).unwrap()
    }

    fn synthetic(seed: u64) -> LabeledFeatureSet {
        generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            dim: 6,
            samples_per_class: 50,
            class_mean_scale: 4.0,
            shared_covariance_scale: 1.5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn two_point_example() {
        let data = set(&[&[1.0, 0.0], &[-1.0, 0.0]], &[0, 0], 1);
        let g = aggregate(&compute_client_stats(&data)).unwrap();
        assert_eq!(g.global_mean(), &[0.0, 0.0]);
        assert_eq!(g.covariance().as_slice(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_samples_have_zero_covariance() {
        let row: &[f64] = &[0.3, -1.7, 2.2];
        let data = set(&[row; 9], &[0, 1, 0, 1, 0, 1, 0, 1, 0], 2);
        let g = aggregate(&compute_client_stats(&data)).unwrap();
        assert!(g.covariance().as_slice().iter().all(|x| x.abs() <= 1e-12));
    }

    #[test]
    fn degenerate_counts() {
        let data = set(&[&[1.0]], &[0], 1);
        assert!(matches!(
            aggregate(&compute_client_stats(&data)),
            Err(AggregateError::DegenerateCovariance(1))
        ));
        assert!(matches!(
            centralized_reference(&data),
            Err(AggregateError::DegenerateCovariance(1))
        ));
    }

    #[test]
    fn empty_class_is_absent() {
        let data = set(&[&[1.0], &[2.0], &[4.0]], &[0, 2, 2], 3);
        let g = aggregate(&compute_client_stats(&data)).unwrap();
        assert_eq!(g.present_classes(), vec![true, false, true]);
        assert_eq!(g.prototype(2), Some(&[3.0][..]));
        assert_eq!(g.priors()[1], 0.0);
    }

    #[test]
    fn reference_sample_variance() {
        let data = set(&[&[1.0], &[2.0], &[3.0]], &[0, 0, 0], 1);
        let r = centralized_reference(&data).unwrap();
        assert_eq!(r.covariance().as_slice(), &[1.0]);
        assert_eq!(r.prototype(0).unwrap(), r.global_mean());
    }

    #[test]
    fn invariants_hold() {
        let data = synthetic(3);
        let g = aggregate(&compute_client_stats(&data)).unwrap();
        assert_eq!(g.class_counts().iter().sum::<u64>(), g.total_count());
        assert!((g.priors().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let mut weighted = vec![0.0; g.dim()];
        for j in 0..g.num_classes() {
            let p = g.prototype(j).unwrap();
            for k in 0..g.dim() {
                weighted[k] += g.class_counts()[j] as f64 * p[k];
            }
        }
        let n = g.total_count() as f64;
        let weighted: Vec<f64> = weighted.iter().map(|x| x / n).collect();
        assert!(distance(&weighted, g.global_mean()) <= 1e-10);
        let cov = g.covariance();
        for r in 0..g.dim() {
            for c in 0..g.dim() {
                assert_eq!(cov.get(r, c).to_bits(), cov.get(c, r).to_bits());
            }
        }
    }

    #[test]
    fn single_client_matches_reference() {
        let data = synthetic(8);
        let g = aggregate(&compute_client_stats(&data)).unwrap();
        let r = centralized_reference(&data).unwrap();
        assert!(distance(g.global_mean(), r.global_mean()) <= 1e-12);
        assert!(g.covariance().frobenius_distance(r.covariance()).unwrap() <= 1e-12);
    }

    #[test]
    fn partitioned_matches_reference() {
        let data = synthetic(4);
        let r = centralized_reference(&data).unwrap();
        for (m, alpha) in [(1, 0.5), (10, 0.05), (25, 0.1)] {
            let parts = partition(&data, &PartitionSpec::dirichlet(m, alpha, 7)).unwrap();
            let stats: Vec<_> = parts.iter().map(compute_client_stats).collect();
            let g = aggregate(&merge_all(6, 4, &stats).unwrap()).unwrap();
            assert!(distance(g.global_mean(), r.global_mean()) <= 1e-9);
            assert!(g.covariance().frobenius_distance(r.covariance()).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn file_round_trip() {
        let data = set(&[&[1.0, 2.0], &[2.0, 0.5], &[0.0, 1.0]], &[0, 0, 2], 3);
        let g = aggregate(&compute_client_stats(&data)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("global.json");
        write_global(&g, &path).unwrap();
        assert!(dir.path().join("global.bin").exists());
        assert_eq!(read_global(&path).unwrap(), g);
    }

    #[test]
    fn from_moments_consistency() {
        let g = GlobalStatistics::from_moments(
            vec![1, 3],
            vec![Some(vec![4.0, 0.0]), Some(vec![0.0, 4.0])],
            SymmetricMatrix::identity(2),
        )
        .unwrap();
        assert_eq!(g.global_mean(), &[1.0, 3.0]);
        assert_eq!(g.priors(), &[0.25, 0.75]);
        assert!(GlobalStatistics::from_moments(
            vec![0, 3],
            vec![Some(vec![4.0, 0.0]), Some(vec![0.0, 4.0])],
            SymmetricMatrix::identity(2),
        )
        .is_err());
    }
}
