//! Labeled feature sets, the `FCGS` binary file format, and synthetic
//! feature generators.
//!
//! File layout (all little-endian):
//!
//! | offset | size      | field                          |
//! |--------|-----------|--------------------------------|
//! | 0      | 4         | magic `b"FCGS"`                |
//! | 4      | 4         | version `u32` (= 1)            |
//! | 8      | 8         | sample count `N` (`u64`)       |
//! | 16     | 4         | feature dimension `d` (`u32`)  |
//! | 20     | 4         | class count `C` (`u32`)        |
//! | 24     | `N*d*4`   | features, `f32`, row-major     |
//! | ...    | `N*4`     | labels, `u32`                  |
//!
//! Features are held in memory as `f64`; writing narrows them to `f32`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FCGS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncation { expected: u64, actual: u64 },

    #[error("invalid feature set: {0}")]
    Invalid(String),
}

/// `N` feature rows of dimension `d`, each with a label in `[0, C)`.
///
/// A set with zero rows is allowed in memory (an empty client after
/// partitioning) but cannot be written to or read from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    features: Vec<f64>,
    labels: Vec<u32>,
    num_classes: usize,
    dim: usize,
}

impl LabeledFeatureSet {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u32>,
        num_classes: usize,
        dim: usize,
    ) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Invalid(
                "feature dimension must be positive".into(),
            ));
        }
        if num_classes == 0 {
            return Err(DataError::Invalid("class count must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::Invalid(format!(
                "{} feature values do not form {} rows of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(DataError::Invalid(format!(
                "non-finite feature in row {}",
                i / dim
            )));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(DataError::Integrity(format!(
                "label {l} of row {i} is not below class count {num_classes}"
            )));
        }
        Ok(LabeledFeatureSet {
            features,
            labels,
            num_classes,
            dim,
        })
    }

    pub fn empty(num_classes: usize, dim: usize) -> Self {
        LabeledFeatureSet {
            features: Vec::new(),
            labels: Vec::new(),
            num_classes,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Iterates `(feature_row, label)` pairs in storage order.
    pub fn samples(&self) -> impl Iterator<Item = (&[f64], u32)> + '_ {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    pub fn class_histogram(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Rows at `indices`, in the order given.
    pub fn subset(&self, indices: &[usize]) -> LabeledFeatureSet {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledFeatureSet {
            features,
            labels,
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    /// Concatenates sets of identical shape.
    pub fn concat(parts: &[LabeledFeatureSet]) -> Result<LabeledFeatureSet, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Invalid("nothing to concatenate".into()))?;
        let mut out = LabeledFeatureSet::empty(first.num_classes, first.dim);
        for p in parts {
            if p.dim != out.dim || p.num_classes != out.num_classes {
                return Err(DataError::Invalid("shape mismatch in concatenation".into()));
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    /// Same labels, new features of dimension `dim`.
    pub fn with_features(&self, features: Vec<f64>, dim: usize) -> Result<Self, DataError> {
        LabeledFeatureSet::new(features, self.labels.clone(), self.num_classes, dim)
    }
}

/// Size in bytes of a file holding `n` rows of dimension `d`.
pub fn encoded_len(n: u64, d: u64) -> u64 {
    HEADER_LEN as u64 + n * d * 4 + n * 4
}

pub fn encode(set: &LabeledFeatureSet) -> Result<Vec<u8>, DataError> {
    if set.is_empty() {
        return Err(DataError::Invalid(
            "cannot encode an empty feature set".into(),
        ));
    }
    let dim =
        u32::try_from(set.dim).map_err(|_| DataError::Invalid("dimension exceeds u32".into()))?;
    let classes = u32::try_from(set.num_classes)
        .map_err(|_| DataError::Invalid("class count exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(encoded_len(set.len() as u64, set.dim as u64) as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&classes.to_le_bytes());
    for &x in &set.features {
        let narrowed = x as f32;
        if !narrowed.is_finite() {
            return Err(DataError::Invalid(format!("feature {x} overflows f32")));
        }
        buf.extend_from_slice(&narrowed.to_le_bytes());
    }
    for &l in &set.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    Ok(buf)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<LabeledFeatureSet, DataError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        return Err(DataError::Truncation {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u32_at(bytes, 16) as u64;
    let c = u32_at(bytes, 20) as u64;
    if n == 0 || d == 0 || c == 0 {
        return Err(DataError::Format(format!(
            "header declares N={n}, d={d}, C={c}; all must be positive"
        )));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|x| x.checked_add(n.checked_mul(4)?))
        .and_then(|x| x.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| DataError::Format("header sizes overflow".into()))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(DataError::Truncation { expected, actual });
    }
    if actual > expected {
        return Err(DataError::Format(format!(
            "{} trailing bytes after payload",
            actual - expected
        )));
    }
    let (n, d, c) = (n as usize, d as usize, c as usize);
    let feat_end = HEADER_LEN + n * d * 4;
    let features = bytes[HEADER_LEN..feat_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let labels = bytes[feat_end..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    LabeledFeatureSet::new(features, labels, c, d)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<LabeledFeatureSet, DataError> {
    decode(&fs::read(path)?)
}

pub fn write_feature_file(
    set: &LabeledFeatureSet,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let bytes = encode(set)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

/// Parameters of the shared-covariance Gaussian generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_mean_scale: f64,
    pub shared_covariance_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(DataError::Invalid(
                "synthetic counts must be positive".into(),
            ));
        }
        if !(self.class_mean_scale > 0.0 && self.class_mean_scale.is_finite())
            || !(self.shared_covariance_scale > 0.0 && self.shared_covariance_scale.is_finite())
        {
            return Err(DataError::Invalid(
                "synthetic scales must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The generating class means `class_mean_scale * u_j`, `u_j` a seeded
    /// unit direction. Row-major `C x d`.
    pub fn class_means(&self) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        let mut means = Vec::with_capacity(self.num_classes * self.dim);
        for _ in 0..self.num_classes {
            let dir: Vec<f64> = loop {
                let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            };
            means.extend(dir.into_iter().map(|x| x * self.class_mean_scale));
        }
        means
    }
}

/// Draws `samples_per_class` rows per class from `N(m_j, s * I)`.
///
/// Rows are interleaved by class (row `i` has label `i % C`) and every value
/// is rounded to `f32` precision so the in-memory set equals its file image.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledFeatureSet, DataError> {
    spec.validate()?;
    let means = spec.class_means();
    // the sample stream is keyed off a different seed than the means
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let std_dev = spec.shared_covariance_scale.sqrt();
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        let mean = &means[class * spec.dim..(class + 1) * spec.dim];
        for &m in mean {
            let z: f64 = rng.sample(StandardNormal);
            features.push((m + std_dev * z) as f32 as f64);
        }
        labels.push(class as u32);
    }
    LabeledFeatureSet::new(features, labels, spec.num_classes, spec.dim)
}

/// Two-class 2-D checkerboard: clusters at `(±1, ±1)`, class 0 where the
/// coordinates share a sign, class 1 otherwise. Not linearly separable.
pub fn generate_checkerboard(
    samples_per_cluster: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledFeatureSet, DataError> {
    if samples_per_cluster == 0 || spread.is_nan() || spread <= 0.0 {
        return Err(DataError::Invalid(
            "checkerboard needs samples and positive spread".into(),
        ));
    }
    const CENTERS: [([f64; 2], u32); 4] = [
        ([1.0, 1.0], 0),
        ([-1.0, -1.0], 0),
        ([1.0, -1.0], 1),
        ([-1.0, 1.0], 1),
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(samples_per_cluster * 8);
    let mut labels = Vec::with_capacity(samples_per_cluster * 4);
    for _ in 0..samples_per_cluster {
        for (center, label) in CENTERS {
            for c in center {
                let z: f64 = rng.sample(StandardNormal);
                features.push((c + spread * z) as f32 as f64);
            }
            labels.push(label);
        }
    }
    LabeledFeatureSet::new(features, labels, 2, 2)
}
