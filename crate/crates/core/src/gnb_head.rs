//! Training-free linear classifier head from global statistics.
//!
//! With class-conditional Gaussians sharing one covariance, the posterior
//! `pi_j N(f | mu_j, Sigma) / sum_k pi_k N(f | mu_k, Sigma)` is a softmax
//! over the linear logits `w_jᵀ f + b_j` with
//!
//! ```text
//! w_j = Sigma⁻¹ mu_j
//! b_j = log pi_j - ½ mu_jᵀ Sigma⁻¹ mu_j
//! ```
//!
//! `Sigma` is ridge-regularized as `Sigma + eps I` with
//! `eps = ridge_scale * trace(Sigma) / d` before factorization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, LabeledFeatureSet};
use crate::numcore::{dot, Cholesky, NumError};
use crate::server_agg::GlobalStatistics;
use crate::sidecar;

pub const DEFAULT_RIDGE_SCALE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("regularized covariance is not positive definite: {0}")]
    SingularCovariance(NumError),

    #[error("dimension mismatch: head expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid head: {0}")]
    Invalid(String),

    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    dim: usize,
    /// `C x d` row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    present: Vec<bool>,
    ridge_used: f64,
}

impl LinearHead {
    /// Wraps raw parameters. Rows of absent classes are ignored by every
    /// prediction method.
    pub fn from_parts(
        dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        present: Vec<bool>,
        ridge_used: f64,
    ) -> Result<Self, HeadError> {
        let c = bias.len();
        if dim == 0 || weights.len() != c * dim || present.len() != c {
            return Err(HeadError::Invalid("inconsistent head shapes".into()));
        }
        if !present.iter().any(|&p| p) {
            return Err(HeadError::Invalid("head has no present class".into()));
        }
        let finite = (0..c).filter(|&j| present[j]).all(|j| {
            bias[j].is_finite()
                && weights[j * dim..(j + 1) * dim]
                    .iter()
                    .all(|x| x.is_finite())
        });
        if !finite {
            return Err(HeadError::Invalid("non-finite head parameter".into()));
        }
        Ok(LinearHead {
            dim,
            weights,
            bias,
            present,
            ridge_used,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn weight_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn present_classes(&self) -> &[bool] {
        &self.present
    }

    pub fn ridge_used(&self) -> f64 {
        self.ridge_used
    }

    fn check(&self, f: &[f64]) -> Result<(), HeadError> {
        if f.len() != self.dim {
            return Err(HeadError::DimensionMismatch {
                expected: self.dim,
                actual: f.len(),
            });
        }
        Ok(())
    }

    /// `W f + b`, with `-inf` for absent classes.
    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>, HeadError> {
        self.check(f)?;
        Ok((0..self.num_classes())
            .map(|j| {
                if self.present[j] {
                    dot(self.weight_row(j), f) + self.bias[j]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }

    /// Softmax over present-class logits; absent classes get probability 0.
    pub fn probabilities(&self, f: &[f64]) -> Result<Vec<f64>, HeadError> {
        let logits = self.logits(f)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        Ok(exp.into_iter().map(|e| e / total).collect())
    }

    /// Argmax over present classes, ties to the lowest index.
    pub fn predict(&self, f: &[f64]) -> Result<usize, HeadError> {
        let logits = self.logits(f)?;
        let mut best = None;
        for (j, &z) in logits.iter().enumerate() {
            if !self.present[j] {
                continue;
            }
            match best {
                Some((_, bz)) if z <= bz => {}
                _ => best = Some((j, z)),
            }
        }
        Ok(best.expect("head has a present class").0)
    }

    pub fn predict_all(&self, data: &LabeledFeatureSet) -> Result<Vec<usize>, HeadError> {
        if data.dim() != self.dim {
            return Err(HeadError::DimensionMismatch {
                expected: self.dim,
                actual: data.dim(),
            });
        }
        data.samples().map(|(row, _)| self.predict(row)).collect()
    }
}

pub fn build_head(g: &GlobalStatistics, ridge_scale: f64) -> Result<LinearHead, HeadError> {
    if !(ridge_scale >= 0.0 && ridge_scale.is_finite()) {
        return Err(HeadError::Invalid(format!(
            "ridge scale must be non-negative, got {ridge_scale}"
        )));
    }
    let d = g.dim();
    let mut sigma = g.covariance().clone();
    let ridge = ridge_scale * sigma.trace() / d as f64;
    sigma.add_diagonal(ridge);
    let chol = Cholesky::factor(&sigma).map_err(HeadError::SingularCovariance)?;

    let c = g.num_classes();
    let mut weights = vec![0.0; c * d];
    let mut bias = vec![0.0; c];
    let present = g.present_classes();
    for j in 0..c {
        let Some(mu) = g.prototype(j) else { continue };
        let w = chol.solve(mu).map_err(HeadError::SingularCovariance)?;
        bias[j] = g.priors()[j].ln() - 0.5 * dot(mu, &w);
        weights[j * d..(j + 1) * d].copy_from_slice(&w);
    }
    LinearHead::from_parts(d, weights, bias, present, ridge)
}

/// Probability vector for one feature row.
pub fn head_probabilities(head: &LinearHead, f: &[f64]) -> Result<Vec<f64>, HeadError> {
    head.probabilities(f)
}

const HEAD_MAGIC: &[u8; 4] = b"FCGH";

#[derive(Debug, Serialize, Deserialize)]
struct HeadMeta {
    format: String,
    dim: usize,
    num_classes: usize,
    present: Vec<bool>,
    ridge_used: f64,
    binary: String,
}

/// Writes `<path>` (JSON metadata) and the same path with a `.bin` extension holding `W` (`C*d`)
/// then `b` (`C`).
pub fn write_head(head: &LinearHead, json_path: impl AsRef<Path>) -> Result<(), DataError> {
    let json_path = json_path.as_ref();
    let mut values = head.weights.clone();
    values.extend_from_slice(&head.bias);
    let meta = HeadMeta {
        format: "fcgs-linear-head".into(),
        dim: head.dim,
        num_classes: head.num_classes(),
        present: head.present.clone(),
        ridge_used: head.ridge_used,
        binary: sidecar::sidecar_name(json_path),
    };
    sidecar::write(
        json_path,
        &meta,
        HEAD_MAGIC,
        head.dim,
        head.num_classes(),
        &values,
    )
}

pub fn read_head(json_path: impl AsRef<Path>) -> Result<LinearHead, HeadError> {
    let (meta, values) = sidecar::read::<HeadMeta>(
        json_path.as_ref(),
        HEAD_MAGIC,
        |m| &m.binary,
        |m| (m.dim, m.num_classes, m.num_classes * (m.dim + 1)),
    )?;
    let split = meta.num_classes * meta.dim;
    LinearHead::from_parts(
        meta.dim,
        values[..split].to_vec(),
        values[split..].to_vec(),
        meta.present,
        meta.ridge_used,
    )
}
