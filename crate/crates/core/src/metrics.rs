//! Deviation from the pooled reference, upload accounting, accuracy, and
//! the JSON run report.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client_stats::{ClientStatistics, UploadLayout};
use crate::dataio::LabeledFeatureSet;
use crate::gnb_head::{HeadError, LinearHead};
use crate::numcore::distance;
use crate::server_agg::GlobalStatistics;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cannot evaluate on an empty set")]
    EmptyTestSet,

    #[error(transparent)]
    Head(#[from] HeadError),

    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// `(||mu - mu_ref||_2, ||Sigma - Sigma_ref||_F)`.
pub fn deviation(
    global: &GlobalStatistics,
    reference: &GlobalStatistics,
) -> Result<(f64, f64), MetricsError> {
    if global.dim() != reference.dim() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} vs {}",
            global.dim(),
            reference.dim()
        )));
    }
    let delta_mu = distance(global.global_mean(), reference.global_mean());
    let delta_sigma = global
        .covariance()
        .frobenius_distance(reference.covariance())
        .map_err(|e| MetricsError::DimensionMismatch(e.to_string()))?;
    Ok((delta_mu, delta_sigma))
}

/// Scalars one client uploads. With the dense layout this is
/// `(C + d) * d + C`: `C*d` class sums, `d²` second moment, `C` counts.
pub fn count_upload(dim: usize, num_classes: usize, layout: UploadLayout) -> u64 {
    ClientStatistics::payload_scalars(dim, num_classes, layout) as u64
}

/// Bytes of one serialized upload: an 8-byte shape header plus 8 bytes per
/// scalar.
pub fn upload_bytes(dim: usize, num_classes: usize, layout: UploadLayout) -> u64 {
    8 + 8 * count_upload(dim, num_classes, layout)
}

/// Fraction of rows whose predicted class equals the label. Rows labelled
/// with a class the head lacks are always wrong.
pub fn evaluate(head: &LinearHead, test: &LabeledFeatureSet) -> Result<f64, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let predictions = head.predict_all(test)?;
    Ok(accuracy_of(&predictions, test.labels()))
}

pub fn accuracy_of(predictions: &[usize], labels: &[u32]) -> f64 {
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub accuracy: f64,
    pub delta_mu: f64,
    pub delta_sigma: f64,
    pub params_per_client: u64,
    pub params_total: u64,
    pub bytes_per_client: u64,
    pub elapsed_seconds: f64,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
