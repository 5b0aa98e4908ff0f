//! End-to-end one-shot run: partition, client statistics, (secure)
//! aggregation, closed-form head, evaluation, report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::client_stats::{compute_client_stats, merge_all, ClientStatistics, UploadLayout};
use crate::dataio::LabeledFeatureSet;
use crate::feature_expand::{expand, ExpansionConfig};
use crate::gnb_head::{build_head, LinearHead, DEFAULT_RIDGE_SCALE};
use crate::metrics::{accuracy_of, count_upload, deviation, upload_bytes, RunReport};
use crate::partitioner::{partition, PartitionSpec, Scheme};
use crate::secure_agg::{
    aggregate_masked, encode_masked, FixedPointCodec, SecureScope, SecureSession,
    DEFAULT_FRACTIONAL_BITS,
};
use crate::server_agg::{aggregate, centralized_reference, GlobalStatistics};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecureMode {
    #[default]
    Off,
    Counts,
    Full,
}

impl std::str::FromStr for SecureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(SecureMode::Off),
            "counts" => Ok(SecureMode::Counts),
            "full" => Ok(SecureMode::Full),
            other => Err(format!("unknown secure-agg mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub clients: usize,
    /// Dirichlet concentration; `None` splits uniformly.
    pub alpha: Option<f64>,
    pub seed: u64,
    pub secure_agg: SecureMode,
    pub fractional_bits: u32,
    pub expansion: Option<ExpansionConfig>,
    pub ridge_scale: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            clients: 10,
            alpha: Some(0.5),
            seed: 0,
            secure_agg: SecureMode::Off,
            fractional_bits: DEFAULT_FRACTIONAL_BITS,
            expansion: None,
            ridge_scale: DEFAULT_RIDGE_SCALE,
        }
    }
}

impl SimulationConfig {
    fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.clients,
            scheme: match self.alpha {
                Some(alpha) => Scheme::Dirichlet { alpha },
                None => Scheme::Uniform,
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub global: GlobalStatistics,
    pub head: LinearHead,
    pub predictions: Vec<usize>,
    pub report: RunReport,
}

/// Sums per-client statistics, through masking if requested. Client ids are
/// the positions in `stats`.
pub fn server_sum(
    stats: &[ClientStatistics],
    mode: SecureMode,
    fractional_bits: u32,
    setup_seed: u64,
) -> Result<ClientStatistics, Error> {
    let first = stats
        .first()
        .ok_or_else(|| Error::Config("no client statistics to aggregate".into()))?;
    let scope = match mode {
        SecureMode::Off => return Ok(merge_all(first.dim(), first.num_classes(), stats)?),
        SecureMode::Counts => SecureScope::CountsOnly,
        SecureMode::Full => SecureScope::FullStatistics,
    };
    let ids: Vec<usize> = (0..stats.len()).collect();
    let session = SecureSession::trusted_setup(
        &ids,
        scope,
        FixedPointCodec::new(fractional_bits)?,
        setup_seed,
    )?;
    let uploads = stats
        .iter()
        .enumerate()
        .map(|(id, s)| encode_masked(s, &session, id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate_masked(&uploads, &session)?)
}

pub fn simulate(
    train: &LabeledFeatureSet,
    test: &LabeledFeatureSet,
    cfg: &SimulationConfig,
) -> Result<SimulationOutcome, Error> {
    let started = Instant::now();
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        return Err(Error::Config(format!(
            "train (d={}, C={}) and test (d={}, C={}) shapes differ",
            train.dim(),
            train.num_classes(),
            test.dim(),
            test.num_classes()
        )));
    }
    let (train, test) = match &cfg.expansion {
        Some(e) => (expand(train, e)?, expand(test, e)?),
        None => (train.clone(), test.clone()),
    };

    let clients = partition(&train, &cfg.partition_spec())?;
    let stats: Vec<ClientStatistics> = clients.iter().map(compute_client_stats).collect();
    let summed = server_sum(&stats, cfg.secure_agg, cfg.fractional_bits, cfg.seed)?;
    let global = aggregate(&summed)?;
    let head = build_head(&global, cfg.ridge_scale)?;
    let predictions = head.predict_all(&test)?;
    let accuracy = accuracy_of(&predictions, test.labels());

    let reference = centralized_reference(&train)?;
    let (delta_mu, delta_sigma) = deviation(&global, &reference)?;
    let per_client = count_upload(train.dim(), train.num_classes(), UploadLayout::Dense);

    let report = RunReport {
        accuracy,
        delta_mu,
        delta_sigma,
        params_per_client: per_client,
        params_total: per_client * cfg.clients as u64,
        bytes_per_client: upload_bytes(train.dim(), train.num_classes(), UploadLayout::Dense),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        config: serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
    };
    Ok(SimulationOutcome {
        global,
        head,
        predictions,
        report,
    })
}
