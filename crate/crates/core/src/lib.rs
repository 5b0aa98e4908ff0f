//! One-shot federated learning from mergeable feature statistics.
//!
//! Each client summarizes its already-extracted features as per-class sums,
//! a second-moment matrix and per-class counts. Because those sums merge by
//! addition, one upload round (optionally under pairwise additive masking)
//! lets the server recover the exact pooled class means and covariance, and
//! from them a closed-form linear classifier. The same global prototypes can
//! be sent back to clients as a feature-alignment target for personalized
//! local training.
//!
//! Module map:
//!
//! - [`numcore`]: vectors, symmetric matrices, Cholesky solves
//! - [`dataio`]: labeled feature sets, the `FCGS` file format, synthetic data
//! - [`partitioner`]: Dirichlet / uniform / explicit client splits
//! - [`client_stats`]: per-client sufficient statistics and their payload
//! - [`secure_agg`]: pairwise-masked fixed-point secure sum
//! - [`server_agg`]: global prototypes, mean and covariance
//! - [`gnb_head`]: the closed-form Gaussian head
//! - [`feature_expand`]: shared random projection before statistics
//! - [`personalize`]: prototype-regularized local training
//! - [`metrics`]: deviation, upload accounting, accuracy, reports
//! - [`simulate`]: the end-to-end pipeline

pub mod client_stats;
pub mod dataio;
pub mod feature_expand;
pub mod gnb_head;
pub mod metrics;
pub mod numcore;
pub mod partitioner;
pub mod personalize;
pub mod secure_agg;
pub mod server_agg;
mod sidecar;
pub mod simulate;

use thiserror::Error;

pub use client_stats::{compute_client_stats, merge_stats, ClientStatistics, UploadLayout};
pub use dataio::{
    generate_synthetic, read_feature_file, write_feature_file, LabeledFeatureSet, SyntheticSpec,
};
pub use gnb_head::{build_head, LinearHead};
pub use partitioner::{partition, PartitionSpec};
pub use server_agg::{aggregate, centralized_reference, GlobalStatistics};
pub use simulate::{simulate, SecureMode, SimulationConfig};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numcore::NumError),

    #[error(transparent)]
    Data(#[from] dataio::DataError),

    #[error(transparent)]
    Partition(#[from] partitioner::PartitionError),

    #[error(transparent)]
    Stats(#[from] client_stats::StatsError),

    #[error(transparent)]
    SecureAgg(#[from] secure_agg::SecureAggError),

    #[error(transparent)]
    Aggregate(#[from] server_agg::AggregateError),

    #[error(transparent)]
    Head(#[from] gnb_head::HeadError),

    #[error(transparent)]
    Expand(#[from] feature_expand::ExpandError),

    #[error(transparent)]
    Personalize(#[from] personalize::PersonalizeError),

    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),

    #[error("configuration error: {0}")]
    Config(String),
}
