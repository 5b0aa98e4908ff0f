//! Splitting one feature set into disjoint client datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Gamma;
use thiserror::Error;

use crate::dataio::LabeledFeatureSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },

    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    /// Per-class proportions drawn from `Dir(alpha * 1_M)`.
    Dirichlet { alpha: f64 },
    /// Seeded shuffle dealt round-robin.
    Uniform,
    /// `assignment[i]` is the client that receives sample `i`.
    ByAssignment(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub scheme: Scheme,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn dirichlet(num_clients: usize, alpha: f64, seed: u64) -> Self {
        PartitionSpec {
            num_clients,
            scheme: Scheme::Dirichlet { alpha },
            seed,
        }
    }

    pub fn uniform(num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            num_clients,
            scheme: Scheme::Uniform,
            seed,
        }
    }

    fn validate(&self, n: usize) -> Result<(), PartitionError> {
        if self.num_clients == 0 {
            return Err(PartitionError::InvalidSpec(
                "need at least one client".into(),
            ));
        }
        if self.num_clients > n {
            return Err(PartitionError::TooManyClients {
                clients: self.num_clients,
                samples: n,
            });
        }
        match &self.scheme {
            Scheme::Dirichlet { alpha } if !(*alpha > 0.0 && alpha.is_finite()) => {
                Err(PartitionError::InvalidSpec(format!(
                    "dirichlet alpha must be positive, got {alpha}"
                )))
            }
            Scheme::ByAssignment(map) => {
                if map.len() != n {
                    return Err(PartitionError::InvalidSpec(format!(
                        "assignment covers {} of {} samples",
                        map.len(),
                        n
                    )));
                }
                if let Some(&bad) = map.iter().find(|&&c| c >= self.num_clients) {
                    return Err(PartitionError::InvalidSpec(format!(
                        "assignment names client {bad} of {}",
                        self.num_clients
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Sample indices per client, each list ascending.
pub fn partition_indices(
    data: &LabeledFeatureSet,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>, PartitionError> {
    let n = data.len();
    spec.validate(n)?;
    let m = spec.num_clients;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut clients = vec![Vec::new(); m];

    match &spec.scheme {
        Scheme::Uniform => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for (k, idx) in order.into_iter().enumerate() {
                clients[k % m].push(idx);
            }
        }
        Scheme::ByAssignment(map) => {
            for (idx, &client) in map.iter().enumerate() {
                clients[client].push(idx);
            }
        }
        Scheme::Dirichlet { alpha } => {
            let gamma =
                Gamma::new(*alpha, 1.0).map_err(|e| PartitionError::InvalidSpec(e.to_string()))?;
            for class in 0..data.num_classes() as u32 {
                let mut members: Vec<usize> = data
                    .labels()
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == class)
                    .map(|(i, _)| i)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                members.shuffle(&mut rng);
                let proportions = dirichlet_sample(&mut rng, &gamma, m);
                let counts = largest_remainder(&proportions, members.len());
                let mut start = 0;
                for (client, &count) in counts.iter().enumerate() {
                    clients[client].extend_from_slice(&members[start..start + count]);
                    start += count;
                }
            }
        }
    }

    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(clients)
}

/// Splits `data` into `spec.num_clients` disjoint sets whose union is `data`.
/// Each client keeps its samples in their original relative order.
pub fn partition(
    data: &LabeledFeatureSet,
    spec: &PartitionSpec,
) -> Result<Vec<LabeledFeatureSet>, PartitionError> {
    Ok(partition_indices(data, spec)?
        .iter()
        .map(|idx| data.subset(idx))
        .collect())
}

fn dirichlet_sample(rng: &mut ChaCha20Rng, gamma: &Gamma<f64>, m: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..m).map(|_| rng.sample(gamma)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed; fall back to equal shares
        vec![1.0 / m as f64; m]
    }
}

/// Integer counts summing to `total`, proportional to `proportions`.
/// Leftover units go to the largest fractional parts, ties to the lower
/// client id.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    // proportions summing to slightly above one can overshoot
    while assigned > total {
        let (max_client, _) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty proportions");
        counts[max_client] -= 1;
        assigned -= 1;
    }
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &client in order.iter().take(total.saturating_sub(assigned)) {
        counts[client] += 1;
    }
    counts
}
