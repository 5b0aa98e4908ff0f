//! Per-client sufficient statistics: per-class feature sums, the feature
//! second-moment matrix, and per-class counts.
//!
//! Statistics from disjoint datasets merge by plain addition, which is what
//! lets the server recover global moments from a single upload per client.

use thiserror::Error;

use crate::dataio::LabeledFeatureSet;
use crate::numcore::{NumError, SymmetricMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("statistics shape mismatch: ({dim_a}, {classes_a}) vs ({dim_b}, {classes_b})")]
    ShapeMismatch {
        dim_a: usize,
        classes_a: usize,
        dim_b: usize,
        classes_b: usize,
    },

    #[error("payload error: {0}")]
    Payload(String),

    #[error(transparent)]
    Num(#[from] NumError),
}

/// How the second-moment matrix is laid out in an upload payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UploadLayout {
    /// Full `d x d` matrix, row-major. `(C + d) * d + C` scalars in total.
    #[default]
    Dense,
    /// Upper triangle only, `d * (d + 1) / 2` entries.
    PackedTriangle,
}

impl UploadLayout {
    pub fn second_moment_len(self, dim: usize) -> usize {
        match self {
            UploadLayout::Dense => dim * dim,
            UploadLayout::PackedTriangle => dim * (dim + 1) / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientStatistics {
    dim: usize,
    num_classes: usize,
    /// `C x d` row-major; row `j` is the sum of class-`j` features.
    class_sums: Vec<f64>,
    second_moment: SymmetricMatrix,
    class_counts: Vec<u64>,
}

impl ClientStatistics {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        ClientStatistics {
            dim,
            num_classes,
            class_sums: vec![0.0; dim * num_classes],
            second_moment: SymmetricMatrix::zeros(dim),
            class_counts: vec![0; num_classes],
        }
    }

    pub fn from_parts(
        class_sums: Vec<f64>,
        second_moment: SymmetricMatrix,
        class_counts: Vec<u64>,
    ) -> Result<Self, StatsError> {
        let dim = second_moment.dim();
        let num_classes = class_counts.len();
        if class_sums.len() != dim * num_classes {
            return Err(StatsError::Payload(format!(
                "{} class-sum entries for d={dim}, C={num_classes}",
                class_sums.len()
            )));
        }
        Ok(ClientStatistics {
            dim,
            num_classes,
            class_sums,
            second_moment,
            class_counts,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_sum(&self, class: usize) -> &[f64] {
        &self.class_sums[class * self.dim..(class + 1) * self.dim]
    }

    pub fn class_sums(&self) -> &[f64] {
        &self.class_sums
    }

    pub fn second_moment(&self) -> &SymmetricMatrix {
        &self.second_moment
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn total_count(&self) -> u64 {
        self.class_counts.iter().sum()
    }

    /// Sum of all features regardless of class.
    pub fn feature_sum(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.dim];
        for row in self.class_sums.chunks_exact(self.dim) {
            for (t, x) in total.iter_mut().zip(row) {
                *t += x;
            }
        }
        total
    }

    fn check_shape(&self, other: &ClientStatistics) -> Result<(), StatsError> {
        if self.dim != other.dim || self.num_classes != other.num_classes {
            return Err(StatsError::ShapeMismatch {
                dim_a: self.dim,
                classes_a: self.num_classes,
                dim_b: other.dim,
                classes_b: other.num_classes,
            });
        }
        Ok(())
    }

    pub fn merge_from(&mut self, other: &ClientStatistics) -> Result<(), StatsError> {
        self.check_shape(other)?;
        for (a, b) in self.class_sums.iter_mut().zip(&other.class_sums) {
            *a += b;
        }
        self.second_moment.add_assign(&other.second_moment)?;
        for (a, b) in self.class_counts.iter_mut().zip(&other.class_counts) {
            *a += b;
        }
        Ok(())
    }

    /// Number of scalars in an upload payload.
    pub fn payload_scalars(dim: usize, num_classes: usize, layout: UploadLayout) -> usize {
        num_classes + num_classes * dim + layout.second_moment_len(dim)
    }

    /// Upload payload: `d` (u32), `C` (u32), `C` counts (u64), `C*d` class
    /// sums (f64, row-major), then the second moment (f64) in `layout`.
    pub fn to_payload(&self, layout: UploadLayout) -> Vec<u8> {
        let scalars = Self::payload_scalars(self.dim, self.num_classes, layout);
        let mut buf = Vec::with_capacity(8 + 8 * scalars);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for &c in &self.class_counts {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for &x in &self.class_sums {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let moment = match layout {
            UploadLayout::Dense => self.second_moment.as_slice().to_vec(),
            UploadLayout::PackedTriangle => self.second_moment.upper_triangle(),
        };
        for x in moment {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf
    }

    pub fn from_payload(bytes: &[u8], layout: UploadLayout) -> Result<Self, StatsError> {
        if bytes.len() < 8 {
            return Err(StatsError::Payload(
                "payload shorter than its header".into(),
            ));
        }
        let dim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let num_classes = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + 8 * Self::payload_scalars(dim, num_classes, layout);
        if bytes.len() != expected {
            return Err(StatsError::Payload(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut words = bytes[8..].chunks_exact(8).map(|w| w.try_into().unwrap());
        let class_counts: Vec<u64> = words
            .by_ref()
            .take(num_classes)
            .map(u64::from_le_bytes)
            .collect();
        let class_sums: Vec<f64> = words
            .by_ref()
            .take(num_classes * dim)
            .map(f64::from_le_bytes)
            .collect();
        let moment: Vec<f64> = words.map(f64::from_le_bytes).collect();
        let second_moment = match layout {
            UploadLayout::Dense => SymmetricMatrix::from_row_major(dim, moment)?,
            UploadLayout::PackedTriangle => SymmetricMatrix::from_upper_triangle(dim, &moment)?,
        };
        Self::from_parts(class_sums, second_moment, class_counts)
    }
}

/// One pass over `data` in storage order.
pub fn compute_client_stats(data: &LabeledFeatureSet) -> ClientStatistics {
    let mut stats = ClientStatistics::zeros(data.dim(), data.num_classes());
    let d = data.dim();
    for (row, label) in data.samples() {
        let j = label as usize;
        for (acc, x) in stats.class_sums[j * d..(j + 1) * d].iter_mut().zip(row) {
            *acc += x;
        }
        stats
            .second_moment
            .add_outer(row)
            .expect("row length equals set dimension");
        stats.class_counts[j] += 1;
    }
    stats
}

pub fn merge_stats(
    a: &ClientStatistics,
    b: &ClientStatistics,
) -> Result<ClientStatistics, StatsError> {
    let mut out = a.clone();
    out.merge_from(b)?;
    Ok(out)
}

/// Folds per-client statistics in the order given.
pub fn merge_all<'a, I>(
    dim: usize,
    num_classes: usize,
    parts: I,
) -> Result<ClientStatistics, StatsError>
where
    I: IntoIterator<Item = &'a ClientStatistics>,
{
    let mut acc = ClientStatistics::zeros(dim, num_classes);
    for p in parts {
        acc.merge_from(p)?;
    }
    Ok(acc)
}
