//! Pairwise additive masking over fixed-point integers modulo 2^64.
//!
//! Every unordered pair of participants `(a, b)`, `a < b`, shares a seed.
//! Both expand it into the same mask stream; `a` adds the stream to its
//! payload and `b` subtracts it, so all masks vanish from the modular sum
//! and the server learns only the aggregate.
//!
//! This simulates the structure of a secure-sum round. Seeds come from a
//! trusted in-process setup; there is no key agreement and no dropout
//! recovery.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::client_stats::{ClientStatistics, StatsError};
use crate::numcore::SymmetricMatrix;

pub const DEFAULT_FRACTIONAL_BITS: u32 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SecureAggError {
    #[error("value {value:e} does not fit fixed point with {fractional_bits} fractional bits")]
    Overflow { value: f64, fractional_bits: u32 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("fractional bits must lie in 1..=51, got {0}")]
    InvalidCodec(u32),

    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Signed fixed point embedded in `u64` by two's complement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCodec {
    fractional_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec {
            fractional_bits: DEFAULT_FRACTIONAL_BITS,
        }
    }
}

impl FixedPointCodec {
    pub fn new(fractional_bits: u32) -> Result<Self, SecureAggError> {
        if fractional_bits == 0 || fractional_bits >= 52 {
            return Err(SecureAggError::InvalidCodec(fractional_bits));
        }
        Ok(FixedPointCodec { fractional_bits })
    }

    pub fn fractional_bits(&self) -> u32 {
        self.fractional_bits
    }

    fn scale(&self) -> f64 {
        (1u64 << self.fractional_bits) as f64
    }

    /// Largest magnitude accepted by [`encode`](Self::encode): `2^(63 - f)`.
    pub fn limit(&self) -> f64 {
        (1u64 << (63 - self.fractional_bits)) as f64
    }

    pub fn encode(&self, x: f64) -> Result<u64, SecureAggError> {
        if !x.is_finite() || x.abs() >= self.limit() {
            return Err(SecureAggError::Overflow {
                value: x,
                fractional_bits: self.fractional_bits,
            });
        }
        Ok((x * self.scale()).round() as i64 as u64)
    }

    pub fn decode(&self, word: u64) -> f64 {
        word as i64 as f64 / self.scale()
    }
}

fn encode_count(count: u64) -> Result<u64, SecureAggError> {
    if count >= 1 << 63 {
        return Err(SecureAggError::Overflow {
            value: count as f64,
            fractional_bits: 0,
        });
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecureScope {
    /// Only per-class counts are masked; sums and the second moment are
    /// uploaded in the clear.
    #[default]
    CountsOnly,
    /// Counts, class sums and the second moment are all masked.
    FullStatistics,
}

/// Masked payload word count: `C` counts, then for full scope `C*d` class
/// sums and the `d*(d+1)/2` upper triangle of the second moment.
pub fn payload_len(dim: usize, num_classes: usize, scope: SecureScope) -> usize {
    match scope {
        SecureScope::CountsOnly => num_classes,
        SecureScope::FullStatistics => num_classes + num_classes * dim + dim * (dim + 1) / 2,
    }
}

#[derive(Debug, Clone)]
pub struct SecureSession {
    participants: BTreeSet<usize>,
    pair_seeds: BTreeMap<(usize, usize), u64>,
    scope: SecureScope,
    codec: FixedPointCodec,
}

impl SecureSession {
    /// Draws one seed per unordered participant pair from `setup_seed`.
    pub fn trusted_setup(
        participants: &[usize],
        scope: SecureScope,
        codec: FixedPointCodec,
        setup_seed: u64,
    ) -> Result<Self, SecureAggError> {
        let set: BTreeSet<usize> = participants.iter().copied().collect();
        if set.len() != participants.len() {
            return Err(SecureAggError::Protocol("duplicate participant id".into()));
        }
        if set.is_empty() {
            return Err(SecureAggError::Protocol(
                "session has no participants".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(setup_seed);
        let ids: Vec<usize> = set.iter().copied().collect();
        let mut pair_seeds = BTreeMap::new();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                pair_seeds.insert((a, b), rng.next_u64());
            }
        }
        Ok(SecureSession {
            participants: set,
            pair_seeds,
            scope,
            codec,
        })
    }

    pub fn participants(&self) -> impl Iterator<Item = usize> + '_ {
        self.participants.iter().copied()
    }

    pub fn scope(&self) -> SecureScope {
        self.scope
    }

    pub fn codec(&self) -> FixedPointCodec {
        self.codec
    }

    pub fn pair_seed(&self, a: usize, b: usize) -> Option<u64> {
        let key = if a < b { (a, b) } else { (b, a) };
        self.pair_seeds.get(&key).copied()
    }

    pub fn pair_count(&self) -> usize {
        self.pair_seeds.len()
    }
}

/// Mask stream for a pair seed. Both members call this with the same seed.
pub fn mask_stream(pair_seed: u64, len: usize) -> Vec<u64> {
    let mut rng = ChaCha20Rng::seed_from_u64(pair_seed);
    (0..len).map(|_| rng.next_u64()).collect()
}

/// The portion of a counts-only upload that travels unmasked.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaintextPart {
    pub class_sums: Vec<f64>,
    pub second_moment: SymmetricMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedUpload {
    pub client_id: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub payload: Vec<u64>,
    /// Present only under [`SecureScope::CountsOnly`].
    pub plaintext: Option<PlaintextPart>,
}

/// Fixed-point image of the statistics in `scope`, before masking.
pub fn plain_encoding(
    stats: &ClientStatistics,
    scope: SecureScope,
    codec: FixedPointCodec,
) -> Result<Vec<u64>, SecureAggError> {
    let mut out = Vec::with_capacity(payload_len(stats.dim(), stats.num_classes(), scope));
    for &c in stats.class_counts() {
        out.push(encode_count(c)?);
    }
    if scope == SecureScope::FullStatistics {
        for &x in stats.class_sums() {
            out.push(codec.encode(x)?);
        }
        for x in stats.second_moment().upper_triangle() {
            out.push(codec.encode(x)?);
        }
    }
    Ok(out)
}

pub fn encode_masked(
    stats: &ClientStatistics,
    session: &SecureSession,
    client_id: usize,
) -> Result<MaskedUpload, SecureAggError> {
    if !session.participants.contains(&client_id) {
        return Err(SecureAggError::Protocol(format!(
            "client {client_id} is not a session participant"
        )));
    }
    let mut payload = plain_encoding(stats, session.scope, session.codec)?;
    for peer in session.participants() {
        if peer == client_id {
            continue;
        }
        let seed = session
            .pair_seed(client_id, peer)
            .expect("seed for every pair");
        let mask = mask_stream(seed, payload.len());
        if peer > client_id {
            for (p, m) in payload.iter_mut().zip(&mask) {
                *p = p.wrapping_add(*m);
            }
        } else {
            for (p, m) in payload.iter_mut().zip(&mask) {
                *p = p.wrapping_sub(*m);
            }
        }
    }
    let plaintext = match session.scope {
        SecureScope::CountsOnly => Some(PlaintextPart {
            class_sums: stats.class_sums().to_vec(),
            second_moment: stats.second_moment().clone(),
        }),
        SecureScope::FullStatistics => None,
    };
    Ok(MaskedUpload {
        client_id,
        dim: stats.dim(),
        num_classes: stats.num_classes(),
        payload,
        plaintext,
    })
}

/// Sums the uploads of every participant and decodes the aggregate.
///
/// Uploads are folded in ascending client id regardless of input order.
pub fn aggregate_masked(
    uploads: &[MaskedUpload],
    session: &SecureSession,
) -> Result<ClientStatistics, SecureAggError> {
    let mut by_id: BTreeMap<usize, &MaskedUpload> = BTreeMap::new();
    for u in uploads {
        if !session.participants.contains(&u.client_id) {
            return Err(SecureAggError::Protocol(format!(
                "upload from non-participant {}",
                u.client_id
            )));
        }
        if by_id.insert(u.client_id, u).is_some() {
            return Err(SecureAggError::Protocol(format!(
                "duplicate upload from client {}",
                u.client_id
            )));
        }
    }
    if let Some(missing) = session.participants().find(|id| !by_id.contains_key(id)) {
        return Err(SecureAggError::Protocol(format!(
            "missing upload from client {missing}"
        )));
    }

    let first = by_id.values().next().expect("session is non-empty");
    let (dim, num_classes) = (first.dim, first.num_classes);
    let expected_len = payload_len(dim, num_classes, session.scope);
    let mut sum = vec![0u64; expected_len];
    let mut plain_sums = vec![0.0; dim * num_classes];
    let mut plain_moment = SymmetricMatrix::zeros(dim);
    for u in by_id.values() {
        if u.dim != dim || u.num_classes != num_classes || u.payload.len() != expected_len {
            return Err(SecureAggError::Protocol(format!(
                "upload from client {} has a mismatched shape",
                u.client_id
            )));
        }
        for (s, p) in sum.iter_mut().zip(&u.payload) {
            *s = s.wrapping_add(*p);
        }
        match (session.scope, &u.plaintext) {
            (SecureScope::CountsOnly, Some(plain)) => {
                if plain.class_sums.len() != plain_sums.len() {
                    return Err(SecureAggError::Protocol("plaintext shape mismatch".into()));
                }
                for (a, b) in plain_sums.iter_mut().zip(&plain.class_sums) {
                    *a += b;
                }
                plain_moment
                    .add_assign(&plain.second_moment)
                    .map_err(|e| SecureAggError::Stats(e.into()))?;
            }
            (SecureScope::CountsOnly, None) => {
                return Err(SecureAggError::Protocol(format!(
                    "client {} sent no plaintext statistics",
                    u.client_id
                )));
            }
            (SecureScope::FullStatistics, _) => {}
        }
    }

    let counts = sum[..num_classes].to_vec();
    let (class_sums, second_moment) = match session.scope {
        SecureScope::CountsOnly => (plain_sums, plain_moment),
        SecureScope::FullStatistics => {
            let codec = session.codec;
            let sums_end = num_classes + num_classes * dim;
            let class_sums = sum[num_classes..sums_end]
                .iter()
                .map(|&w| codec.decode(w))
                .collect();
            let packed: Vec<f64> = sum[sums_end..].iter().map(|&w| codec.decode(w)).collect();
            let moment = SymmetricMatrix::from_upper_triangle(dim, &packed)
                .map_err(|e| SecureAggError::Stats(e.into()))?;
            (class_sums, moment)
        }
    };
    Ok(ClientStatistics::from_parts(
        class_sums,
        second_moment,
        counts,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client_stats::{compute_client_stats, merge_all};
    use crate::dataio::{generate_synthetic, LabeledFeatureSet, SyntheticSpec};

    fn counts_only(counts: Vec<u64>, dim: usize) -> ClientStatistics {
        let c = counts.len();
        ClientStatistics::from_parts(vec![0.0; c * dim], SymmetricMatrix::zeros(dim), counts)
            .unwrap()
    }

    fn random_stats(seed: u64) -> ClientStatistics {
        let data = generate_synthetic(&SyntheticSpec {
            num_classes: 3,
            dim: 4,
            samples_per_class: 20,
            class_mean_scale: 2.0,
            shared_covariance_scale: 1.0,
            seed,
        })
        .unwrap();
        compute_client_stats(&data)
    }

    #[test]
    fn codec_bounds() {
        assert!(FixedPointCodec::new(0).is_err());
        assert!(FixedPointCodec::new(52).is_err());
        let codec = FixedPointCodec::default();
        assert_eq!(codec.decode(codec.encode(-1.5).unwrap()), -1.5);
        assert!(matches!(
            codec.encode(2f64.powi(39)),
            Err(SecureAggError::Overflow { .. })
        ));
        assert!(codec.encode(2f64.powi(39) - 1.0).is_ok());
        assert!(codec.encode(f64::NAN).is_err());
    }

    #[test]
    fn single_participant_sends_plain_encoding() {
        let stats = random_stats(1);
        for scope in [SecureScope::CountsOnly, SecureScope::FullStatistics] {
            let session =
                SecureSession::trusted_setup(&[4], scope, FixedPointCodec::default(), 0).unwrap();
            assert_eq!(session.pair_count(), 0);
            let up = encode_masked(&stats, &session, 4).unwrap();
            assert_eq!(
                up.payload,
                plain_encoding(&stats, scope, session.codec()).unwrap()
            );
        }
    }

    #[test]
    fn zero_stats_payloads_are_negations() {
        let session = SecureSession::trusted_setup(
            &[0, 1],
            SecureScope::FullStatistics,
            FixedPointCodec::default(),
            77,
        )
        .unwrap();
        let zero = ClientStatistics::zeros(3, 2);
        let a = encode_masked(&zero, &session, 0).unwrap();
        let b = encode_masked(&zero, &session, 1).unwrap();
        for (x, y) in a.payload.iter().zip(&b.payload) {
            assert_eq!(*x, y.wrapping_neg());
        }
    }

    #[test]
    fn counts_aggregate_exactly() {
        let session = SecureSession::trusted_setup(
            &[0, 1],
            SecureScope::CountsOnly,
            FixedPointCodec::default(),
            5,
        )
        .unwrap();
        let a = encode_masked(&counts_only(vec![3, 1], 2), &session, 0).unwrap();
        let b = encode_masked(&counts_only(vec![0, 2], 2), &session, 1).unwrap();
        let agg = aggregate_masked(&[b, a], &session).unwrap();
        assert_eq!(agg.class_counts(), &[3, 3]);
    }

    #[test]
    fn masks_hide_every_entry() {
        let ids: Vec<usize> = (0..5).collect();
        let session = SecureSession::trusted_setup(
            &ids,
            SecureScope::FullStatistics,
            FixedPointCodec::default(),
            2024,
        )
        .unwrap();
        for id in ids {
            let stats = random_stats(id as u64 + 10);
            let up = encode_masked(&stats, &session, id).unwrap();
            let plain = plain_encoding(&stats, session.scope(), session.codec()).unwrap();
            assert!(up.payload.iter().zip(&plain).all(|(m, p)| m != p));
        }
    }

    #[test]
    fn full_scope_within_quantization_bound() {
        let m = 10;
        let ids: Vec<usize> = (0..m).collect();
        let session = SecureSession::trusted_setup(
            &ids,
            SecureScope::FullStatistics,
            FixedPointCodec::default(),
            9,
        )
        .unwrap();
        let stats: Vec<_> = ids.iter().map(|&i| random_stats(100 + i as u64)).collect();
        let uploads: Vec<_> = ids
            .iter()
            .map(|&i| encode_masked(&stats[i], &session, i).unwrap())
            .collect();
        let secure = aggregate_masked(&uploads, &session).unwrap();
        let plain = merge_all(4, 3, &stats).unwrap();
        let bound = m as f64 * 2f64.powi(-24);
        assert_eq!(secure.class_counts(), plain.class_counts());
        for (a, b) in secure.class_sums().iter().zip(plain.class_sums()) {
            assert!((a - b).abs() <= bound);
        }
        for (a, b) in secure
            .second_moment()
            .as_slice()
            .iter()
            .zip(plain.second_moment().as_slice())
        {
            assert!((a - b).abs() <= bound);
        }
    }

    #[test]
    fn protocol_errors() {
        let session = SecureSession::trusted_setup(
            &[0, 1, 2],
            SecureScope::CountsOnly,
            FixedPointCodec::default(),
            1,
        )
        .unwrap();
        let s = random_stats(3);
        assert!(matches!(
            encode_masked(&s, &session, 9),
            Err(SecureAggError::Protocol(_))
        ));
        let a = encode_masked(&s, &session, 0).unwrap();
        let b = encode_masked(&s, &session, 1).unwrap();
        assert!(matches!(
            aggregate_masked(&[a.clone(), b.clone()], &session),
            Err(SecureAggError::Protocol(_))
        ));
        assert!(matches!(
            aggregate_masked(&[a.clone(), a.clone(), b], &session),
            Err(SecureAggError::Protocol(_))
        ));
        assert!(SecureSession::trusted_setup(
            &[1, 1],
            SecureScope::CountsOnly,
            FixedPointCodec::default(),
            0
        )
        .is_err());
    }

    #[test]
    fn overflow_detected_at_encode() {
        let data = LabeledFeatureSet::new(vec![3.0e6, 0.0], vec![0], 1, 2).unwrap();
        let stats = compute_client_stats(&data);
        let session = SecureSession::trusted_setup(
            &[0],
            SecureScope::FullStatistics,
            FixedPointCodec::default(),
            0,
        )
        .unwrap();
        // second moment entry 9e12 exceeds 2^39
        assert!(matches!(
            encode_masked(&stats, &session, 0),
            Err(SecureAggError::Overflow { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn masks_cancel_exactly(setup_seed in any::<u64>(), m in 1usize..8, full in any::<bool>()) {
                let scope = if full { SecureScope::FullStatistics } else { SecureScope::CountsOnly };
                let ids: Vec<usize> = (0..m).map(|i| i * 3 + 1).collect();
                let session = SecureSession::trusted_setup(&ids, scope, FixedPointCodec::default(), setup_seed).unwrap();
                let mut masked_sum = vec![0u64; payload_len(4, 3, scope)];
                let mut plain_sum = masked_sum.clone();
                for (k, &id) in ids.iter().enumerate() {
                    let stats = random_stats(setup_seed.wrapping_add(k as u64));
                    let up = encode_masked(&stats, &session, id).unwrap();
                    let plain = plain_encoding(&stats, scope, session.codec()).unwrap();
                    for i in 0..masked_sum.len() {
                        masked_sum[i] = masked_sum[i].wrapping_add(up.payload[i]);
                        plain_sum[i] = plain_sum[i].wrapping_add(plain[i]);
                    }
                }
                prop_assert_eq!(masked_sum, plain_sum);
            }

            #[test]
            fn pair_streams_are_symmetric(seed in any::<u64>()) {
                let session = SecureSession::trusted_setup(&[2, 5, 9], SecureScope::CountsOnly, FixedPointCodec::default(), seed).unwrap();
                prop_assert_eq!(session.pair_seed(2, 9), session.pair_seed(9, 2));
                let s = session.pair_seed(5, 9).unwrap();
                prop_assert_eq!(mask_stream(s, 16), mask_stream(s, 16));
            }
        }
    }
}
