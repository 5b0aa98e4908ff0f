//! Personalized local training with a fixed global-prototype regularizer.
//!
//! A client fine-tunes a small model (two-layer feature extractor plus a
//! linear classifier) on its own data by minimizing
//!
//! ```text
//! L(theta) = CE(theta) + lambda * R(theta)
//! R(theta) = sum_j 1/N_j * sum_{x in D_j} || f(x; theta) - mu_j ||²
//! ```
//!
//! where `N_j` counts the client's class-`j` samples and `mu_j` are the
//! downloaded global prototypes, which never change during training.
//! Gradients are derived by hand; `tests/personalize_gradients.rs` checks
//! them against central differences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::LabeledFeatureSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersonalizeError {
    #[error("model expects {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("local dataset is empty")]
    EmptyData,
}

/// `x -> relu(x W1 + b1) W2 + b2 = f`, `f -> f W3 + b3 = logits`.
/// Weight matrices are row-major `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_dim: usize,
    hidden_dim: usize,
    feature_dim: usize,
    num_classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: Vec<f64>,
}

fn uniform_init(rng: &mut ChaCha20Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// `out += x W` for row vector `x` and row-major `W` with `out.len()` columns.
fn affine_into(out: &mut [f64], x: &[f64], w: &[f64]) {
    let cols = out.len();
    for (i, &xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xi * wij;
        }
    }
}

struct Activations {
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    feature: Vec<f64>,
    logits: Vec<f64>,
}

impl MlpModel {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        MlpModel {
            input_dim,
            hidden_dim,
            feature_dim,
            num_classes,
            w1: uniform_init(&mut rng, input_dim, input_dim * hidden_dim),
            b1: uniform_init(&mut rng, input_dim, hidden_dim),
            w2: uniform_init(&mut rng, hidden_dim, hidden_dim * feature_dim),
            b2: uniform_init(&mut rng, hidden_dim, feature_dim),
            w3: uniform_init(&mut rng, feature_dim, feature_dim * num_classes),
            b3: uniform_init(&mut rng, feature_dim, num_classes),
        }
    }

    fn zeros_like(&self) -> Self {
        MlpModel {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
            w3: vec![0.0; self.w3.len()],
            b3: vec![0.0; self.b3.len()],
            ..*self
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Parameter tensors in a fixed order: `W1, b1, W2, b2, W3, b3`.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn forward(&self, x: &[f64]) -> Activations {
        let mut pre_hidden = self.b1.clone();
        affine_into(&mut pre_hidden, x, &self.w1);
        let hidden: Vec<f64> = pre_hidden.iter().map(|&z| z.max(0.0)).collect();
        let mut feature = self.b2.clone();
        affine_into(&mut feature, &hidden, &self.w2);
        let mut logits = self.b3.clone();
        affine_into(&mut logits, &feature, &self.w3);
        Activations {
            pre_hidden,
            hidden,
            feature,
            logits,
        }
    }

    /// The local feature map `f(x; theta)`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).feature
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.forward(x).logits;
        let mut best = 0;
        for (j, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = j;
            }
        }
        best
    }

    fn check_data(&self, data: &LabeledFeatureSet) -> Result<(), PersonalizeError> {
        if data.dim() != self.input_dim || data.num_classes() != self.num_classes {
            return Err(PersonalizeError::DimensionMismatch {
                expected: format!("d={}, C={}", self.input_dim, self.num_classes),
                actual: format!("d={}, C={}", data.dim(), data.num_classes()),
            });
        }
        Ok(())
    }

    fn check_prototypes(&self, prototypes: &[Option<Vec<f64>>]) -> Result<(), PersonalizeError> {
        if prototypes.len() != self.num_classes {
            return Err(PersonalizeError::DimensionMismatch {
                expected: format!("{} prototypes", self.num_classes),
                actual: format!("{}", prototypes.len()),
            });
        }
        if let Some(p) = prototypes
            .iter()
            .flatten()
            .find(|p| p.len() != self.feature_dim)
        {
            return Err(PersonalizeError::DimensionMismatch {
                expected: format!("prototype dimension {}", self.feature_dim),
                actual: format!("{}", p.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonalizeConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig {
            lambda: 1.0,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 128,
            seed: 0,
            momentum: 0.5,
        }
    }
}

impl PersonalizeConfig {
    fn validate(&self) -> Result<(), PersonalizeError> {
        let bad = |msg: &str| Err(PersonalizeError::InvalidConfig(msg.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Value of the training objective on some set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Mean cross-entropy.
    pub cross_entropy: f64,
    /// `R` without the `lambda` factor.
    pub regularizer: f64,
    /// `cross_entropy + lambda * regularizer`.
    pub total: f64,
}

fn class_counts(labels: &[u32], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    counts
}

/// Objective and its gradient with respect to every parameter.
pub fn objective_and_gradient(
    model: &MlpModel,
    data: &LabeledFeatureSet,
    prototypes: &[Option<Vec<f64>>],
    lambda: f64,
) -> Result<(Objective, MlpModel), PersonalizeError> {
    model.check_data(data)?;
    model.check_prototypes(prototypes)?;
    if data.is_empty() {
        return Err(PersonalizeError::EmptyData);
    }
    let n = data.len() as f64;
    let counts = class_counts(data.labels(), model.num_classes);
    let (h, df, c) = (model.hidden_dim, model.feature_dim, model.num_classes);
    let mut grad = model.zeros_like();
    let mut ce = 0.0;
    let mut reg = 0.0;

    for (x, label) in data.samples() {
        let y = label as usize;
        let act = model.forward(x);

        let max = act.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = act.logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        ce += total.ln() + max - act.logits[y];

        // d(CE)/d(logits) for this sample, already divided by n
        let d_logits: Vec<f64> = exp
            .iter()
            .enumerate()
            .map(|(j, e)| (e / total - if j == y { 1.0 } else { 0.0 }) / n)
            .collect();

        let mut d_feature = vec![0.0; df];
        for k in 0..df {
            let row = &model.w3[k * c..(k + 1) * c];
            d_feature[k] = crate::numcore::dot(row, &d_logits);
            for (g, dl) in grad.w3[k * c..(k + 1) * c].iter_mut().zip(&d_logits) {
                *g += act.feature[k] * dl;
            }
        }
        for (g, dl) in grad.b3.iter_mut().zip(&d_logits) {
            *g += dl;
        }

        if let Some(mu) = &prototypes[y] {
            let weight = 1.0 / counts[y] as f64;
            for k in 0..df {
                let diff = act.feature[k] - mu[k];
                reg += weight * diff * diff;
                d_feature[k] += lambda * 2.0 * weight * diff;
            }
        }

        let mut d_pre_hidden = vec![0.0; h];
        for i in 0..h {
            let row = &model.w2[i * df..(i + 1) * df];
            if act.pre_hidden[i] > 0.0 {
                d_pre_hidden[i] = crate::numcore::dot(row, &d_feature);
            }
            for (g, d) in grad.w2[i * df..(i + 1) * df].iter_mut().zip(&d_feature) {
                *g += act.hidden[i] * d;
            }
        }
        for (g, d) in grad.b2.iter_mut().zip(&d_feature) {
            *g += d;
        }

        for (i, &xi) in x.iter().enumerate() {
            for (g, d) in grad.w1[i * h..(i + 1) * h].iter_mut().zip(&d_pre_hidden) {
                *g += xi * d;
            }
        }
        for (g, d) in grad.b1.iter_mut().zip(&d_pre_hidden) {
            *g += d;
        }
    }

    let cross_entropy = ce / n;
    Ok((
        Objective {
            cross_entropy,
            regularizer: reg,
            total: cross_entropy + lambda * reg,
        },
        grad,
    ))
}

pub fn objective(
    model: &MlpModel,
    data: &LabeledFeatureSet,
    prototypes: &[Option<Vec<f64>>],
    lambda: f64,
) -> Result<Objective, PersonalizeError> {
    objective_and_gradient(model, data, prototypes, lambda).map(|(o, _)| o)
}

/// The feature-alignment term `R` over the whole of `data`. Classes with no
/// local samples or no global prototype contribute nothing.
pub fn regularizer(
    model: &MlpModel,
    data: &LabeledFeatureSet,
    prototypes: &[Option<Vec<f64>>],
) -> Result<f64, PersonalizeError> {
    model.check_data(data)?;
    model.check_prototypes(prototypes)?;
    let counts = class_counts(data.labels(), model.num_classes);
    let mut r = 0.0;
    for (x, label) in data.samples() {
        let y = label as usize;
        if let Some(mu) = &prototypes[y] {
            let f = model.features(x);
            let sq: f64 = f.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            r += sq / counts[y] as f64;
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-data objective after each epoch.
    pub epoch_loss: Vec<f64>,
    pub epoch_regularizer: Vec<f64>,
    pub epoch_cross_entropy: Vec<f64>,
}

/// Mini-batch gradient descent with heavy-ball momentum
/// (`v <- m v + g`, `theta <- theta - lr v`). The shuffle order is drawn
/// from `cfg.seed`, so identical inputs give bit-identical results.
pub fn local_train(
    model: &MlpModel,
    data: &LabeledFeatureSet,
    prototypes: &[Option<Vec<f64>>],
    cfg: &PersonalizeConfig,
) -> Result<(MlpModel, TrainReport), PersonalizeError> {
    cfg.validate()?;
    model.check_data(data)?;
    model.check_prototypes(prototypes)?;
    if data.is_empty() {
        return Err(PersonalizeError::EmptyData);
    }
    let mut model = model.clone();
    let mut velocity = model.zeros_like();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let batch = data.subset(batch);
            let (_, grad) = objective_and_gradient(&model, &batch, prototypes, cfg.lambda)?;
            for ((p, v), g) in model
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors_mut())
                .zip(grad.tensors())
            {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
        }
        let obj = objective(&model, data, prototypes, cfg.lambda)?;
        if !obj.total.is_finite() || !model.is_finite() {
            return Err(PersonalizeError::TrainingDiverged { epoch });
        }
        report.epoch_loss.push(obj.total);
        report.epoch_regularizer.push(obj.regularizer);
        report.epoch_cross_entropy.push(obj.cross_entropy);
    }
    Ok((model, report))
}

pub fn accuracy(model: &MlpModel, data: &LabeledFeatureSet) -> Result<f64, PersonalizeError> {
    model.check_data(data)?;
    if data.is_empty() {
        return Err(PersonalizeError::EmptyData);
    }
    let correct = data
        .samples()
        .filter(|(x, y)| model.predict(x) == *y as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean over locally present classes (with a prototype) of
/// `|| mean_{x in D_j} f(x) - mu_j ||²`.
pub fn alignment_distance(
    model: &MlpModel,
    data: &LabeledFeatureSet,
    prototypes: &[Option<Vec<f64>>],
) -> Result<f64, PersonalizeError> {
    model.check_data(data)?;
    model.check_prototypes(prototypes)?;
    let df = model.feature_dim;
    let mut sums = vec![vec![0.0; df]; model.num_classes];
    let counts = class_counts(data.labels(), model.num_classes);
    for (x, y) in data.samples() {
        for (s, f) in sums[y as usize].iter_mut().zip(model.features(x)) {
            *s += f;
        }
    }
    let mut total = 0.0;
    let mut classes = 0;
    for j in 0..model.num_classes {
        let Some(mu) = &prototypes[j] else { continue };
        if counts[j] == 0 {
            continue;
        }
        total += sums[j]
            .iter()
            .zip(mu)
            .map(|(s, m)| {
                let diff = s / counts[j] as f64 - m;
                diff * diff
            })
            .sum::<f64>();
        classes += 1;
    }
    if classes == 0 {
        return Err(PersonalizeError::EmptyData);
    }
    Ok(total / classes as f64)
}

/// Draws a skewed client split: a `dominant_fraction` share of both the
/// train and test sets comes from `dominant_classes`, the rest from the
/// other classes. Train and test are disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewedSplit {
    pub dominant_classes: Vec<u32>,
    pub dominant_fraction: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

pub fn skewed_split(
    data: &LabeledFeatureSet,
    split: &SkewedSplit,
) -> Result<(LabeledFeatureSet, LabeledFeatureSet), PersonalizeError> {
    if !(0.0..=1.0).contains(&split.dominant_fraction) {
        return Err(PersonalizeError::InvalidConfig(
            "dominant fraction must lie in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(split.seed);
    let (mut dominant, mut rest): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| split.dominant_classes.contains(&data.labels()[i]));
    dominant.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    let take = |size: usize, dom: &mut Vec<usize>, rest: &mut Vec<usize>| {
        let n_dom = (size as f64 * split.dominant_fraction).round() as usize;
        let n_rest = size - n_dom;
        if n_dom > dom.len() || n_rest > rest.len() {
            return Err(PersonalizeError::InvalidConfig(
                "not enough samples for the requested split".into(),
            ));
        }
        let mut idx: Vec<usize> = dom.drain(..n_dom).collect();
        idx.extend(rest.drain(..n_rest));
        idx.sort_unstable();
        Ok(data.subset(&idx))
    };
    let train = take(split.train_size, &mut dominant, &mut rest)?;
    let test = take(split.test_size, &mut dominant, &mut rest)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protos(c: usize, d: usize) -> Vec<Option<Vec<f64>>> {
        (0..c).map(|j| Some(vec![j as f64; d])).collect()
    }

    #[test]
    fn perfectly_aligned_model_has_zero_regularizer() {
        // hidden layer passes x through, features equal hidden, so f(x) = x
        let mut model = MlpModel::new(2, 2, 2, 2, 0);
        let [w1, b1, w2, b2, _, _] = model.tensors_mut();
        w1.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        b1.fill(0.0);
        w2.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        b2.fill(0.0);
        let prototypes = vec![Some(vec![1.0, 2.0]), Some(vec![3.0, 0.5])];
        let data = LabeledFeatureSet::new(vec![1.0, 2.0, 3.0, 0.5, 1.0, 2.0], vec![0, 1, 0], 2, 2)
            .unwrap();
        assert_eq!(regularizer(&model, &data, &prototypes).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_regularizer() {
        let mut model = MlpModel::new(1, 1, 2, 1, 0);
        let [w1, b1, w2, b2, _, _] = model.tensors_mut();
        w1[0] = 1.0;
        b1[0] = 0.0;
        w2.copy_from_slice(&[1.0, 0.0]);
        b2.fill(0.0);
        let data = LabeledFeatureSet::new(vec![1.0], vec![0], 1, 1).unwrap();
        let r = regularizer(&model, &data, &[Some(vec![0.0, 0.0])]).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn regularizer_skips_absent_classes_and_normalizes_per_class() {
        let model = MlpModel::new(3, 4, 2, 3, 1);
        let data = LabeledFeatureSet::new(
            vec![0.1, 0.2, 0.3, -0.5, 0.0, 1.0, 0.7, 0.7, 0.7],
            vec![0, 0, 2],
            3,
            3,
        )
        .unwrap();
        let prototypes = vec![Some(vec![0.0, 0.0]), Some(vec![5.0, 5.0]), None];
        let r = regularizer(&model, &data, &prototypes).unwrap();
        let sq = |x: &[f64]| model.features(x).iter().map(|v| v * v).sum::<f64>();
        let expected = (sq(data.row(0)) + sq(data.row(1))) / 2.0;
        assert!((r - expected).abs() < 1e-15);
    }

    #[test]
    fn prototype_dimension_mismatch() {
        let model = MlpModel::new(2, 3, 2, 2, 0);
        let data = LabeledFeatureSet::new(vec![0.0, 0.0], vec![0], 2, 2).unwrap();
        assert!(matches!(
            regularizer(&model, &data, &protos(2, 3)),
            Err(PersonalizeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let model = MlpModel::new(2, 3, 2, 2, 4);
        let data = LabeledFeatureSet::new(vec![0.5, -0.5, 1.0, 1.0], vec![0, 1], 2, 2).unwrap();
        let cfg = PersonalizeConfig {
            epochs: 0,
            ..Default::default()
        };
        let (trained, report) = local_train(&model, &data, &protos(2, 2), &cfg).unwrap();
        assert_eq!(trained, model);
        assert!(report.epoch_loss.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let model = MlpModel::new(2, 8, 2, 2, 4);
        let data = LabeledFeatureSet::new(vec![50.0, -50.0, 80.0, 80.0], vec![0, 1], 2, 2).unwrap();
        let cfg = PersonalizeConfig {
            learning_rate: 1e6,
            epochs: 50,
            batch_size: 2,
            ..Default::default()
        };
        assert!(matches!(
            local_train(&model, &data, &protos(2, 2), &cfg),
            Err(PersonalizeError::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        let model = MlpModel::new(1, 1, 1, 1, 0);
        let data = LabeledFeatureSet::new(vec![0.0], vec![0], 1, 1).unwrap();
        for cfg in [
            PersonalizeConfig {
                momentum: 1.0,
                ..Default::default()
            },
            PersonalizeConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            PersonalizeConfig {
                batch_size: 0,
                ..Default::default()
            },
            PersonalizeConfig {
                lambda: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                local_train(&model, &data, &protos(1, 1), &cfg),
                Err(PersonalizeError::InvalidConfig(_))
            ));
        }
        let empty = LabeledFeatureSet::empty(1, 1);
        assert_eq!(
            local_train(&model, &empty, &protos(1, 1), &PersonalizeConfig::default()),
            Err(PersonalizeError::EmptyData)
        );
    }

    #[test]
    fn skewed_split_respects_fraction() {
        let labels: Vec<u32> = (0..200).map(|i| (i % 4) as u32).collect();
        let data = LabeledFeatureSet::new(vec![0.0; 200], labels, 4, 1).unwrap();
        let split = SkewedSplit {
            dominant_classes: vec![1],
            dominant_fraction: 0.8,
            train_size: 40,
            test_size: 10,
            seed: 3,
        };
        let (train, test) = skewed_split(&data, &split).unwrap();
        assert_eq!(train.class_histogram()[1], 32);
        assert_eq!(test.class_histogram()[1], 8);
        assert_eq!(train.len(), 40);
    }
}
