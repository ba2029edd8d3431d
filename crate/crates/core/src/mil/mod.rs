//! Multi-instance learning over bags of instance features.
//!
//! Each text query is a bag and each of its images an instance. A linear
//! scorer maps every instance to per-class logits `h[i][j]`; the bag logit
//! `h~[i]` aggregates over instances (max, mean or `log(1 + sum exp)`), and
//! the bag is classified by a softmax over `h~` with cross-entropy loss.
//! Gradients are derived by hand: `dL/dh~[i] = rho[i] - t[i]`, routed to the
//! instances by the aggregator's partial derivatives.

mod train;

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use train::{train, MilConfig, MilTraining};

use crate::math::{self, dot, softmax};

/// Floor applied to the true-class probability before taking its log.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, PartialEq)]
pub enum MilError {
    #[error("instance dimension {found} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bag {0:?} has no instances")]
    EmptyBag(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training data must cover at least two classes")]
    SingleClass,
    #[error("trace does not belong to this model and bag")]
    StaleTrace,
    #[error("{name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Max,
    Avg,
    Lse,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Max, Aggregator::Avg, Aggregator::Lse];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Max => "max",
            Aggregator::Avg => "avg",
            Aggregator::Lse => "lse",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Aggregator::Max),
            "avg" => Ok(Aggregator::Avg),
            "lse" => Ok(Aggregator::Lse),
            other => Err(format!("unknown aggregator {other:?} (expected max, avg or lse)")),
        }
    }
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A labeled group of instance features.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub instances: Vec<Vec<f64>>,
    pub label: usize,
}

impl Bag {
    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        (0..classes).map(|i| if i == self.label { 1.0 } else { 0.0 }).collect()
    }
}

/// Linear instance scorer plus a fixed aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilModel {
    class_names: Vec<String>,
    dim: usize,
    aggregator: Aggregator,
    /// class_count x dim, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl MilModel {
    pub fn zeros(class_names: Vec<String>, dim: usize, aggregator: Aggregator) -> Self {
        let m = class_names.len();
        Self {
            class_names,
            dim,
            aggregator,
            weights: vec![0.0; m * dim],
            bias: vec![0.0; m],
        }
    }

    pub fn from_parts(
        class_names: Vec<String>,
        dim: usize,
        aggregator: Aggregator,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, MilError> {
        let m = class_names.len();
        if weights.len() != m * dim || bias.len() != m {
            return Err(MilError::DimensionMismatch {
                expected: m * dim,
                found: weights.len(),
            });
        }
        if !math::all_finite(&weights) || !math::all_finite(&bias) {
            return Err(MilError::OutOfRange {
                name: "parameters",
                value: f64::NAN,
            });
        }
        Ok(Self {
            class_names,
            dim,
            aggregator,
            weights,
            bias,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn aggregator(&self) -> Aggregator {
        self.aggregator
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    /// Per-class logits of one instance.
    pub fn instance_logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.class_count()).map(|i| dot(self.row(i), x) + self.bias[i]).collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), MilError> {
        if x.len() != self.dim {
            return Err(MilError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn fingerprint(&self, instances: &[Vec<f64>]) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.weights.iter().chain(&self.bias) {
            v.to_bits().hash(&mut h);
        }
        for x in instances {
            for v in x {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Applies one SGD step.
    pub fn apply_gradient(&mut self, grad: &MilGradient, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// class_count x instance_count, row-major: `logits[i * n + j] = h[i][j]`.
    pub logits: Vec<f64>,
    pub aggregated: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Per class, the first instance attaining the maximum logit.
    pub argmax_index: Vec<usize>,
    pub instance_count: usize,
    fingerprint: u64,
}

impl ForwardTrace {
    pub fn logit(&self, class: usize, instance: usize) -> f64 {
        self.logits[class * self.instance_count + instance]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `dL/dh`, same layout as [`ForwardTrace::logits`].
    pub logits: Vec<f64>,
}

/// `log(1 + sum_j exp(h_j))` with the running maximum factored out.
fn log_one_plus_sum_exp(row: &[f64]) -> f64 {
    let top = row.iter().copied().fold(0.0, f64::max);
    let sum: f64 = row.iter().map(|&h| (h - top).exp()).sum();
    top + ((-top).exp() + sum).ln()
}

pub fn forward_bag(model: &MilModel, bag: &Bag) -> Result<ForwardTrace, MilError> {
    if bag.instances.is_empty() {
        return Err(MilError::EmptyBag(bag.bag_id.clone()));
    }
    for x in &bag.instances {
        model.check_dim(x)?;
    }
    Ok(forward_unchecked(model, &bag.instances))
}

fn forward_unchecked(model: &MilModel, instances: &[Vec<f64>]) -> ForwardTrace {
    let m = model.class_count();
    let n = instances.len();
    let mut logits = vec![0.0; m * n];
    for (j, x) in instances.iter().enumerate() {
        for (i, h) in model.instance_logits(x).into_iter().enumerate() {
            logits[i * n + j] = h;
        }
    }
    let mut aggregated = Vec::with_capacity(m);
    let mut argmax_index = Vec::with_capacity(m);
    for i in 0..m {
        let row = &logits[i * n..(i + 1) * n];
        let best = math::argmax(row);
        argmax_index.push(best);
        aggregated.push(match model.aggregator {
            Aggregator::Max => row[best],
            Aggregator::Avg => math::mean(row),
            Aggregator::Lse => log_one_plus_sum_exp(row),
        });
    }
    let probabilities = softmax(&aggregated);
    ForwardTrace {
        logits,
        aggregated,
        probabilities,
        argmax_index,
        instance_count: n,
        fingerprint: model.fingerprint(instances),
    }
}

/// `-log rho[label]`.
pub fn bag_loss(trace: &ForwardTrace, label: usize) -> Result<f64, MilError> {
    let classes = trace.probabilities.len();
    let p = *trace
        .probabilities
        .get(label)
        .ok_or(MilError::LabelOutOfRange { label, classes })?;
    if p < PROBABILITY_FLOOR {
        log::warn!("true-class probability {p:e} clamped to {PROBABILITY_FLOOR:e}");
    }
    Ok(-p.max(PROBABILITY_FLOOR).ln())
}

/// Gradients of the bag loss with respect to the scorer parameters and to
/// the instance logits. Errors if `trace` was not produced by this model on
/// this bag.
pub fn backward_bag(model: &MilModel, trace: &ForwardTrace, bag: &Bag) -> Result<MilGradient, MilError> {
    if bag.label >= model.class_count() {
        return Err(MilError::LabelOutOfRange {
            label: bag.label,
            classes: model.class_count(),
        });
    }
    if trace.instance_count != bag.instances.len() || trace.fingerprint != model.fingerprint(&bag.instances) {
        return Err(MilError::StaleTrace);
    }
    Ok(backward_unchecked(model, trace, &bag.instances, bag.label))
}

fn backward_unchecked(model: &MilModel, trace: &ForwardTrace, instances: &[Vec<f64>], label: usize) -> MilGradient {
    let m = model.class_count();
    let n = instances.len();
    let mut d_logits = vec![0.0; m * n];
    for i in 0..m {
        let upstream = trace.probabilities[i] - if i == label { 1.0 } else { 0.0 };
        let row = &trace.logits[i * n..(i + 1) * n];
        let out = &mut d_logits[i * n..(i + 1) * n];
        match model.aggregator {
            Aggregator::Max => out[trace.argmax_index[i]] = upstream,
            Aggregator::Avg => out.iter_mut().for_each(|g| *g = upstream / n as f64),
            Aggregator::Lse => {
                let top = row.iter().copied().fold(0.0, f64::max);
                let denom = (-top).exp() + row.iter().map(|&h| (h - top).exp()).sum::<f64>();
                for (g, &h) in out.iter_mut().zip(row) {
                    *g = upstream * (h - top).exp() / denom;
                }
            }
        }
    }
    let dim = model.dim;
    let mut weights = vec![0.0; m * dim];
    let mut bias = vec![0.0; m];
    for i in 0..m {
        for (j, x) in instances.iter().enumerate() {
            let g = d_logits[i * n + j];
            if g == 0.0 {
                continue;
            }
            bias[i] += g;
            for (w, &xv) in weights[i * dim..(i + 1) * dim].iter_mut().zip(x) {
                *w += g * xv;
            }
        }
    }
    MilGradient {
        weights,
        bias,
        logits: d_logits,
    }
}

/// Softmax of each instance's own logits (a singleton bag per instance).
pub fn score_instances<P: AsRef<[f64]>>(model: &MilModel, instances: &[P]) -> Result<Vec<Vec<f64>>, MilError> {
    instances
        .iter()
        .map(|x| {
            let x = x.as_ref();
            model.check_dim(x)?;
            Ok(softmax(&model.instance_logits(x)))
        })
        .collect()
}

/// Most probable class of a single instance; ties go to the lowest index.
pub fn classify(model: &MilModel, instance: &[f64]) -> Result<usize, MilError> {
    model.check_dim(instance)?;
    Ok(math::argmax(&model.instance_logits(instance)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSplit {
    pub kept: Vec<usize>,
    pub outliers: Vec<usize>,
    /// Class-`c` probability of every instance.
    pub probabilities: Vec<f64>,
}

/// Flags instances whose probability under `class` is below `threshold`.
pub fn remove_outliers<P: AsRef<[f64]>>(
    model: &MilModel,
    class: usize,
    instances: &[P],
    threshold: f64,
) -> Result<OutlierSplit, MilError> {
    if class >= model.class_count() {
        return Err(MilError::LabelOutOfRange {
            label: class,
            classes: model.class_count(),
        });
    }
    let probabilities: Vec<f64> = score_instances(model, instances)?.into_iter().map(|p| p[class]).collect();
    let (outliers, kept): (Vec<usize>, Vec<usize>) = (0..probabilities.len()).partition(|&j| probabilities[j] < threshold);
    Ok(OutlierSplit {
        kept,
        outliers,
        probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn names(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("q{i}")).collect()
    }

    fn random_model(m: usize, dim: usize, agg: Aggregator, seed: u64) -> MilModel {
        let mut rng = math::rng(seed);
        let w = (0..m * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        MilModel::from_parts(names(m), dim, agg, w, b).unwrap()
    }

    fn random_bag(n: usize, dim: usize, label: usize, seed: u64) -> Bag {
        let mut rng = math::rng(seed);
        Bag {
            bag_id: "b".into(),
            instances: (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            label,
        }
    }

    #[test]
    fn single_instance_max_is_the_column() {
        let model = random_model(3, 4, Aggregator::Max, 1);
        let bag = random_bag(1, 4, 0, 2);
        let t = forward_bag(&model, &bag).unwrap();
        assert_eq!(t.aggregated, model.instance_logits(&bag.instances[0]));
    }

    #[test]
    fn zero_logits_give_uniform() {
        let model = MilModel::zeros(names(4), 3, Aggregator::Avg);
        let t = forward_bag(&model, &random_bag(5, 3, 1, 3)).unwrap();
        for p in &t.probabilities {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let loss = bag_loss(&t, 1).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn lse_of_single_zero_logit_is_ln2() {
        let model = MilModel::zeros(names(2), 2, Aggregator::Lse);
        let t = forward_bag(&model, &random_bag(1, 2, 0, 4)).unwrap();
        assert!((t.aggregated[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lse_stays_finite_for_large_logits() {
        let model = MilModel::from_parts(names(2), 1, Aggregator::Lse, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let bag = Bag { bag_id: "x".into(), instances: vec![vec![1e4], vec![-1e4]], label: 0 };
        let t = forward_bag(&model, &bag).unwrap();
        assert!((t.aggregated[0] - 1e4).abs() < 1e-9);
        assert!((t.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_zero_when_rho_is_t() {
        let model = MilModel::from_parts(names(2), 1, Aggregator::Max, vec![1e4, -1e4], vec![0.0, 0.0]).unwrap();
        let bag = Bag { bag_id: "x".into(), instances: vec![vec![1.0]], label: 0 };
        let t = forward_bag(&model, &bag).unwrap();
        assert_eq!(bag_loss(&t, 0).unwrap(), 0.0);
        let g = backward_bag(&model, &t, &bag).unwrap();
        assert!(g.weights.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn loss_matches_naive_formula() {
        let model = random_model(4, 5, Aggregator::Avg, 5);
        let bag = random_bag(3, 5, 2, 6);
        let t = forward_bag(&model, &bag).unwrap();
        let z: f64 = t.aggregated.iter().map(|h| h.exp()).sum();
        let naive = -(t.aggregated[2].exp() / z).ln();
        assert!((bag_loss(&t, 2).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn underflowing_probability_is_clamped() {
        let model = MilModel::from_parts(names(2), 1, Aggregator::Max, vec![1e5, -1e5], vec![0.0, 0.0]).unwrap();
        let bag = Bag { bag_id: "x".into(), instances: vec![vec![1.0]], label: 1 };
        let t = forward_bag(&model, &bag).unwrap();
        assert_eq!(bag_loss(&t, 1).unwrap(), -PROBABILITY_FLOOR.ln());
    }

    #[test]
    fn max_routes_to_argmax_only() {
        let model = random_model(3, 4, Aggregator::Max, 7);
        let bag = random_bag(6, 4, 1, 8);
        let t = forward_bag(&model, &bag).unwrap();
        let g = backward_bag(&model, &t, &bag).unwrap();
        for i in 0..3 {
            for j in 0..6 {
                let v = g.logits[i * 6 + j];
                if j == t.argmax_index[i] {
                    assert_ne!(v, 0.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn max_tie_goes_to_first_instance() {
        let model = random_model(2, 2, Aggregator::Max, 9);
        let x = vec![0.3, -0.2];
        let bag = Bag { bag_id: "t".into(), instances: vec![x.clone(), x], label: 0 };
        let t = forward_bag(&model, &bag).unwrap();
        assert_eq!(t.argmax_index, vec![0, 0]);
        let g = backward_bag(&model, &t, &bag).unwrap();
        assert_eq!(g.logits[1], 0.0);
        assert_eq!(g.logits[3], 0.0);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut model = random_model(2, 3, Aggregator::Avg, 10);
        let bag = random_bag(3, 3, 0, 11);
        let t = forward_bag(&model, &bag).unwrap();
        let other = random_bag(3, 3, 0, 12);
        assert_eq!(backward_bag(&model, &t, &other), Err(MilError::StaleTrace));
        model.weights_mut()[0] += 1.0;
        assert_eq!(backward_bag(&model, &t, &bag), Err(MilError::StaleTrace));
    }

    #[test]
    fn forward_errors() {
        let model = MilModel::zeros(names(2), 3, Aggregator::Max);
        let empty = Bag { bag_id: "e".into(), instances: vec![], label: 0 };
        assert!(matches!(forward_bag(&model, &empty), Err(MilError::EmptyBag(_))));
        assert!(matches!(forward_bag(&model, &random_bag(2, 4, 0, 1)), Err(MilError::DimensionMismatch { .. })));
    }

    #[test]
    fn singleton_scores_match_forward() {
        let model = random_model(3, 4, Aggregator::Lse, 13);
        let bag = random_bag(4, 4, 0, 14);
        let scores = score_instances(&model, &bag.instances).unwrap();
        for (x, s) in bag.instances.iter().zip(&scores) {
            let single = Bag { bag_id: "s".into(), instances: vec![x.clone()], label: 0 };
            let max_model = MilModel::from_parts(
                names(3),
                4,
                Aggregator::Max,
                model.weights().to_vec(),
                model.bias().to_vec(),
            )
            .unwrap();
            let t = forward_bag(&max_model, &single).unwrap();
            for (a, b) in s.iter().zip(&t.probabilities) {
                assert!((a - b).abs() < 1e-15);
            }
            // recompute by hand
            let logits: Vec<f64> = (0..3)
                .map(|i| (0..4).map(|k| model.weights()[i * 4 + k] * x[k]).sum::<f64>() + model.bias()[i])
                .collect();
            let z: f64 = logits.iter().map(|h| h.exp()).sum();
            for i in 0..3 {
                assert!((s[i] - logits[i].exp() / z).abs() < 1e-12);
            }
        }
        let zero = MilModel::zeros(names(3), 4, Aggregator::Max);
        let s = score_instances(&zero, &bag.instances).unwrap();
        assert!(s.iter().flatten().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn classify_ties_and_consistency() {
        // antisymmetric two-class model: an instance on the boundary ties
        let model = MilModel::from_parts(names(2), 2, Aggregator::Max, vec![1.0, 0.0, -1.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(classify(&model, &[0.0, 3.0]).unwrap(), 0);
        assert_eq!(classify(&model, &[-1.0, 0.0]).unwrap(), 1);
        let m = random_model(4, 3, Aggregator::Avg, 15);
        let bag = random_bag(10, 3, 0, 16);
        let scores = score_instances(&m, &bag.instances).unwrap();
        for (x, s) in bag.instances.iter().zip(&scores) {
            assert_eq!(classify(&m, x).unwrap(), math::argmax(s));
        }
    }

    #[test]
    fn outlier_partition() {
        let model = random_model(3, 4, Aggregator::Max, 17);
        let bag = random_bag(20, 4, 0, 18);
        let none = remove_outliers(&model, 1, &bag.instances, 0.0).unwrap();
        assert!(none.outliers.is_empty());
        assert_eq!(none.kept.len(), 20);
        let split = remove_outliers(&model, 1, &bag.instances, 0.3).unwrap();
        let mut all: Vec<usize> = split.kept.iter().chain(&split.outliers).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        for &j in &split.outliers {
            assert!(split.probabilities[j] < 0.3);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let model = random_model(3, 5, Aggregator::Lse, 19);
        let text = serde_json::to_string(&model).unwrap();
        assert!(text.contains("\"lse\""));
        let back: MilModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn gradients_match_central_differences() {
        for agg in Aggregator::ALL {
            for case in 0..10u64 {
                let model = random_model(3, 4, agg, 100 + case);
                let bag = random_bag(4, 4, (case % 3) as usize, 200 + case);
                let t = forward_bag(&model, &bag).unwrap();
                let g = backward_bag(&model, &t, &bag).unwrap();
                let loss_at = |m: &MilModel| bag_loss(&forward_bag(m, &bag).unwrap(), bag.label).unwrap();
                let eps = 1e-5;
                for k in 0..model.weights().len() {
                    let (mut hi, mut lo) = (model.clone(), model.clone());
                    hi.weights_mut()[k] += eps;
                    lo.weights_mut()[k] -= eps;
                    let fd = (loss_at(&hi) - loss_at(&lo)) / (2.0 * eps);
                    assert!((fd - g.weights[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{agg} w{k}: {fd} vs {}", g.weights[k]);
                }
                for k in 0..3 {
                    let (mut hi, mut lo) = (model.clone(), model.clone());
                    hi.bias_mut()[k] += eps;
                    lo.bias_mut()[k] -= eps;
                    let fd = (loss_at(&hi) - loss_at(&lo)) / (2.0 * eps);
                    assert!((fd - g.bias[k]).abs() < 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }
}
