//! L2-regularized logistic regression used as the pairwise query scorer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DedupError;
use crate::math::{self, dot, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerHyper {
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ScorerHyper {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            lr: 0.05,
            epochs: 60,
            seed: 0,
        }
    }
}

/// `score(x) = sigmoid(w.x + b)`, the probability that `x` belongs to the
/// first query of `trained_on`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub trained_on: (String, String),
}

impl LinearScorer {
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, x) + self.bias)
    }

    /// The scorer for the opposite class: `1 - score(x)`.
    pub fn negated(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| -w).collect(),
            bias: -self.bias,
            trained_on: (self.trained_on.1.clone(), self.trained_on.0.clone()),
        }
    }

    pub fn with_pair(mut self, positive: impl Into<String>, negative: impl Into<String>) -> Self {
        self.trained_on = (positive.into(), negative.into());
        self
    }
}

fn check_dims<P: AsRef<[f64]>>(dim: usize, rows: &[P]) -> Result<(), DedupError> {
    for r in rows {
        if r.as_ref().len() != dim {
            return Err(DedupError::DimensionMismatch {
                expected: dim,
                found: r.as_ref().len(),
            });
        }
    }
    Ok(())
}

/// True when every vector in both classes is identical, so no boundary exists.
pub fn inputs_degenerate<P: AsRef<[f64]>, N: AsRef<[f64]>>(pos: &[P], neg: &[N]) -> bool {
    let Some(first) = pos.first().map(AsRef::as_ref) else {
        return true;
    };
    pos.iter().all(|p| p.as_ref() == first) && neg.iter().all(|n| n.as_ref() == first)
}

/// Fits the scorer by per-sample SGD over a seeded shuffle. The step size
/// decays as `lr / sqrt(1 + epoch)`.
pub fn train_binary_scorer<P, N>(pos: &[P], neg: &[N], hyper: &ScorerHyper) -> Result<LinearScorer, DedupError>
where
    P: AsRef<[f64]>,
    N: AsRef<[f64]>,
{
    if pos.is_empty() || neg.is_empty() {
        return Err(DedupError::EmptyClass);
    }
    let dim = pos[0].as_ref().len();
    check_dims(dim, pos)?;
    check_dims(dim, neg)?;
    if inputs_degenerate(pos, neg) {
        log::warn!("scorer inputs are identical across classes; no separating direction exists");
    }

    let samples: Vec<(&[f64], f64)> = pos
        .iter()
        .map(|p| (p.as_ref(), 1.0))
        .chain(neg.iter().map(|n| (n.as_ref(), 0.0)))
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = math::rng(hyper.seed);
    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;

    for epoch in 0..hyper.epochs {
        let step = hyper.lr / ((1 + epoch) as f64).sqrt();
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = samples[i];
            let err = sigmoid(dot(&weights, x) + bias) - y;
            for (w, &xv) in weights.iter_mut().zip(x) {
                *w -= step * (err * xv + hyper.l2 * *w);
            }
            bias -= step * err;
        }
    }

    Ok(LinearScorer {
        weights,
        bias,
        trained_on: (String::new(), String::new()),
    })
}

/// Mean score over a validation set.
pub fn mean_confidence<P: AsRef<[f64]>>(scorer: &LinearScorer, validation: &[P]) -> Result<f64, DedupError> {
    if validation.is_empty() {
        return Err(DedupError::EmptyValidation);
    }
    check_dims(scorer.weights.len(), validation)?;
    let total: f64 = validation.iter().map(|v| scorer.score(v.as_ref())).sum();
    Ok(total / validation.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blob(center: [f64; 2], sigma: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = math::rng(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|_| vec![center[0] + noise.sample(&mut rng), center[1] + noise.sample(&mut rng)])
            .collect()
    }

    #[test]
    fn separable_blobs_validate_well() {
        // centers 4 apart with sigma 1: margin of 2 sigma on each side
        let pos = blob([2.0, 0.0], 1.0, 100, 1);
        let neg = blob([-2.0, 0.0], 1.0, 100, 2);
        let scorer = train_binary_scorer(&pos, &neg, &ScorerHyper::default()).unwrap();
        let vpos = blob([2.0, 0.0], 1.0, 200, 3);
        let vneg = blob([-2.0, 0.0], 1.0, 200, 4);
        let correct = vpos.iter().filter(|x| scorer.score(x) >= 0.5).count()
            + vneg.iter().filter(|x| scorer.score(x) < 0.5).count();
        let acc = correct as f64 / 400.0;
        assert!(acc >= 0.95, "validation accuracy {acc}");
    }

    #[test]
    fn identical_sets_give_half() {
        let set = blob([1.0, -1.0], 1.0, 60, 9);
        let scorer = train_binary_scorer(&set, &set, &ScorerHyper::default()).unwrap();
        let m = mean_confidence(&scorer, &set).unwrap();
        assert!((m - 0.5).abs() <= 0.05, "mean score {m}");
    }

    #[test]
    fn single_points_are_separated() {
        let scorer = train_binary_scorer(&[[1.0, 2.0]], &[[-1.0, 0.5]], &ScorerHyper::default()).unwrap();
        assert!(scorer.score(&[1.0, 2.0]) > 0.5);
        assert!(scorer.score(&[-1.0, 0.5]) < 0.5);
    }

    #[test]
    fn degenerate_inputs_still_train() {
        let pts = vec![vec![1.0, 1.0]; 4];
        assert!(inputs_degenerate(&pts, &pts));
        let scorer = train_binary_scorer(&pts, &pts, &ScorerHyper::default()).unwrap();
        assert!(scorer.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn deterministic_given_seed() {
        let pos = blob([1.0, 0.0], 1.0, 30, 5);
        let neg = blob([-1.0, 0.0], 1.0, 30, 6);
        let h = ScorerHyper { seed: 42, ..Default::default() };
        assert_eq!(train_binary_scorer(&pos, &neg, &h).unwrap(), train_binary_scorer(&pos, &neg, &h).unwrap());
    }

    #[test]
    fn empty_class_errors() {
        let none: [[f64; 2]; 0] = [];
        assert!(matches!(
            train_binary_scorer(&none, &[[1.0, 0.0]], &ScorerHyper::default()),
            Err(DedupError::EmptyClass)
        ));
    }

    fn fixed(weights: Vec<f64>, bias: f64) -> LinearScorer {
        LinearScorer { weights, bias, trained_on: ("m".into(), "n".into()) }
    }

    #[test]
    fn mean_confidence_examples() {
        // sigmoid(z) = 0.2 and 0.8 at z = -ln 4 and ln 4
        let s = fixed(vec![1.0], 0.0);
        let l4 = 4f64.ln();
        let m = mean_confidence(&s, &[[-l4], [l4]]).unwrap();
        assert!((m - 0.5).abs() < 1e-15);

        let sat = fixed(vec![0.0], 800.0);
        assert_eq!(mean_confidence(&sat, &[[1.0], [2.0]]).unwrap(), 1.0);

        assert!(matches!(mean_confidence(&s, &Vec::<Vec<f64>>::new()), Err(DedupError::EmptyValidation)));
    }

    #[test]
    fn mean_confidence_matches_naive_loop() {
        let mut rng = math::rng(11);
        let s = fixed((0..5).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.3);
        let data: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut acc = 0.0;
        for x in &data {
            let mut z = s.bias;
            for k in 0..5 {
                z += s.weights[k] * x[k];
            }
            acc += 1.0 / (1.0 + (-z).exp());
        }
        let naive = acc / data.len() as f64;
        assert!((mean_confidence(&s, &data).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn negated_is_complement() {
        let s = fixed(vec![0.7, -0.2], 0.1);
        let n = s.negated();
        let x = [0.4, 1.3];
        assert!((s.score(&x) + n.score(&x) - 1.0).abs() < 1e-15);
        assert_eq!(n.trained_on, ("n".to_string(), "m".to_string()));
    }
}
