//! Global-average-pooling classification head over convolutional maps.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::SaliencyError;
use crate::features::{FeatureMap, FeatureMapBank};
use crate::math::{self, dot, softmax};

/// Linear softmax over GAP-pooled channels. `weights` is C x U row-major;
/// row `c` holds the per-channel weights used for class `c`'s saliency map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapHead {
    pub class_count: usize,
    pub channel_count: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for GapHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 30,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GapTraining {
    pub head: GapHead,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Per-channel spatial mean.
pub fn global_average_pool(map: &FeatureMap) -> Vec<f64> {
    (0..map.channels()).map(|u| math::mean(map.channel(u))).collect()
}

impl GapHead {
    pub fn zeros(class_count: usize, channel_count: usize) -> Self {
        Self {
            class_count,
            channel_count,
            weights: vec![0.0; class_count * channel_count],
            bias: vec![0.0; class_count],
        }
    }

    pub fn class_weights(&self, class: usize) -> &[f64] {
        &self.weights[class * self.channel_count..(class + 1) * self.channel_count]
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.class_count)
            .map(|c| dot(self.class_weights(c), pooled) + self.bias[c])
            .collect()
    }

    pub fn probabilities(&self, pooled: &[f64]) -> Vec<f64> {
        softmax(&self.logits(pooled))
    }

    pub fn predict(&self, pooled: &[f64]) -> usize {
        math::argmax(&self.logits(pooled))
    }

    /// Cross-entropy of one pooled sample plus `l2/2 * |W|^2`, and its
    /// gradient. The logit gradient is `rho - t`.
    pub fn loss_and_gradient(&self, pooled: &[f64], label: usize, l2: f64) -> (f64, HeadGradient) {
        let rho = self.probabilities(pooled);
        let penalty: f64 = self.weights.iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
        let loss = -rho[label].max(1e-300).ln() + penalty;
        let mut weights = vec![0.0; self.weights.len()];
        let mut bias = vec![0.0; self.class_count];
        for c in 0..self.class_count {
            let delta = rho[c] - if c == label { 1.0 } else { 0.0 };
            bias[c] = delta;
            let row = c * self.channel_count;
            for u in 0..self.channel_count {
                weights[row + u] = delta * pooled[u] + l2 * self.weights[row + u];
            }
        }
        (loss, HeadGradient { weights, bias })
    }
}

/// Fits the head by per-image SGD on pooled maps, starting from zeros.
/// `labels` pairs image ids with class indices; the class count is the
/// largest label plus one.
pub fn train_gap_head(
    maps: &FeatureMapBank,
    labels: &[(String, usize)],
    hyper: &GapHyper,
) -> Result<GapTraining, SaliencyError> {
    let distinct: std::collections::BTreeSet<usize> = labels.iter().map(|(_, c)| *c).collect();
    if distinct.len() < 2 {
        return Err(SaliencyError::SingleClass);
    }
    let class_count = distinct.iter().max().copied().unwrap_or(0) + 1;
    let samples: Vec<(Vec<f64>, usize)> = labels
        .iter()
        .map(|(id, c)| {
            let map = maps.resolve(id).map_err(|_| SaliencyError::MissingMap(id.clone()))?;
            Ok((global_average_pool(map), *c))
        })
        .collect::<Result<_, SaliencyError>>()?;

    let mut head = GapHead::zeros(class_count, maps.channels());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = math::rng(hyper.seed);
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (pooled, label) = &samples[i];
            let (loss, grad) = head.loss_and_gradient(pooled, *label, hyper.l2);
            total += loss;
            for (w, g) in head.weights.iter_mut().zip(&grad.weights) {
                *w -= hyper.lr * g;
            }
            for (b, g) in head.bias.iter_mut().zip(&grad.bias) {
                *b -= hyper.lr * g;
            }
        }
        loss_curve.push(total / samples.len() as f64);
    }
    Ok(GapTraining { head, loss_curve })
}
