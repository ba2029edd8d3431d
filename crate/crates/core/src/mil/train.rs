//! Plain SGD over seeded mini-bags.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backward_unchecked, bag_loss, forward_unchecked, Aggregator, Bag, MilError, MilModel};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Instances per training bag.
    pub bag_size: usize,
    pub seed: u64,
    pub aggregator: Aggregator,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 100,
            bag_size: 5,
            seed: 0,
            aggregator: Aggregator::Max,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<(), MilError> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(MilError::OutOfRange { name: "lr", value: self.lr });
        }
        if self.bag_size == 0 {
            return Err(MilError::OutOfRange { name: "bag_size", value: 0.0 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MilTraining {
    pub model: MilModel,
    /// Mean bag loss per epoch, measured before each step.
    pub loss_curve: Vec<f64>,
}

/// Trains a zero-initialized model.
///
/// `groups` holds every instance of one query with its class label. Each
/// epoch, every group is shuffled and cut into bags of `bag_size` (the last
/// one may be smaller); all bags of the epoch are then shuffled together and
/// visited once.
pub fn train(groups: &[Bag], class_names: Vec<String>, config: &MilConfig) -> Result<MilTraining, MilError> {
    config.validate()?;
    let classes = class_names.len();
    let mut seen = std::collections::BTreeSet::new();
    let mut dim = None;
    for g in groups {
        if g.label >= classes {
            return Err(MilError::LabelOutOfRange { label: g.label, classes });
        }
        if g.instances.is_empty() {
            continue;
        }
        seen.insert(g.label);
        for x in &g.instances {
            let d = *dim.get_or_insert(x.len());
            if x.len() != d {
                return Err(MilError::DimensionMismatch { expected: d, found: x.len() });
            }
        }
    }
    if seen.len() < 2 {
        return Err(MilError::SingleClass);
    }
    let dim = dim.unwrap_or(0);

    let mut model = MilModel::zeros(class_names, dim, config.aggregator);
    let mut rng = math::rng(config.seed);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut orders: Vec<Vec<usize>> = groups.iter().map(|g| (0..g.instances.len()).collect()).collect();

    for _ in 0..config.epochs {
        let mut bags: Vec<(usize, Vec<usize>)> = Vec::new();
        for (gi, order) in orders.iter_mut().enumerate() {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.bag_size) {
                bags.push((gi, chunk.to_vec()));
            }
        }
        bags.shuffle(&mut rng);

        let mut total = 0.0;
        for (gi, idx) in &bags {
            let group = &groups[*gi];
            let instances: Vec<Vec<f64>> = idx.iter().map(|&j| group.instances[j].clone()).collect();
            let trace = forward_unchecked(&model, &instances);
            total += bag_loss(&trace, group.label)?;
            let grad = backward_unchecked(&model, &trace, &instances, group.label);
            model.apply_gradient(&grad, config.lr);
        }
        loss_curve.push(total / bags.len() as f64);
    }
    Ok(MilTraining { model, loss_curve })
}
