//! Binary quadratic query selection.
//!
//! With a zero diagonal the objective is linear in each coordinate, so a
//! coordinate update simply sets `gamma_n` to 0 or 1 by the sign of its
//! coefficient and the ascent ends on a vertex of the box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DedupError, SelectionProblem};
use crate::math;

pub const EXHAUSTIVE_LIMIT: usize = 20;
const MAX_SWEEPS: usize = 1000;
const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSolution {
    pub gamma_relaxed: Vec<f64>,
    pub gamma: Vec<bool>,
    pub objective: f64,
}

impl SelectionSolution {
    fn from_relaxed(problem: &SelectionProblem, gamma_relaxed: Vec<f64>) -> Self {
        let gamma: Vec<bool> = gamma_relaxed.iter().map(|&g| g >= 0.5).collect();
        let objective = objective(problem, &gamma);
        Self {
            gamma_relaxed,
            gamma,
            objective,
        }
    }

    pub fn selected(&self) -> Vec<usize> {
        self.gamma.iter().enumerate().filter(|(_, &g)| g).map(|(i, _)| i).collect()
    }
}

/// `lambda * phi.gamma + gamma' D gamma` for a binary `gamma`.
pub fn objective(problem: &SelectionProblem, gamma: &[bool]) -> f64 {
    let mut linear = 0.0;
    let mut quadratic = 0.0;
    for (i, &gi) in gamma.iter().enumerate() {
        if !gi {
            continue;
        }
        linear += problem.phi[i];
        for (j, &gj) in gamma.iter().enumerate() {
            if gj {
                quadratic += problem.d[i][j];
            }
        }
    }
    problem.lambda * linear + quadratic
}

fn improves(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + 1e-12 * (1.0 + incumbent.abs())
}

fn ties(candidate: f64, incumbent: f64) -> bool {
    !improves(candidate, incumbent) && !improves(incumbent, candidate)
}

/// Tie order between equally good selections: keep lower-indexed queries,
/// i.e. prefer the lexicographically greater 0/1 vector.
fn preferred_on_tie(candidate: &[bool], incumbent: &[bool]) -> bool {
    candidate > incumbent
}

/// Steepest coordinate ascent. Each step moves the single coordinate whose
/// update (to 1 if its coefficient is >= 0, else to 0) gains the most; with
/// nothing left to gain, coordinates whose update is free move to 1 (a zero
/// coefficient keeps the query), lowest index first. Picking the largest
/// gain rather than sweeping by index means that of several redundant
/// queries the most relevant one survives.
fn coordinate_ascent(problem: &SelectionProblem, mut gamma: Vec<f64>) -> Vec<f64> {
    let n = problem.len();
    for _ in 0..MAX_SWEEPS * n.max(1) {
        let mut best: Option<(usize, f64, f64)> = None;
        let mut free: Option<usize> = None;
        for k in 0..n {
            let coupling: f64 = (0..n).filter(|&j| j != k).map(|j| problem.d[k][j] * gamma[j]).sum();
            let coefficient = problem.lambda * problem.phi[k] + 2.0 * coupling;
            let target = if coefficient >= 0.0 { 1.0 } else { 0.0 };
            if target == gamma[k] {
                continue;
            }
            let gain = coefficient * (target - gamma[k]);
            if gain > GAIN_EPS {
                if best.is_none_or(|(_, g, _)| gain > g) {
                    best = Some((k, gain, target));
                }
            } else if target == 1.0 && free.is_none() {
                free = Some(k);
            }
        }
        match (best, free) {
            (Some((k, _, target)), _) => gamma[k] = target,
            (None, Some(k)) => gamma[k] = 1.0,
            (None, None) => break,
        }
    }
    gamma
}

/// Multi-start coordinate ascent over `[0,1]^N`: the all-ones and all-zeros
/// starts plus `restarts` uniform interior starts. The best objective wins.
pub fn select_queries(problem: &SelectionProblem, restarts: usize, seed: u64) -> SelectionSolution {
    let n = problem.len();
    let mut rng = math::rng(seed);
    let mut starts = vec![vec![1.0; n], vec![0.0; n]];
    for _ in 0..restarts {
        starts.push((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
    }

    let mut best: Option<SelectionSolution> = None;
    for start in starts {
        let candidate = SelectionSolution::from_relaxed(problem, coordinate_ascent(problem, start));
        best = match best {
            None => Some(candidate),
            Some(inc) => {
                let replace = improves(candidate.objective, inc.objective)
                    || (ties(candidate.objective, inc.objective) && preferred_on_tie(&candidate.gamma, &inc.gamma));
                Some(if replace { candidate } else { inc })
            }
        };
    }
    best.expect("at least two starts")
}

/// Global maximizer by enumerating all `2^N` binary vectors.
pub fn exhaustive_select(problem: &SelectionProblem) -> Result<SelectionSolution, DedupError> {
    let n = problem.len();
    if n > EXHAUSTIVE_LIMIT {
        return Err(DedupError::TooLarge {
            limit: EXHAUSTIVE_LIMIT,
            found: n,
        });
    }
    // gamma[i] is bit (n - 1 - i), so counting down visits vectors in
    // decreasing lexicographic order and the first of any tie is kept
    let mut best_gamma = vec![false; n];
    let mut best_value = f64::NEG_INFINITY;
    for mask in (0u32..(1u32 << n)).rev() {
        let gamma: Vec<bool> = (0..n).map(|i| mask >> (n - 1 - i) & 1 == 1).collect();
        let value = objective(problem, &gamma);
        if best_value == f64::NEG_INFINITY || improves(value, best_value) {
            best_value = value;
            best_gamma = gamma;
        }
    }
    let relaxed = best_gamma.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    Ok(SelectionSolution {
        gamma_relaxed: relaxed,
        gamma: best_gamma,
        objective: best_value,
    })
}
