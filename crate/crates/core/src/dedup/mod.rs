//! Removal of visually redundant queries.
//!
//! Every pair of queries gets a binary scorer trained on half of each
//! query's images. How confidently the held-out halves are told apart is
//! mapped through `chi` into the distinctness matrix `D`, and the final
//! query set maximizes `lambda * phi.gamma + gamma' D gamma` over binary
//! `gamma`.

mod scorer;
mod select;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scorer::{inputs_degenerate, mean_confidence, train_binary_scorer, LinearScorer, ScorerHyper};
pub use select::{exhaustive_select, objective, select_queries, SelectionSolution, EXHAUSTIVE_LIMIT};

use crate::math;

#[derive(Debug, Error, PartialEq)]
pub enum DedupError {
    #[error("both classes need at least one sample")]
    EmptyClass,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("query {query:?} has {found} images; at least 2 are needed to split")]
    InsufficientImages { query: String, found: usize },
    #[error("at least 2 queries are needed, found {0}")]
    TooFewQueries(usize),
    #[error("exhaustive selection is limited to {limit} queries, found {found}")]
    TooLarge { limit: usize, found: usize },
    #[error("invalid selection problem: {0}")]
    InvalidProblem(String),
    #[error("{name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DedupParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for DedupParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 30.0,
            lambda: 1.0,
            train_fraction: 0.5,
            validation_fraction: 0.5,
        }
    }
}

impl DedupParams {
    pub fn validate(&self) -> Result<(), DedupError> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(DedupError::OutOfRange { name: "beta", value: self.beta });
        }
        if !self.alpha.is_finite() {
            return Err(DedupError::OutOfRange { name: "alpha", value: self.alpha });
        }
        if !self.lambda.is_finite() {
            return Err(DedupError::OutOfRange { name: "lambda", value: self.lambda });
        }
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.train_fraction) {
            return Err(DedupError::OutOfRange { name: "train_fraction", value: self.train_fraction });
        }
        if !in_unit(self.validation_fraction)
            || (self.train_fraction + self.validation_fraction - 1.0).abs() > 1e-9
        {
            return Err(DedupError::OutOfRange {
                name: "validation_fraction",
                value: self.validation_fraction,
            });
        }
        Ok(())
    }
}

/// `chi(rho) = 1 - exp(-beta (rho - alpha))`; zero at `alpha`, strictly
/// increasing, and strongly negative below `alpha`.
pub fn chi(rho: f64, alpha: f64, beta: f64) -> f64 {
    -(-beta * (rho - alpha)).exp_m1()
}

/// One query's images and its match score.
#[derive(Debug, Clone)]
pub struct QueryImages {
    pub query: String,
    pub match_score: u64,
    pub images: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistinctness {
    pub m: usize,
    pub n: usize,
    pub rho_m: f64,
    pub rho_n: f64,
    pub value: f64,
}

fn split(images: &[Vec<f64>], train_fraction: f64, seed: u64) -> (Vec<&[f64]>, Vec<&[f64]>) {
    let mut idx: Vec<usize> = (0..images.len()).collect();
    idx.shuffle(&mut math::rng(seed));
    let n_train = ((images.len() as f64 * train_fraction).round() as usize).clamp(1, images.len() - 1);
    let train = idx[..n_train].iter().map(|&i| images[i].as_slice()).collect();
    let valid = idx[n_train..].iter().map(|&i| images[i].as_slice()).collect();
    (train, valid)
}

#[derive(Debug, Clone)]
pub struct PairScore {
    pub scorer: LinearScorer,
    pub rho_m: f64,
    pub rho_n: f64,
    pub value: f64,
}

/// `D(m, n)` from one shared scorer: `rho_m` is the mean probability of
/// class m on m's held-out images, `rho_n` likewise for n.
pub fn distinctness(
    m: &QueryImages,
    n: &QueryImages,
    params: &DedupParams,
    hyper: &ScorerHyper,
) -> Result<PairScore, DedupError> {
    for q in [m, n] {
        if q.images.len() < 2 {
            return Err(DedupError::InsufficientImages {
                query: q.query.clone(),
                found: q.images.len(),
            });
        }
    }
    let (m_train, m_valid) = split(&m.images, params.train_fraction, math::derive_seed(hyper.seed, 1));
    let (n_train, n_valid) = split(&n.images, params.train_fraction, math::derive_seed(hyper.seed, 2));
    let scorer = train_binary_scorer(&m_train, &n_train, hyper)?.with_pair(&m.query, &n.query);
    let rho_m = mean_confidence(&scorer, &m_valid)?;
    let rho_n = mean_confidence(&scorer.negated(), &n_valid)?;
    let value = chi((rho_m + rho_n) / 2.0, params.alpha, params.beta);
    Ok(PairScore { scorer, rho_m, rho_n, value })
}

/// The relevance vector, distinctness matrix and scaling of the selection
/// objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProblem {
    pub phi: Vec<f64>,
    pub d: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl SelectionProblem {
    pub fn new(phi: Vec<f64>, d: Vec<Vec<f64>>, lambda: f64) -> Result<Self, DedupError> {
        let p = Self { phi, d, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn validate(&self) -> Result<(), DedupError> {
        let n = self.phi.len();
        let bad = |msg: String| Err(DedupError::InvalidProblem(msg));
        if self.d.len() != n || self.d.iter().any(|row| row.len() != n) {
            return bad(format!("D must be {n}x{n}"));
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        for (i, &p) in self.phi.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("phi[{i}] = {p} outside [0, 1]"));
            }
        }
        for i in 0..n {
            if self.d[i][i] != 0.0 {
                return bad(format!("D[{i}][{i}] is not zero"));
            }
            for j in 0..i {
                if !self.d[i][j].is_finite() || self.d[i][j] != self.d[j][i] {
                    return bad(format!("D not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(())
    }
}

/// Diagnostics from building the distinctness matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinctnessReport {
    pub scorers_trained: usize,
    pub pairs: Vec<PairDistinctness>,
}

/// Scores every unordered pair (in parallel; each pair has its own derived
/// seed so the result does not depend on scheduling) and normalizes the
/// match scores into `phi` by dividing by their maximum.
pub fn build_distinctness_matrix(
    queries: &[QueryImages],
    params: &DedupParams,
    hyper: &ScorerHyper,
) -> Result<(SelectionProblem, DistinctnessReport), DedupError> {
    params.validate()?;
    let n = queries.len();
    if n < 2 {
        return Err(DedupError::TooFewQueries(n));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let results = pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let pair_hyper = ScorerHyper {
                seed: math::derive_seed(hyper.seed, k as u64),
                ..*hyper
            };
            let s = distinctness(&queries[i], &queries[j], params, &pair_hyper)?;
            Ok(PairDistinctness { m: i, n: j, rho_m: s.rho_m, rho_n: s.rho_n, value: s.value })
        })
        .collect::<Result<Vec<_>, DedupError>>()?;

    let mut d = vec![vec![0.0; n]; n];
    for p in &results {
        d[p.m][p.n] = p.value;
        d[p.n][p.m] = p.value;
    }
    let max_score = queries.iter().map(|q| q.match_score).max().unwrap_or(0);
    let phi = queries
        .iter()
        .map(|q| if max_score == 0 { 0.0 } else { q.match_score as f64 / max_score as f64 })
        .collect();
    let problem = SelectionProblem::new(phi, d, params.lambda)?;
    Ok((
        problem,
        DistinctnessReport {
            scorers_trained: results.len(),
            pairs: results,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    // 1 - e^-3, 1 - e^3 and 1 - e^-12, evaluated at 40 digits
    const CHI_07: f64 = 0.950_212_931_632_136_057_020_657_584_349_938_223_368_3;
    const CHI_05: f64 = -19.085_536_923_187_667_740_928_529_654_581_717_896_99;
    const CHI_10: f64 = 0.999_993_855_787_646_671_790_241_317_691_821_194_467_7;

    #[test]
    fn chi_at_alpha_is_zero() {
        assert_eq!(chi(0.6, 0.6, 30.0), 0.0);
    }

    #[test]
    fn chi_reference_values() {
        assert!((chi(0.7, 0.6, 30.0) - CHI_07).abs() < 1e-12);
        assert!((chi(0.5, 0.6, 30.0) - CHI_05).abs() < 1e-11);
        assert!((chi(1.0, 0.6, 30.0) - CHI_10).abs() < 1e-12);
    }

    fn cluster(center: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = math::rng(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| center.iter().map(|c| c + noise.sample(&mut rng)).collect())
            .collect()
    }

    fn query(name: &str, center: &[f64], seed: u64) -> QueryImages {
        QueryImages {
            query: name.into(),
            match_score: 10,
            images: cluster(center, 60, seed),
        }
    }

    #[test]
    fn identical_sets_are_penalized() {
        let q = query("a", &[0.0, 0.0, 0.0], 1);
        let mut q2 = q.clone();
        q2.query = "b".into();
        let s = distinctness(&q, &q2, &DedupParams::default(), &ScorerHyper::default()).unwrap();
        let rho = (s.rho_m + s.rho_n) / 2.0;
        assert!((rho - 0.5).abs() < 0.1, "rho {rho}");
        assert!(s.value < 0.0);
    }

    #[test]
    fn separated_clusters_are_distinct() {
        let a = query("a", &[6.0, 0.0, 0.0], 3);
        let b = query("b", &[-6.0, 0.0, 0.0], 4);
        let d = distinctness(&a, &b, &DedupParams::default(), &ScorerHyper::default()).unwrap().value;
        assert!((d - CHI_10).abs() < 1e-3, "D {d}");
    }

    #[test]
    fn too_few_images() {
        let a = QueryImages { query: "a".into(), match_score: 1, images: vec![vec![0.0]] };
        let b = QueryImages { query: "b".into(), match_score: 1, images: vec![vec![1.0], vec![2.0]] };
        let err = distinctness(&a, &b, &DedupParams::default(), &ScorerHyper::default()).unwrap_err();
        assert!(matches!(err, DedupError::InsufficientImages { found: 1, .. }));
    }

    #[test]
    fn two_queries_one_scorer() {
        let qs = [query("a", &[3.0, 0.0, 0.0], 1), query("b", &[-3.0, 0.0, 0.0], 2)];
        let (p, rep) = build_distinctness_matrix(&qs, &DedupParams::default(), &ScorerHyper::default()).unwrap();
        assert_eq!(rep.scorers_trained, 1);
        assert_eq!(p.d[0][1], p.d[1][0]);
        assert_eq!(p.d[0][0], 0.0);
    }

    #[test]
    fn pair_count_is_n_choose_2_and_similar_pairs_are_most_negative() {
        // a/a2 share a cluster, b/b2 share another
        let qs = [
            query("a", &[5.0, 0.0, 0.0], 1),
            query("b", &[0.0, 5.0, 0.0], 2),
            query("a2", &[5.0, 0.0, 0.0], 3),
            query("b2", &[0.0, 5.0, 0.0], 4),
        ];
        let (p, rep) = build_distinctness_matrix(&qs, &DedupParams::default(), &ScorerHyper::default()).unwrap();
        assert_eq!(rep.scorers_trained, 6);
        p.validate().unwrap();
        let mut entries: Vec<(f64, (usize, usize))> = rep.pairs.iter().map(|x| (x.value, (x.m, x.n))).collect();
        entries.sort_by(|x, y| x.0.total_cmp(&y.0));
        let lowest: Vec<_> = entries[..2].iter().map(|e| e.1).collect();
        assert!(lowest.contains(&(0, 2)) && lowest.contains(&(1, 3)), "{entries:?}");
    }

    #[test]
    fn phi_is_max_normalized() {
        let mut qs = vec![query("a", &[5.0, 0.0], 1), query("b", &[0.0, 5.0], 2)];
        qs[0].match_score = 4;
        qs[1].match_score = 8;
        let (p, _) = build_distinctness_matrix(&qs, &DedupParams::default(), &ScorerHyper::default()).unwrap();
        assert_eq!(p.phi, vec![0.5, 1.0]);
    }

    #[test]
    fn params_validation() {
        let bad = DedupParams { beta: -1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(DedupError::OutOfRange { name: "beta", .. })));
        let bad = DedupParams { train_fraction: 0.7, ..Default::default() };
        assert!(bad.validate().is_err());
        DedupParams::default().validate().unwrap();
    }

    #[test]
    fn problem_validation() {
        assert!(SelectionProblem::new(vec![0.5, 0.5], vec![vec![0.0, 1.0], vec![2.0, 0.0]], 1.0).is_err());
        assert!(SelectionProblem::new(vec![0.5, 0.5], vec![vec![1.0, 1.0], vec![1.0, 0.0]], 1.0).is_err());
        assert!(SelectionProblem::new(vec![1.5], vec![vec![0.0]], 1.0).is_err());
        assert!(SelectionProblem::new(vec![0.5], vec![vec![0.0]], 1.0).is_ok());
    }
}
