//! Visual match counting of candidate queries against the keyword image pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CandidateQuery;
use crate::math::cosine;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("query image list is empty")]
    NoQueryImages,
    #[error("{name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    /// Cosine threshold in [-1, 1].
    pub similarity_threshold: f64,
    pub top_n: usize,
    /// Images per candidate query used for matching.
    pub per_query_images: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.75,
            top_n: 10,
            per_query_images: 5,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<(), MatchError> {
        check_tau(self.similarity_threshold)?;
        if self.top_n == 0 {
            return Err(MatchError::OutOfRange {
                name: "top_n",
                value: 0.0,
            });
        }
        if self.per_query_images == 0 {
            return Err(MatchError::OutOfRange {
                name: "per_query_images",
                value: 0.0,
            });
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<(), MatchError> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(MatchError::OutOfRange {
            name: "tau",
            value: tau,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub per_image: Vec<u64>,
    pub total: u64,
}

/// Number of pool vectors whose cosine similarity with `x` is at least `tau`.
pub fn match_count_single<P: AsRef<[f64]>>(x: &[f64], pool: &[P], tau: f64) -> Result<u64, MatchError> {
    check_tau(tau)?;
    let mut count = 0;
    for p in pool {
        let p = p.as_ref();
        if p.len() != x.len() {
            return Err(MatchError::DimensionMismatch {
                expected: x.len(),
                found: p.len(),
            });
        }
        if cosine(x, p) >= tau {
            count += 1;
        }
    }
    Ok(count)
}

/// Per-image match counts and their sum over the query's images.
pub fn accumulate_counts<Q, P>(query_images: &[Q], pool: &[P], tau: f64) -> Result<MatchCounts, MatchError>
where
    Q: AsRef<[f64]> + Sync,
    P: AsRef<[f64]> + Sync,
{
    if query_images.is_empty() {
        return Err(MatchError::NoQueryImages);
    }
    let per_image = query_images
        .par_iter()
        .map(|q| match_count_single(q.as_ref(), pool, tau))
        .collect::<Result<Vec<_>, _>>()?;
    let total = per_image.iter().sum();
    Ok(MatchCounts { per_image, total })
}

/// Top `n` candidates by match score, dropping zero scores. Unscored
/// candidates count as zero.
pub fn rank_candidates(candidates: &[CandidateQuery], n: usize) -> Vec<CandidateQuery> {
    let mut scored: Vec<CandidateQuery> = candidates
        .iter()
        .filter(|c| c.match_score.unwrap_or(0) > 0)
        .cloned()
        .collect();
    scored.sort_by(|a, b| {
        b.match_score
            .cmp(&a.match_score)
            .then_with(|| b.corpus_count.cmp(&a.corpus_count))
            .then_with(|| a.query_text.cmp(&b.query_text))
    });
    scored.truncate(n);
    scored
}
