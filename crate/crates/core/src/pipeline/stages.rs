//! The individual pipeline stages. Each one is a plain function over
//! in-memory inputs so the CLI subcommands and the full run share them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{discover_candidates, parse_ngram_file, CandidateQuery, ParseWarning};
use crate::dedup::{
    build_distinctness_matrix, select_queries, DedupParams, PairDistinctness, QueryImages, ScorerHyper,
    SelectionProblem, SelectionSolution,
};
use crate::eval::{average_classification_accuracy, EvalReport, NO_SENSE};
use crate::features::{FeatureBank, FeatureMapBank, ImageRecord};
use crate::matching::{accumulate_counts, rank_candidates, MatchParams};
use crate::mil::{self, Bag, MilConfig, MilModel, MilTraining};
use crate::saliency::{self, BoundingBox, GapHead, GapHyper};

pub type BoxError = Box<dyn std::error::Error + Send + Sync + 'static>;

fn err(msg: impl Into<String>) -> BoxError {
    msg.into().into()
}

/// Manifest records whose source query is `query`, in manifest order.
pub fn images_of<'a>(manifest: &'a [ImageRecord], query: &str) -> Vec<&'a ImageRecord> {
    manifest.iter().filter(|r| r.source_query.as_deref() == Some(query)).collect()
}

pub fn discover(keyword: &str, corpus: &Path) -> Result<Vec<CandidateQuery>, BoxError> {
    let file = std::fs::File::open(corpus).map_err(|e| err(format!("{}: {e}", corpus.display())))?;
    let parsed = parse_ngram_file(std::io::BufReader::new(file))?;
    if parsed.malformed() > 0 {
        log::warn!("{} malformed corpus lines skipped (first at line {})", parsed.malformed(), parsed.malformed_lines[0]);
    }
    if parsed.warning == Some(ParseWarning::AllMalformed) {
        log::warn!("every corpus line was malformed");
    }
    Ok(discover_candidates(&crate::corpus::normalize_token(keyword), &parsed.entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutput {
    pub params: MatchParams,
    pub pool_size: usize,
    /// Every candidate with its score.
    pub all: Vec<CandidateQuery>,
    pub ranked: Vec<CandidateQuery>,
}

/// Scores each candidate's first `per_query_images` images against the
/// keyword pool (images whose source query is the keyword itself).
pub fn match_queries(
    keyword: &str,
    candidates: &[CandidateQuery],
    features: &FeatureBank,
    manifest: &[ImageRecord],
    params: &MatchParams,
) -> Result<MatchOutput, BoxError> {
    params.validate()?;
    let keyword = crate::corpus::normalize_token(keyword);
    let pool: Vec<&[f64]> = images_of(manifest, &keyword)
        .iter()
        .map(|r| features.resolve(&r.image_id))
        .collect::<Result<_, _>>()?;
    if pool.is_empty() {
        return Err(err(format!("no keyword-pool images (source_query {keyword:?}) in the manifest")));
    }
    let mut all = Vec::with_capacity(candidates.len());
    for c in candidates {
        let imgs: Vec<&[f64]> = images_of(manifest, &c.query_text)
            .iter()
            .take(params.per_query_images)
            .map(|r| features.resolve(&r.image_id))
            .collect::<Result<_, _>>()?;
        let score = if imgs.is_empty() {
            log::warn!("candidate {:?} has no images; scored 0", c.query_text);
            0
        } else {
            accumulate_counts(&imgs, &pool, params.similarity_threshold)?.total
        };
        all.push(CandidateQuery { match_score: Some(score), ..c.clone() });
    }
    let ranked = rank_candidates(&all, params.top_n);
    Ok(MatchOutput { params: *params, pool_size: pool.len(), all, ranked })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedQuery {
    pub query: String,
    pub class_index: usize,
    pub match_score: u64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupOutput {
    pub params: DedupParams,
    pub restarts: usize,
    pub candidates: Vec<String>,
    pub problem: Option<SelectionProblem>,
    pub pairs: Vec<PairDistinctness>,
    pub solution: Option<SelectionSolution>,
    pub selected: Vec<SelectedQuery>,
}

/// Builds the distinctness matrix over every image of the ranked queries
/// and keeps the selected ones, in ranked order. A single ranked query is
/// kept without solving anything.
pub fn dedup_queries(
    ranked: &[CandidateQuery],
    features: &FeatureBank,
    manifest: &[ImageRecord],
    params: &DedupParams,
    hyper: &ScorerHyper,
    restarts: usize,
    seed: u64,
) -> Result<DedupOutput, BoxError> {
    params.validate()?;
    if ranked.is_empty() {
        return Err(err("no ranked candidates to select from"));
    }
    let queries: Vec<QueryImages> = ranked
        .iter()
        .map(|c| {
            let images = images_of(manifest, &c.query_text)
                .iter()
                .map(|r| features.resolve(&r.image_id).map(<[f64]>::to_vec))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(QueryImages { query: c.query_text.clone(), match_score: c.match_score.unwrap_or(0), images })
        })
        .collect::<Result<_, BoxError>>()?;
    let candidates = queries.iter().map(|q| q.query.clone()).collect();

    let (problem, pairs, solution, keep) = if queries.len() == 1 {
        (None, Vec::new(), None, vec![0])
    } else {
        let (problem, report) = build_distinctness_matrix(&queries, params, hyper)?;
        let solution = select_queries(&problem, restarts, seed);
        let keep = solution.selected();
        (Some(problem), report.pairs, Some(solution), keep)
    };
    let selected = keep
        .iter()
        .enumerate()
        .map(|(class_index, &i)| SelectedQuery {
            query: queries[i].query.clone(),
            class_index,
            match_score: queries[i].match_score,
            images: queries[i].images.len(),
        })
        .collect();
    Ok(DedupOutput { params: *params, restarts, candidates, problem, pairs, solution, selected })
}

/// Saliency classes of the selected queries' images, keyed by image id.
pub fn saliency_labels(selected: &[SelectedQuery], manifest: &[ImageRecord]) -> Vec<(String, usize)> {
    selected
        .iter()
        .flat_map(|s| images_of(manifest, &s.query).into_iter().map(|r| (r.image_id.clone(), s.class_index)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub image_id: String,
    pub class: usize,
    /// Normalized OTSU threshold; absent when the saliency map was flat.
    pub threshold: Option<f64>,
    pub bbox: BoundingBox,
    pub component_size: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyOutput {
    pub head: GapHead,
    pub loss_curve: Vec<f64>,
    pub records: Vec<SaliencyRecord>,
}

/// Trains the GAP head on the labeled maps, then localizes every labeled
/// image under its own class and every `extra` image under the head's
/// predicted class. Returns the report and the instance bank (labeled ids
/// first, then `extra`, each in the given order).
pub fn extract_instances(
    maps: &FeatureMapBank,
    labels: &[(String, usize)],
    extra: &[String],
    hyper: &GapHyper,
) -> Result<(SaliencyOutput, FeatureBank), BoxError> {
    let training = saliency::train_gap_head(maps, labels, hyper)?;
    let head = training.head;

    let labeled: BTreeSet<&str> = labels.iter().map(|(id, _)| id.as_str()).collect();
    let jobs: Vec<(&str, Option<usize>)> = labels
        .iter()
        .map(|(id, c)| (id.as_str(), Some(*c)))
        .chain(extra.iter().filter(|id| !labeled.contains(id.as_str())).map(|id| (id.as_str(), None)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(id, class)| {
            let map = maps.resolve(id)?;
            let class = class.unwrap_or_else(|| head.predict(&saliency::global_average_pool(map)));
            let r = saliency::localize(map, &head, class)?;
            Ok((
                SaliencyRecord {
                    image_id: id.to_string(),
                    class,
                    threshold: r.threshold.map(|t| t.threshold),
                    bbox: r.bbox,
                    component_size: r.component_size,
                    fallback: r.fallback,
                },
                r.instance_feature,
            ))
        })
        .collect::<Result<Vec<_>, BoxError>>()?;

    let mut bank = FeatureBank::new(maps.channels())?;
    let mut records = Vec::with_capacity(results.len());
    for (rec, feature) in results {
        bank.insert(rec.image_id.clone(), feature)?;
        records.push(rec);
    }
    let fallbacks = records.iter().filter(|r| r.fallback).count();
    if fallbacks > 0 {
        log::warn!("{fallbacks} images had flat saliency maps and were pooled whole");
    }
    Ok((SaliencyOutput { head, loss_curve: training.loss_curve, records }, bank))
}

/// The training groups handed to the MIL learner: one per selected query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagSpec {
    pub classes: Vec<String>,
    pub groups: Vec<BagGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagGroup {
    pub bag_id: String,
    pub label: usize,
    pub image_ids: Vec<String>,
}

pub fn bag_spec(selected: &[SelectedQuery], manifest: &[ImageRecord]) -> BagSpec {
    BagSpec {
        classes: selected.iter().map(|s| s.query.clone()).collect(),
        groups: selected
            .iter()
            .map(|s| BagGroup {
                bag_id: s.query.clone(),
                label: s.class_index,
                image_ids: images_of(manifest, &s.query).iter().map(|r| r.image_id.clone()).collect(),
            })
            .collect(),
    }
}

pub fn train_model(spec: &BagSpec, instances: &FeatureBank, config: &MilConfig) -> Result<MilTraining, BoxError> {
    let groups: Vec<Bag> = spec
        .groups
        .iter()
        .map(|g| {
            let instances = g
                .image_ids
                .iter()
                .map(|id| instances.resolve(id).map(<[f64]>::to_vec))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Bag { bag_id: g.bag_id.clone(), instances, label: g.label })
        })
        .collect::<Result<_, BoxError>>()?;
    Ok(mil::train(&groups, spec.classes.clone(), config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutliers {
    pub query: String,
    pub class_index: usize,
    pub kept: Vec<String>,
    pub outliers: Vec<String>,
    /// Class probability of each image, in manifest order.
    pub probabilities: Vec<f64>,
}

/// Runs outlier removal over every image of every model class's query.
pub fn find_outliers(
    model: &MilModel,
    instances: &FeatureBank,
    manifest: &[ImageRecord],
    theta: f64,
) -> Result<Vec<QueryOutliers>, BoxError> {
    if !(0.0..1.0).contains(&theta) {
        return Err(err(format!("theta_out out of range: {theta}")));
    }
    model
        .class_names()
        .iter()
        .enumerate()
        .map(|(c, query)| {
            let ids: Vec<&str> = images_of(manifest, query).iter().map(|r| r.image_id.as_str()).collect();
            let xs = ids.iter().map(|id| instances.resolve(id)).collect::<Result<Vec<_>, _>>()?;
            let split = mil::remove_outliers(model, c, &xs, theta)?;
            Ok(QueryOutliers {
                query: query.clone(),
                class_index: c,
                kept: split.kept.iter().map(|&j| ids[j].to_string()).collect(),
                outliers: split.outliers.iter().map(|&j| ids[j].to_string()).collect(),
                probabilities: split.probabilities,
            })
        })
        .collect()
}

/// Sense label of each model class: the majority ground-truth label among
/// its query's labeled images (ties to the smaller label), or `None`.
pub fn class_senses(model: &MilModel, manifest: &[ImageRecord]) -> Vec<Option<usize>> {
    model
        .class_names()
        .iter()
        .map(|q| {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for r in images_of(manifest, q) {
                if let Some(l) = r.label {
                    *votes.entry(l).or_default() += 1;
                }
            }
            let best = votes.values().copied().max()?;
            votes.into_iter().find(|&(_, v)| v == best).map(|(l, _)| l)
        })
        .collect()
}

/// Classifies every labeled test image in `instances`, i.e. those whose
/// source query is not one of the model's classes, and scores the senses.
pub fn evaluate(model: &MilModel, instances: &FeatureBank, manifest: &[ImageRecord]) -> Result<EvalReport, BoxError> {
    let senses = class_senses(model, manifest);
    let classes: BTreeSet<&str> = model.class_names().iter().map(String::as_str).collect();
    let tests: Vec<(&str, usize)> = manifest
        .iter()
        .filter(|r| !r.source_query.as_deref().is_some_and(|q| classes.contains(q)))
        .filter(|r| instances.get(&r.image_id).is_some())
        .filter_map(|r| r.label.map(|l| (r.image_id.as_str(), l)))
        .collect();
    if tests.is_empty() {
        return Err(err("no labeled test images in the instance bank"));
    }
    let predictions = tests
        .par_iter()
        .map(|&(id, _)| {
            let c = mil::classify(model, instances.resolve(id)?)?;
            Ok(senses[c].unwrap_or(NO_SENSE))
        })
        .collect::<Result<Vec<_>, BoxError>>()?;
    let labels: Vec<usize> = tests.iter().map(|&(_, l)| l).collect();
    Ok(average_classification_accuracy(&predictions, &labels)?)
}
