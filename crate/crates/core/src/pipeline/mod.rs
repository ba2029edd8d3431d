//! End-to-end run: discover, match, dedup, saliency, train, outliers, eval.
//!
//! Every stage writes its artifact into the output directory, and
//! `run_manifest.json` records the SHA-256 of each stage's inputs and
//! outputs. Wall-clock timings go to `timings.json` so that `report.json`
//! depends only on the config and the input files.

mod config;
pub mod stages;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{load_config, parse_config, ConfigError, PipelineConfig};
pub use stages::BoxError;

use crate::dedup::ScorerHyper;
use crate::eval::{outlier_metrics, EvalReport};
use crate::features;
use crate::math::derive_seed;
use crate::mil::MilModel;
use crate::saliency::GapHyper;
use stages::{QueryOutliers, SelectedQuery};

pub const CANDIDATES: &str = "candidates.json";
pub const SCORED: &str = "scored.json";
pub const SELECTED: &str = "selected.json";
pub const SALIENCY: &str = "saliency.json";
pub const INSTANCES: &str = "instances.poly";
pub const BAGS: &str = "bags.json";
pub const MODEL: &str = "model.json";
pub const TRAINING: &str = "training.json";
pub const OUTLIERS: &str = "outliers.json";
pub const REPORT: &str = "report.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TIMINGS: &str = "timings.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Discover,
    Match,
    Dedup,
    Saliency,
    Train,
    Outliers,
    Eval,
    Ablate,
    Io,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Discover => "discover",
            Stage::Match => "match",
            Stage::Dedup => "dedup",
            Stage::Saliency => "saliency",
            Stage::Train => "train",
            Stage::Outliers => "outliers",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Io => "io",
        }
    }

    /// Process exit status for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Discover => 10,
            Stage::Match => 11,
            Stage::Dedup => 12,
            Stage::Saliency => 13,
            Stage::Train => 14,
            Stage::Outliers => 15,
            Stage::Eval => 16,
            Stage::Ablate | Stage::Io => 17,
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: BoxError,
}

impl PipelineError {
    pub fn new(stage: Stage, source: impl Into<BoxError>) -> Self {
        Self { stage, source: source.into() }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(self.source.as_ref())
    }
}

/// Tags any error with the stage it came from.
pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<BoxError>> StageContext<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), BoxError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BoxError> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

pub fn sha256_file(path: &Path) -> Result<String, BoxError> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn record(stage: Stage, inputs: &[&Path], outputs: &[&Path]) -> Result<StageRecord, PipelineError> {
    let hash_all = |paths: &[&Path]| -> Result<BTreeMap<String, String>, PipelineError> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p).stage(Stage::Io)?)))
            .collect()
    };
    Ok(StageRecord { stage, inputs: hash_all(inputs)?, outputs: hash_all(outputs)? })
}

/// Planted-outlier ids; extra keys in the truth file are ignored.
#[derive(Debug, Clone, Deserialize)]
struct PlantedTruth {
    outliers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub output_dir: PathBuf,
    pub report: EvalReport,
    pub selected: Vec<SelectedQuery>,
    pub outliers: Vec<QueryOutliers>,
    pub model: MilModel,
    pub timings_ms: BTreeMap<String, u64>,
}

struct Timer {
    start: Instant,
    timings: BTreeMap<String, u64>,
}

impl Timer {
    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.timings.insert(stage.name().into(), (now - self.start).as_millis() as u64);
        self.start = now;
    }
}

/// Runs every stage in order. The first failing stage aborts the run.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary, PipelineError> {
    config.validate().stage(Stage::Config)?;
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display())).stage(Stage::Io)?;
    let path = |name: &str| out.join(name);
    let mut timer = Timer { start: Instant::now(), timings: BTreeMap::new() };
    let mut manifest_records = Vec::new();

    // discover
    let candidates = stages::discover(&config.keyword, &config.corpus).stage(Stage::Discover)?;
    log::info!("discover: {} candidates", candidates.len());
    write_json(&path(CANDIDATES), &candidates).stage(Stage::Io)?;
    manifest_records.push(record(Stage::Discover, &[&config.corpus], &[&path(CANDIDATES)])?);
    timer.lap(Stage::Discover);

    // match
    let bank = features::load_feature_bank(&config.features).stage(Stage::Match)?;
    let manifest = features::load_manifest_file(&config.manifest).stage(Stage::Match)?;
    let matched = stages::match_queries(&config.keyword, &candidates, &bank, &manifest, &config.match_params())
        .stage(Stage::Match)?;
    log::info!("match: {} ranked of {}", matched.ranked.len(), matched.all.len());
    write_json(&path(SCORED), &matched).stage(Stage::Io)?;
    manifest_records.push(record(
        Stage::Match,
        &[&path(CANDIDATES), &config.features, &config.manifest],
        &[&path(SCORED)],
    )?);
    timer.lap(Stage::Match);

    // dedup
    let hyper = ScorerHyper { seed: derive_seed(config.seed, 1), ..ScorerHyper::default() };
    let dedup = stages::dedup_queries(
        &matched.ranked,
        &bank,
        &manifest,
        &config.dedup_params(),
        &hyper,
        config.restarts,
        derive_seed(config.seed, 2),
    )
    .stage(Stage::Dedup)?;
    log::info!("dedup: kept {:?}", dedup.selected.iter().map(|s| &s.query).collect::<Vec<_>>());
    write_json(&path(SELECTED), &dedup).stage(Stage::Io)?;
    manifest_records.push(record(
        Stage::Dedup,
        &[&path(SCORED), &config.features, &config.manifest],
        &[&path(SELECTED)],
    )?);
    timer.lap(Stage::Dedup);

    // saliency
    let maps = features::load_feature_map_bank(&config.maps).stage(Stage::Saliency)?;
    let labels = stages::saliency_labels(&dedup.selected, &manifest);
    let keyword = crate::corpus::normalize_token(&config.keyword);
    let pool: Vec<String> = stages::images_of(&manifest, &keyword).iter().map(|r| r.image_id.clone()).collect();
    let gap = GapHyper { seed: derive_seed(config.seed, 3), ..GapHyper::default() };
    let (saliency, instances) = stages::extract_instances(&maps, &labels, &pool, &gap).stage(Stage::Saliency)?;
    write_json(&path(SALIENCY), &saliency).stage(Stage::Io)?;
    features::save_feature_bank(&instances, &path(INSTANCES)).stage(Stage::Io)?;
    manifest_records.push(record(
        Stage::Saliency,
        &[&path(SELECTED), &config.maps, &config.manifest],
        &[&path(SALIENCY), &path(INSTANCES)],
    )?);
    timer.lap(Stage::Saliency);

    // train, on the instances as stored
    let instances = features::load_feature_bank(&path(INSTANCES)).stage(Stage::Train)?;
    let bags = stages::bag_spec(&dedup.selected, &manifest);
    write_json(&path(BAGS), &bags).stage(Stage::Io)?;
    let training = stages::train_model(&bags, &instances, &config.mil_config(derive_seed(config.seed, 4)))
        .stage(Stage::Train)?;
    write_json(&path(MODEL), &training.model).stage(Stage::Io)?;
    write_json(&path(TRAINING), &serde_json::json!({ "loss_curve": training.loss_curve })).stage(Stage::Io)?;
    manifest_records.push(record(
        Stage::Train,
        &[&path(INSTANCES), &path(BAGS)],
        &[&path(MODEL), &path(TRAINING)],
    )?);
    timer.lap(Stage::Train);

    // outliers
    let model = training.model;
    let outliers = stages::find_outliers(&model, &instances, &manifest, config.theta_out).stage(Stage::Outliers)?;
    write_json(&path(OUTLIERS), &outliers).stage(Stage::Io)?;
    manifest_records.push(record(
        Stage::Outliers,
        &[&path(MODEL), &path(INSTANCES), &config.manifest],
        &[&path(OUTLIERS)],
    )?);
    timer.lap(Stage::Outliers);

    // eval
    let mut report = stages::evaluate(&model, &instances, &manifest).stage(Stage::Eval)?;
    report.config_echo = serde_json::to_value(config).stage(Stage::Eval)?;
    let mut eval_inputs = vec![path(MODEL), path(INSTANCES), config.manifest.clone()];
    if let Some(truth_path) = &config.truth {
        let truth: PlantedTruth = read_json(truth_path).stage(Stage::Eval)?;
        let considered: BTreeSet<&str> = outliers
            .iter()
            .flat_map(|q| q.kept.iter().chain(&q.outliers))
            .map(String::as_str)
            .collect();
        report.outliers = Some(outlier_metrics(
            outliers.iter().flat_map(|q| q.outliers.iter().map(String::as_str)),
            truth.outliers.iter().map(String::as_str),
            &considered,
        ));
        eval_inputs.push(truth_path.clone());
    }
    write_json(&path(REPORT), &report).stage(Stage::Io)?;
    let inputs: Vec<&Path> = eval_inputs.iter().map(PathBuf::as_path).collect();
    manifest_records.push(record(Stage::Eval, &inputs, &[&path(REPORT)])?);
    timer.lap(Stage::Eval);

    write_json(&path(RUN_MANIFEST), &manifest_records).stage(Stage::Io)?;
    write_json(&path(TIMINGS), &timer.timings).stage(Stage::Io)?;
    log::info!("eval: aca {:.4}", report.aca);

    Ok(PipelineSummary {
        output_dir: out,
        report,
        selected: dedup.selected,
        outliers,
        model,
        timings_ms: timer.timings,
    })
}
