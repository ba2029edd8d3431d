//! Pipeline configuration: a JSON object with defaults for every knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::DedupParams;
use crate::matching::MatchParams;
use crate::mil::{Aggregator, MilConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config must be a JSON object")]
    NotAnObject,
    #[error("invalid config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config key {key:?} out of range: {value}")]
    OutOfRange { key: &'static str, value: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

fn d_tau() -> f64 {
    0.75
}
fn d_top_n() -> usize {
    10
}
fn d_per_query_images() -> usize {
    5
}
fn d_alpha() -> f64 {
    0.6
}
fn d_beta() -> f64 {
    30.0
}
fn d_lambda() -> f64 {
    1.0
}
fn d_theta_out() -> f64 {
    0.3
}
fn d_bag_size() -> usize {
    5
}
fn d_lr() -> f64 {
    0.001
}
fn d_epochs() -> usize {
    100
}
fn d_restarts() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub keyword: String,
    pub corpus: PathBuf,
    pub features: PathBuf,
    pub maps: PathBuf,
    pub manifest: PathBuf,
    /// Optional planted-outlier truth file; enables outlier metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_top_n")]
    pub top_n: usize,
    #[serde(default = "d_per_query_images")]
    pub per_query_images: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_theta_out")]
    pub theta_out: f64,
    #[serde(default)]
    pub aggregator: Aggregator,
    #[serde(default = "d_bag_size")]
    pub bag_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_restarts")]
    pub restarts: usize,
}

impl PipelineConfig {
    /// A config with every knob at its default.
    pub fn new(
        keyword: impl Into<String>,
        corpus: PathBuf,
        features: PathBuf,
        maps: PathBuf,
        manifest: PathBuf,
        output_dir: PathBuf,
        seed: u64,
    ) -> Self {
        Self {
            keyword: keyword.into(),
            corpus,
            features,
            maps,
            manifest,
            truth: None,
            output_dir,
            seed,
            tau: d_tau(),
            top_n: d_top_n(),
            per_query_images: d_per_query_images(),
            alpha: d_alpha(),
            beta: d_beta(),
            lambda: d_lambda(),
            theta_out: d_theta_out(),
            aggregator: Aggregator::Max,
            bag_size: d_bag_size(),
            lr: d_lr(),
            epochs: d_epochs(),
            restarts: d_restarts(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn fail<T: std::fmt::Display>(key: &'static str, value: T) -> Result<(), ConfigError> {
            Err(ConfigError::OutOfRange { key, value: value.to_string() })
        }
        let kw = self.keyword.trim();
        if kw.is_empty() || kw.contains(char::is_whitespace) {
            return fail("keyword", format!("{:?}", self.keyword));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return fail("tau", self.tau);
        }
        if self.top_n == 0 {
            return fail("top_n", 0);
        }
        if self.per_query_images == 0 {
            return fail("per_query_images", 0);
        }
        if !self.alpha.is_finite() {
            return fail("alpha", self.alpha);
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return fail("beta", self.beta);
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail("lambda", self.lambda);
        }
        if !(0.0..1.0).contains(&self.theta_out) {
            return fail("theta_out", self.theta_out);
        }
        if self.bag_size == 0 {
            return fail("bag_size", 0);
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail("lr", self.lr);
        }
        Ok(())
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            similarity_threshold: self.tau,
            top_n: self.top_n,
            per_query_images: self.per_query_images,
        }
    }

    pub fn dedup_params(&self) -> DedupParams {
        DedupParams {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            ..DedupParams::default()
        }
    }

    pub fn mil_config(&self, seed: u64) -> MilConfig {
        MilConfig {
            lr: self.lr,
            epochs: self.epochs,
            bag_size: self.bag_size,
            seed,
            aggregator: self.aggregator,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.features);
        fix(&mut self.maps);
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        if let Some(t) = self.truth.as_mut() {
            fix(t);
        }
    }
}

/// Parses and validates a JSON config. Unknown keys are rejected.
pub fn parse_config(source: &str) -> Result<PipelineConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(source)?;
    if !value.is_object() {
        return Err(ConfigError::NotAnObject);
    }
    let config: PipelineConfig = serde_json::from_value(value)?;
    config.validate()?;
    Ok(config)
}

/// Reads a config file; relative paths are taken relative to its directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let mut config = parse_config(&text)?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(config)
}
