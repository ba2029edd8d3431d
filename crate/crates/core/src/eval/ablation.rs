//! Grid runs of the full pipeline on synthetic data.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synthetic::{generate_synthetic_dataset, SyntheticSpec};
use crate::mil::Aggregator;
use crate::pipeline::{run_pipeline, BoxError, PipelineConfig};

fn d_aggregators() -> Vec<Aggregator> {
    Aggregator::ALL.to_vec()
}
fn d_instances() -> Vec<usize> {
    vec![50, 100, 150]
}
fn d_lrs() -> Vec<f64> {
    vec![0.001]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default = "d_aggregators")]
    pub aggregators: Vec<Aggregator>,
    #[serde(default = "d_instances")]
    pub instances_per_query: Vec<usize>,
    #[serde(default = "d_lrs")]
    pub lrs: Vec<f64>,
    /// Dataset template; `instances_per_sense` is overridden per cell.
    #[serde(default)]
    pub base: SyntheticSpec,
    /// Pipeline seed shared by every cell.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epochs: Option<usize>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            aggregators: d_aggregators(),
            instances_per_query: d_instances(),
            lrs: d_lrs(),
            base: SyntheticSpec::default(),
            seed: 0,
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub aggregator: Aggregator,
    pub instances_per_query: usize,
    pub lr: f64,
    pub data_seed: u64,
    pub seed: u64,
    pub aca: Option<f64>,
    pub micro_accuracy: Option<f64>,
    pub outlier_recall: Option<f64>,
    pub outlier_precision: Option<f64>,
    pub selected_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSummary {
    pub aggregator: Aggregator,
    pub mean_aca: Option<f64>,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// The grid as run.
    pub config_echo: AblationGrid,
    pub rows: Vec<AblationRow>,
    pub by_aggregator: Vec<AggregatorSummary>,
    /// Observed max-vs-avg ordering; descriptive only.
    pub max_vs_avg: Option<String>,
}

impl AblationReport {
    /// The same report with wall-clock fields cleared, for comparisons.
    pub fn without_runtimes(&self) -> Self {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.runtime_ms = None);
        r
    }
}

fn run_cell(grid: &AblationGrid, work_dir: &Path, index: usize, aggregator: Aggregator, n: usize, lr: f64) -> AblationRow {
    let start = Instant::now();
    let spec = SyntheticSpec { instances_per_sense: n, ..grid.base.clone() };
    let cell_dir = work_dir.join(format!("cell-{index:03}"));
    let outcome = (|| -> Result<_, BoxError> {
        let data = generate_synthetic_dataset(&spec)?;
        let paths = data.write_to_dir(&cell_dir.join("data"))?;
        let mut config = PipelineConfig::new(
            data.truth.keyword.clone(),
            paths.corpus,
            paths.features,
            paths.maps,
            paths.manifest,
            cell_dir.join("out"),
            grid.seed,
        );
        config.truth = Some(paths.truth);
        config.aggregator = aggregator;
        config.lr = lr;
        if let Some(e) = grid.epochs {
            config.epochs = e;
        }
        Ok(run_pipeline(&config)?)
    })();
    let mut row = AblationRow {
        index,
        aggregator,
        instances_per_query: n,
        lr,
        data_seed: spec.seed,
        seed: grid.seed,
        aca: None,
        micro_accuracy: None,
        outlier_recall: None,
        outlier_precision: None,
        selected_queries: 0,
        error: None,
        runtime_ms: None,
    };
    match outcome {
        Ok(summary) => {
            row.aca = Some(summary.report.aca);
            row.micro_accuracy = Some(summary.report.micro_accuracy);
            row.outlier_recall = summary.report.outliers.as_ref().map(|o| o.recall);
            row.outlier_precision = summary.report.outliers.as_ref().map(|o| o.precision);
            row.selected_queries = summary.selected.len();
        }
        Err(e) => {
            log::warn!("ablation cell {index} failed: {e}");
            row.error = Some(e.to_string());
        }
    }
    row.runtime_ms = Some(start.elapsed().as_millis() as u64);
    row
}

/// Runs every (aggregator, instances, lr) cell, in parallel. Rows come back
/// in grid order; a failing cell is recorded and the rest continue.
pub fn run_ablation(grid: &AblationGrid, work_dir: &Path) -> AblationReport {
    let mut cells = Vec::new();
    for &agg in &grid.aggregators {
        for &n in &grid.instances_per_query {
            for &lr in &grid.lrs {
                cells.push((agg, n, lr));
            }
        }
    }
    let rows: Vec<AblationRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(agg, n, lr))| run_cell(grid, work_dir, i, agg, n, lr))
        .collect();

    let mut acc: BTreeMap<usize, (Aggregator, Vec<f64>, usize)> = BTreeMap::new();
    for row in &rows {
        let pos = grid.aggregators.iter().position(|&a| a == row.aggregator).unwrap_or(0);
        let e = acc.entry(pos).or_insert((row.aggregator, Vec::new(), 0));
        e.2 += 1;
        if let Some(a) = row.aca {
            e.1.push(a);
        }
    }
    let by_aggregator: Vec<AggregatorSummary> = acc
        .into_values()
        .map(|(aggregator, acas, cells)| AggregatorSummary {
            aggregator,
            mean_aca: (!acas.is_empty()).then(|| acas.iter().sum::<f64>() / acas.len() as f64),
            cells,
        })
        .collect();
    let mean_of = |a: Aggregator| by_aggregator.iter().find(|s| s.aggregator == a).and_then(|s| s.mean_aca);
    let max_vs_avg = match (mean_of(Aggregator::Max), mean_of(Aggregator::Avg)) {
        (Some(m), Some(a)) => Some(
            if m > a {
                format!("max > avg ({m:.4} vs {a:.4})")
            } else if m < a {
                format!("max < avg ({m:.4} vs {a:.4})")
            } else {
                format!("max = avg ({m:.4})")
            },
        ),
        _ => None,
    };
    AblationReport { config_echo: grid.clone(), rows, by_aggregator, max_vs_avg }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AblationGrid {
        AblationGrid {
            aggregators: vec![Aggregator::Max, Aggregator::Avg],
            instances_per_query: vec![20],
            base: SyntheticSpec { dim: 16, pool_per_sense: 10, synonym_images: 10, junk_images: 6, seed: 4, ..Default::default() },
            epochs: Some(20),
            ..Default::default()
        }
    }

    #[test]
    fn empty_grid_gives_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let grid = AblationGrid { aggregators: vec![], ..tiny() };
        let r = run_ablation(&grid, dir.path());
        assert!(r.rows.is_empty());
        assert_eq!(r.max_vs_avg, None);
    }

    #[test]
    fn rows_follow_grid_order_and_repeat_exactly() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_ablation(&tiny(), a.path());
        let rb = run_ablation(&tiny(), b.path());
        assert_eq!(ra.rows.len(), 2);
        assert_eq!(ra.rows[0].aggregator, Aggregator::Max);
        assert_eq!(ra.rows[1].aggregator, Aggregator::Avg);
        assert!(ra.rows.iter().all(|r| r.error.is_none()), "{:?}", ra.rows);
        assert_eq!(ra.without_runtimes(), rb.without_runtimes());
        assert!(ra.max_vs_avg.is_some());
    }

    #[test]
    fn failing_cell_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let grid = AblationGrid { instances_per_query: vec![1, 20], aggregators: vec![Aggregator::Max], ..tiny() };
        let r = run_ablation(&grid, dir.path());
        assert!(r.rows[0].error.is_some());
        assert!(r.rows[1].error.is_none());
    }
}
