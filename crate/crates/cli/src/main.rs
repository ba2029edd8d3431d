//! `polysemy`: batch front end for the disambiguation pipeline.
//!
//! Every stage subcommand takes the pipeline seed and derives its own
//! stream the same way `pipeline` does, so running the stages one by one
//! reproduces a full run. Exit status is 0 on success, 2 for config or
//! usage errors and 10..=17 for a failure in a given stage.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polysemy::corpus::{normalize_token, CandidateQuery};
use polysemy::dedup::{DedupParams, ScorerHyper};
use polysemy::eval::{generate_synthetic_dataset, run_ablation, AblationGrid, SyntheticSpec};
use polysemy::features::{self, FeatureBank, ImageRecord};
use polysemy::math::derive_seed;
use polysemy::matching::MatchParams;
use polysemy::mil::{Aggregator, MilConfig, MilModel};
use polysemy::pipeline::stages::{self, BagSpec, MatchOutput, SelectedQuery};
use polysemy::pipeline::{
    load_config, read_json, run_pipeline, write_json, BoxError, PipelineConfig, PipelineError, Stage, StageContext,
};
use polysemy::saliency::GapHyper;

#[derive(Parser, Debug)]
#[command(name = "polysemy", version, about = "Visual polysemy disambiguation over precomputed features")]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract candidate queries for a keyword from an n-gram corpus.
    Discover {
        #[arg(long)]
        keyword: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidates by visual agreement with the keyword pool and keep the top N.
    Match {
        /// Feature bank holding the keyword pool and the candidates' images.
        #[arg(long = "keyword-bank")]
        keyword_bank: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        /// Defaults to the candidates' keyword.
        #[arg(long)]
        keyword: Option<String>,
        #[arg(long, default_value_t = 0.75)]
        tau: f64,
        #[arg(long, default_value_t = 10)]
        topn: usize,
        #[arg(long = "per-query-images", default_value_t = 5)]
        per_query_images: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a set of mutually distinct queries from the ranked ones.
    Dedup {
        #[arg(long)]
        scored: PathBuf,
        /// One or more feature banks; ids must not repeat across them.
        #[arg(long, num_args = 1.., required = true)]
        banks: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        #[arg(long, default_value_t = 30.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 16)]
        restarts: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the GAP head and cut one instance feature per image.
    Saliency {
        #[arg(long)]
        maps: PathBuf,
        /// JSON object mapping image id to class index. Other images in the
        /// map bank are localized under the head's predicted class.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the multi-instance classifier.
    Train {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        bags: PathBuf,
        #[arg(long, default_value = "max")]
        aggregator: Aggregator,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long = "bag-size", default_value_t = 5)]
        bag_size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        model: PathBuf,
    },
    /// Classify the labeled test images and report accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "test-bank")]
        test_bank: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the aggregator x instances x lr grid on synthetic data.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where cell data and outputs go (default: next to the report).
        #[arg(long = "work-dir")]
        work_dir: Option<PathBuf>,
    },
    /// Run every stage from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check that every manifest id resolves in a feature bank.
    Validate {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic dataset plus a ready-to-run config.json.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// JSON SyntheticSpec; flags below override its fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        senses: Option<usize>,
        #[arg(long = "instances-per-sense")]
        instances_per_sense: Option<usize>,
        #[arg(long = "outlier-fraction")]
        outlier_fraction: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn ensure_parent(path: &Path) -> std::result::Result<(), BoxError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_out<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path).stage(Stage::Io)?;
    write_json(path, value).stage(Stage::Io)
}

fn load_bank(path: &Path, stage: Stage) -> Result<FeatureBank> {
    features::load_feature_bank(path).map_err(|e| format!("{}: {e}", path.display())).stage(stage)
}

fn load_manifest(path: &Path, stage: Stage) -> Result<Vec<ImageRecord>> {
    features::load_manifest_file(path).map_err(|e| format!("{}: {e}", path.display())).stage(stage)
}

fn merge_banks(paths: &[PathBuf], stage: Stage) -> Result<FeatureBank> {
    let mut banks = paths.iter().map(|p| load_bank(p, stage));
    let mut merged = banks.next().expect("clap requires one bank")?;
    for bank in banks {
        let bank = bank?;
        for (id, row) in bank.iter() {
            merged.insert(id, row.to_vec()).stage(stage)?;
        }
    }
    Ok(merged)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Discover { keyword, corpus, out } => {
            let candidates = stages::discover(&keyword, &corpus).stage(Stage::Discover)?;
            log::info!("{} candidates", candidates.len());
            write_out(&out, &candidates)
        }
        Command::Match { keyword_bank, manifest, candidates, keyword, tau, topn, per_query_images, out } => {
            let candidates: Vec<CandidateQuery> = read_json(&candidates).stage(Stage::Match)?;
            let keyword = match keyword.or_else(|| candidates.first().map(|c| c.keyword.clone())) {
                Some(k) => k,
                None => return Err(PipelineError::new(Stage::Match, "no candidates and no --keyword")),
            };
            let bank = load_bank(&keyword_bank, Stage::Match)?;
            let manifest = load_manifest(&manifest, Stage::Match)?;
            let params = MatchParams { similarity_threshold: tau, top_n: topn, per_query_images };
            let matched = stages::match_queries(&keyword, &candidates, &bank, &manifest, &params).stage(Stage::Match)?;
            write_out(&out, &matched)
        }
        Command::Dedup { scored, banks, manifest, alpha, beta, lambda, restarts, seed, out } => {
            let matched: MatchOutput = read_json(&scored).stage(Stage::Dedup)?;
            let bank = merge_banks(&banks, Stage::Dedup)?;
            let manifest = load_manifest(&manifest, Stage::Dedup)?;
            let params = DedupParams { alpha, beta, lambda, ..DedupParams::default() };
            let hyper = ScorerHyper { seed: derive_seed(seed, 1), ..ScorerHyper::default() };
            let dedup = stages::dedup_queries(&matched.ranked, &bank, &manifest, &params, &hyper, restarts, derive_seed(seed, 2))
                .stage(Stage::Dedup)?;
            write_out(&out, &dedup)
        }
        Command::Saliency { maps, labels, out, report, seed } => {
            let labels: BTreeMap<String, usize> = read_json(&labels).stage(Stage::Config)?;
            let maps = features::load_feature_map_bank(&maps).stage(Stage::Saliency)?;
            let labels: Vec<(String, usize)> = labels.into_iter().collect();
            let labeled: BTreeSet<&str> = labels.iter().map(|(id, _)| id.as_str()).collect();
            let extra: Vec<String> = maps.iter().map(|(id, _)| id).filter(|id| !labeled.contains(id)).map(String::from).collect();
            let hyper = GapHyper { seed: derive_seed(seed, 3), ..GapHyper::default() };
            let (output, bank) = stages::extract_instances(&maps, &labels, &extra, &hyper).stage(Stage::Saliency)?;
            write_out(&report, &output)?;
            ensure_parent(&out).stage(Stage::Io)?;
            features::save_feature_bank(&bank, &out).stage(Stage::Io)?;
            Ok(())
        }
        Command::Train { instances, bags, aggregator, epochs, lr, bag_size, seed, model } => {
            let spec: BagSpec = read_json(&bags).stage(Stage::Train)?;
            let bank = load_bank(&instances, Stage::Train)?;
            let config = MilConfig { lr, epochs, bag_size, seed: derive_seed(seed, 4), aggregator };
            let training = stages::train_model(&spec, &bank, &config).stage(Stage::Train)?;
            log::info!("final loss {:?}", training.loss_curve.last());
            write_out(&model, &training.model)
        }
        Command::Eval { model, test_bank, manifest, out } => {
            let model: MilModel = read_json(&model).stage(Stage::Eval)?;
            let bank = load_bank(&test_bank, Stage::Eval)?;
            let manifest = load_manifest(&manifest, Stage::Eval)?;
            let report = stages::evaluate(&model, &bank, &manifest).stage(Stage::Eval)?;
            println!("aca {:.4}  micro {:.4}  n={}", report.aca, report.micro_accuracy, report.test_count);
            write_out(&out, &report)
        }
        Command::Ablate { grid, out, work_dir } => {
            let text = std::fs::read_to_string(&grid).map_err(|e| format!("{}: {e}", grid.display())).stage(Stage::Config)?;
            let grid: AblationGrid = serde_json::from_str(&text).stage(Stage::Config)?;
            let work_dir = work_dir.unwrap_or_else(|| {
                let parent = out.parent().unwrap_or(Path::new("."));
                parent.join("ablation-work")
            });
            let report = run_ablation(&grid, &work_dir);
            for row in &report.rows {
                match (&row.error, row.aca) {
                    (Some(e), _) => println!("{:>3} {:>3} n={:<4} lr={} error: {e}", row.index, row.aggregator, row.instances_per_query, row.lr),
                    (None, Some(aca)) => println!("{:>3} {:>3} n={:<4} lr={} aca {aca:.4}", row.index, row.aggregator, row.instances_per_query, row.lr),
                    (None, None) => {}
                }
            }
            if let Some(o) = &report.max_vs_avg {
                println!("{o}");
            }
            write_out(&out, &report)
        }
        Command::Pipeline { config } => {
            let config = load_config(&config).map_err(|e| format!("{}: {e}", config.display())).stage(Stage::Config)?;
            let summary = run_pipeline(&config)?;
            let selected: Vec<&str> = summary.selected.iter().map(|s: &SelectedQuery| s.query.as_str()).collect();
            println!("selected {selected:?}");
            println!("aca {:.4}  micro {:.4}", summary.report.aca, summary.report.micro_accuracy);
            if let Some(o) = &summary.report.outliers {
                println!("outliers flagged {}  recall {:.4}  precision {:.4}", o.flagged, o.recall, o.precision);
            }
            println!("artifacts in {}", summary.output_dir.display());
            Ok(())
        }
        Command::Validate { bank, manifest } => {
            let bank = load_bank(&bank, Stage::Io)?;
            let manifest = load_manifest(&manifest, Stage::Io)?;
            let summary = features::validate(&bank, &manifest).stage(Stage::Io)?;
            println!("{}", serde_json::to_string(&summary).stage(Stage::Io)?);
            Ok(())
        }
        Command::GenSynthetic { out, spec, seed, senses, instances_per_sense, outlier_fraction } => {
            let mut spec: SyntheticSpec = match spec {
                Some(p) => read_json(&p).stage(Stage::Config)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(s) = senses {
                spec.senses = s;
            }
            if let Some(n) = instances_per_sense {
                spec.instances_per_sense = n;
            }
            if let Some(f) = outlier_fraction {
                spec.outlier_fraction = f;
            }
            let data = generate_synthetic_dataset(&spec).stage(Stage::Config)?;
            data.write_to_dir(&out).stage(Stage::Io)?;
            let mut config = PipelineConfig::new(
                normalize_token(&spec.keyword),
                "corpus.tsv".into(),
                "features.poly".into(),
                "maps.poly".into(),
                "manifest.json".into(),
                "out".into(),
                spec.seed,
            );
            config.truth = Some("truth.json".into());
            write_out(&out.join("config.json"), &config)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
