//! Seeded stand-in for a web image collection around one polysemous keyword.
//!
//! Every sense is a cluster around an orthogonal center. `noise` is the RMS
//! norm of the per-image jitter (each coordinate gets `noise / sqrt(dim)`),
//! and `separation` is the distance between two centers in units of `noise`,
//! so cosine similarity inside a cluster stays high at any dimension.
//!
//! The corpus lists one primary query per sense, a few synonym queries that
//! reuse a sense's cluster (dedup should drop them), junk queries whose images
//! match nothing in the keyword pool, plus VERB and off-keyword lines that
//! discovery must ignore. Planted outliers are drawn uniformly on the sphere
//! of the center radius and carry no label.
//!
//! Each sense image's feature map holds its feature inside a square blob,
//! scaled so that the spatial mean equals the feature, over zero-mean
//! clutter. Outliers get the feature spread over the whole map instead,
//! unless `outlier_blobs` is set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::features::{self, FeatureBank, FeatureMap, FeatureMapBank, ImageRecord};
use crate::math;

const PRIMARY: [&str; 8] = ["sandwich", "train", "surfer", "station", "map", "card", "art", "token"];
const SYNONYM: [&str; 8] = ["hoagie", "metro", "rider", "platform", "route", "pass", "mural", "coin"];
const JUNK: [&str; 6] = ["logo", "font", "jersey", "mug", "poster", "sticker"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub senses: usize,
    pub instances_per_sense: usize,
    pub dim: usize,
    pub separation: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
    pub keyword: String,
    pub noise: f64,
    /// Labeled keyword-pool images per sense; these form the test set.
    pub pool_per_sense: usize,
    /// Senses that get a second, redundant query.
    pub synonyms: usize,
    pub synonym_images: usize,
    pub junk_queries: usize,
    pub junk_images: usize,
    pub map_height: usize,
    pub map_width: usize,
    pub blob: usize,
    /// Clutter level outside the blob, relative to the per-coordinate noise.
    pub clutter: f64,
    /// Give planted outliers a blob like sense images. By default their
    /// feature is spread evenly over the map: an off-topic image holds no
    /// compact object of any sense.
    pub outlier_blobs: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            senses: 4,
            instances_per_sense: 100,
            dim: 64,
            separation: 6.0,
            outlier_fraction: 0.1,
            seed: 0,
            keyword: "subway".into(),
            noise: 1.0,
            pool_per_sense: 50,
            synonyms: 2,
            synonym_images: 40,
            junk_queries: 2,
            junk_images: 20,
            map_height: 8,
            map_width: 8,
            blob: 3,
            clutter: 1.0,
            outlier_blobs: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |name, value: f64| Err(EvalError::OutOfRange { name, value });
        if self.senses < 2 {
            return fail("senses", self.senses as f64);
        }
        if self.dim < self.senses {
            return fail("dim", self.dim as f64);
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return fail("separation", self.separation);
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return fail("outlier_fraction", self.outlier_fraction);
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return fail("noise", self.noise);
        }
        if self.instances_per_sense < 2 {
            return fail("instances_per_sense", self.instances_per_sense as f64);
        }
        if self.blob == 0 || self.blob > self.map_height.min(self.map_width) {
            return fail("blob", self.blob as f64);
        }
        if !(self.clutter >= 0.0) {
            return fail("clutter", self.clutter);
        }
        if self.keyword.trim().is_empty() || self.keyword.contains(char::is_whitespace) {
            return fail("keyword", f64::NAN);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub keyword: String,
    /// Primary query text of each sense, indexed by sense label.
    pub senses: Vec<String>,
    /// Sense behind every query in the corpus; junk queries map to null.
    pub query_senses: BTreeMap<String, Option<usize>>,
    pub outliers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub corpus: String,
    pub features: FeatureBank,
    pub maps: FeatureMapBank,
    pub manifest: Vec<ImageRecord>,
    pub truth: SyntheticTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPaths {
    pub corpus: PathBuf,
    pub features: PathBuf,
    pub maps: PathBuf,
    pub manifest: PathBuf,
    pub truth: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            corpus: dir.join("corpus.tsv"),
            features: dir.join("features.poly"),
            maps: dir.join("maps.poly"),
            manifest: dir.join("manifest.json"),
            truth: dir.join("truth.json"),
        }
    }
}

fn word(list: &[&str], i: usize, fallback: &str) -> String {
    list.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("{fallback}{i}"))
}

fn narrow(v: f64) -> f64 {
    v as f32 as f64
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
    centers: Vec<Vec<f64>>,
    radius: f64,
    jitter: Normal<f64>,
}

impl Generator<'_> {
    fn cluster_point(&mut self, sense: usize) -> Vec<f64> {
        let center = &self.centers[sense];
        center.iter().map(|c| narrow(c + self.jitter.sample(&mut self.rng))).collect()
    }

    fn sphere_point(&mut self) -> Vec<f64> {
        let g: Vec<f64> = (0..self.spec.dim).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let n = math::norm(&g);
        g.iter().map(|v| narrow(v / n * self.radius)).collect()
    }

    /// With `blob`, the feature sits in a random square, scaled so the
    /// spatial mean is preserved, over zero-mean clutter. Without, the
    /// feature is spread over every cell under the same clutter.
    fn map_for(&mut self, feature: &[f64], blob: bool) -> FeatureMap {
        let (h, w) = (self.spec.map_height, self.spec.map_width);
        let b = if blob { self.spec.blob } else { 0 };
        let (y0, x0) = if blob {
            (self.rng.random_range(0..=h - b), self.rng.random_range(0..=w - b))
        } else {
            (0, 0)
        };
        let in_blob = |i: usize| (y0..y0 + b).contains(&(i / w)) && (x0..x0 + b).contains(&(i % w));
        let background: Vec<usize> = (0..h * w).filter(|&i| !in_blob(i)).collect();
        let (blob_scale, background_level) = if blob { ((h * w) as f64 / (b * b) as f64, 0.0) } else { (0.0, 1.0) };
        let clutter = Normal::new(0.0, self.spec.clutter * self.spec.noise / (self.spec.dim as f64).sqrt()).unwrap();
        let mut data = Vec::with_capacity(feature.len() * h * w);
        for &f in feature {
            let mut plane = vec![blob_scale * f; h * w];
            let noise: Vec<f64> = background.iter().map(|_| clutter.sample(&mut self.rng)).collect();
            let mean = if noise.is_empty() { 0.0 } else { noise.iter().sum::<f64>() / noise.len() as f64 };
            for (&i, n) in background.iter().zip(&noise) {
                plane[i] = background_level * f + n - mean;
            }
            data.extend(plane.into_iter().map(narrow));
        }
        FeatureMap::new(feature.len(), h, w, data).expect("map shape is consistent")
    }
}

struct QueryPlan {
    modifier: String,
    sense: Option<usize>,
    images: usize,
    count: u64,
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset, EvalError> {
    spec.validate()?;
    let m = spec.senses;
    let radius = spec.separation * spec.noise / std::f64::consts::SQRT_2;
    let centers = (0..m)
        .map(|k| (0..spec.dim).map(|d| if d == k { radius } else { 0.0 }).collect())
        .collect();
    let jitter = Normal::new(0.0, spec.noise / (spec.dim as f64).sqrt()).unwrap();
    let mut g = Generator {
        spec,
        rng: math::rng(spec.seed),
        centers,
        radius,
        jitter,
    };
    let keyword = spec.keyword.to_ascii_lowercase();

    let mut plans = Vec::new();
    for k in 0..m {
        let count = g.rng.random_range(500..2000);
        plans.push(QueryPlan { modifier: word(&PRIMARY, k, "sense"), sense: Some(k), images: spec.instances_per_sense, count });
    }
    for k in 0..spec.synonyms.min(m) {
        let count = g.rng.random_range(100..500);
        plans.push(QueryPlan { modifier: word(&SYNONYM, k, "alt"), sense: Some(k), images: spec.synonym_images.max(2), count });
    }
    for j in 0..spec.junk_queries {
        let count = g.rng.random_range(50..800);
        plans.push(QueryPlan { modifier: word(&JUNK, j, "junk"), sense: None, images: spec.junk_images.max(2), count });
    }

    let mut corpus = String::new();
    for (i, p) in plans.iter().enumerate() {
        if i == 0 && p.count > 1 {
            // split across two lines to exercise aggregation
            let half = p.count / 2;
            writeln!(corpus, "{}\t{keyword}\tNOUN\t{half}", p.modifier).unwrap();
            writeln!(corpus, "{}\t{keyword}\tNOUN\t{}", p.modifier, p.count - half).unwrap();
        } else {
            writeln!(corpus, "{}\t{keyword}\tNOUN\t{}", p.modifier, p.count).unwrap();
        }
    }
    writeln!(corpus, "ride\t{keyword}\tVERB\t900").unwrap();
    writeln!(corpus, "take\t{keyword}\tVERB\t700").unwrap();
    writeln!(corpus, "{}\tbread\tNOUN\t300", word(&PRIMARY, 0, "sense")).unwrap();

    let mut features = FeatureBank::new(spec.dim).expect("dim validated");
    let mut maps = FeatureMapBank::new(spec.dim, spec.map_height, spec.map_width).expect("dims validated");
    let mut manifest = Vec::new();
    let mut outliers = Vec::new();
    let mut add = |g: &mut Generator, id: String, query: &str, label: Option<usize>, feature: Vec<f64>, blob: bool| {
        let map = g.map_for(&feature, blob);
        features.insert(id.clone(), feature).expect("unique id");
        maps.insert(id.clone(), map).expect("unique id");
        manifest.push(ImageRecord { image_id: id, source_query: Some(query.to_string()), label });
    };

    let mut pool_senses: Vec<usize> = (0..m).flat_map(|k| std::iter::repeat_n(k, spec.pool_per_sense)).collect();
    pool_senses.shuffle(&mut g.rng);
    for (i, &k) in pool_senses.iter().enumerate() {
        let f = g.cluster_point(k);
        add(&mut g, format!("pool-{i:05}"), &keyword, Some(k), f, true);
    }

    for p in &plans {
        let query = format!("{keyword} {}", p.modifier);
        let planted = match p.sense {
            Some(_) => (p.images as f64 * spec.outlier_fraction).round() as usize,
            None => 0,
        };
        let mut is_outlier: Vec<bool> = (0..p.images).map(|j| j < planted).collect();
        is_outlier.shuffle(&mut g.rng);
        for (j, &out) in is_outlier.iter().enumerate() {
            let id = format!("{}-{j:04}", p.modifier);
            let (f, label) = match (p.sense, out) {
                (Some(k), false) => (g.cluster_point(k), Some(k)),
                _ => (g.sphere_point(), None),
            };
            if out {
                outliers.push(id.clone());
            }
            add(&mut g, id, &query, label, f, !out || spec.outlier_blobs);
        }
    }

    let truth = SyntheticTruth {
        senses: (0..m).map(|k| format!("{keyword} {}", word(&PRIMARY, k, "sense"))).collect(),
        query_senses: plans.iter().map(|p| (format!("{keyword} {}", p.modifier), p.sense)).collect(),
        keyword,
        outliers,
    };
    Ok(SyntheticDataset { spec: spec.clone(), corpus, features, maps, manifest, truth })
}

impl SyntheticDataset {
    /// Writes corpus, banks, manifest and truth into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> io::Result<SyntheticPaths> {
        fs::create_dir_all(dir)?;
        let paths = SyntheticPaths::in_dir(dir);
        fs::write(&paths.corpus, &self.corpus)?;
        features::save_feature_bank(&self.features, &paths.features).map_err(io::Error::other)?;
        features::save_feature_map_bank(&self.maps, &paths.maps).map_err(io::Error::other)?;
        let mut sink = BufWriter::new(File::create(&paths.manifest)?);
        features::write_manifest(&self.manifest, &mut sink).map_err(io::Error::other)?;
        sink.flush()?;
        fs::write(&paths.truth, serde_json::to_string_pretty(&self.truth)? + "\n")?;
        Ok(paths)
    }
}
