use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_polysemy");

fn polysemy(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_clear().output().expect("binary runs")
}

fn gen_small(dir: &Path) {
    let spec = dir.join("spec.json");
    std::fs::write(
        &spec,
        r#"{"instances_per_sense": 40, "pool_per_sense": 20, "synonym_images": 20, "junk_images": 10, "dim": 32}"#,
    )
    .unwrap();
    let out = polysemy(&["gen-synthetic", "--out", dir.to_str().unwrap(), "--spec", spec.to_str().unwrap(), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synthetic_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let cfg = dir.path().join("config.json");
    let out = polysemy(&["--threads", "2", "pipeline", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "candidates.json",
        "scored.json",
        "selected.json",
        "saliency.json",
        "instances.poly",
        "bags.json",
        "model.json",
        "outliers.json",
        "report.json",
        "run_manifest.json",
    ] {
        assert!(dir.path().join("out").join(name).is_file(), "missing {name}");
    }
}

#[test]
fn report_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let cfg = dir.path().join("config.json");
    let report = dir.path().join("out/report.json");
    assert!(polysemy(&["pipeline", "--config", cfg.to_str().unwrap()]).status.success());
    let first = std::fs::read(&report).unwrap();
    assert!(polysemy(&["--threads", "3", "pipeline", "--config", cfg.to_str().unwrap()]).status.success());
    assert_eq!(first, std::fs::read(&report).unwrap());
}

#[test]
fn missing_corpus_exits_with_discover_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let out = polysemy(&["discover", "--keyword", "subway", "--corpus", missing.to_str().unwrap(), "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).contains("discover"));

    gen_small(dir.path());
    std::fs::remove_file(dir.path().join("corpus.tsv")).unwrap();
    let cfg = dir.path().join("config.json");
    assert_eq!(polysemy(&["pipeline", "--config", cfg.to_str().unwrap()]).status.code(), Some(10));
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let cfg = dir.path().join("config.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["beta"] = serde_json::json!(-1.0);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = polysemy(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));

    assert_eq!(polysemy(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn validate_reports_dangling_ids() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let bank = dir.path().join("features.poly");
    let manifest = dir.path().join("manifest.json");
    let ok = polysemy(&["validate", "--bank", bank.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert!(ok.status.success());

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    v[0]["image_id"] = serde_json::json!("ghost");
    std::fs::write(&manifest, v.to_string()).unwrap();
    let bad = polysemy(&["validate", "--bank", bank.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert!(!bad.status.success());
}
