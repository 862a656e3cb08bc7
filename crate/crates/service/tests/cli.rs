use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use bridgelab::feedback::{Matchup, PreferenceEntry};
use bridgelab_service::cli::run;
use bridgelab_service::manifest::Manifest;
use serde_json::Value;

const SMALL: &str = r#"
data_root = "data"

[schedule]
n_steps = 100

[net]
widths = [4, 8]
time_hidden = 8
reward_dim = 4
reward_hidden = 8

[train]
epochs = 9
batch_size = 2
t_min_index = 2
checkpoint_every = 1

[dataset]
n_subjects = 3
slices_per_subject = 2
size = 16
test_fraction = 0.34
"#;

struct Project {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Project {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("bridgelab.toml");
        fs::write(&config, SMALL).unwrap();
        Self { _dir: dir, root, config }
    }

    fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["bridgelab".to_string(), "--config".into(), self.config.display().to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        run(argv)
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    /// Most recent manifest written for `command`.
    fn manifest(&self, command: &str) -> Manifest {
        let runs = self.root.join("data/runs");
        let mut files: Vec<PathBuf> = fs::read_dir(&runs)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(&format!("{command}_")))
            .collect();
        files.sort();
        serde_json::from_slice(&fs::read(files.last().unwrap()).unwrap()).unwrap()
    }
}

fn jsonl_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn full_workflow() {
    let p = Project::new();
    assert_eq!(p.run(&["gen-data"]), 0);
    let ds = p.root.join("data/dataset");
    assert!(ds.join("subject_000/meta.json").is_file());
    assert!(ds.join("flat/test_z0/s2_z1.img").is_file());

    assert_eq!(p.run(&["train", "--out", &p.path("ckpt")]), 0);
    for e in 1..=9 {
        assert!(p.root.join(format!("ckpt/ckpt_{e}.sbsn")).is_file());
    }
    assert!(p.root.join("ckpt/history.csv").is_file());
    assert!(!p.manifest("train").inputs.is_empty());

    // Guided sampling costs two evaluations per step.
    let input = ds.join("flat/test_z0/s2_z0.img");
    let args = [
        "sample", "--ckpt", &p.path("ckpt/final.sbsn"), "--nfe", "10", "--w", "4", "--r", "good",
        "--seed", "3", "--det", "--in", &input.display().to_string(), "--out", &p.path("one.img"),
    ];
    assert_eq!(p.run(&args), 0);
    let m = p.manifest("sample");
    assert_eq!(m.evaluations, Some(20));
    assert_eq!(m.seed, 3);
    assert!(p.root.join("one.img").is_file());

    let args = ["sample", "--ckpt", &p.path("ckpt/final.sbsn"), "--w", "0", "--r", "bad", "--det", "false",
        "--in", &ds.join("flat/test_z0").display().to_string(), "--out", &p.path("pred")];
    assert_eq!(p.run(&args), 0);
    assert_eq!(p.manifest("sample").evaluations, Some(2 * 10));

    // 9 checkpoints x 6 scales = 54 candidates per group.
    let store = p.path("store");
    assert_eq!(p.run(&["candidates", "--ckpt-dir", &p.path("ckpt"), "--split", "test", "--out", &store]), 0);
    assert_eq!(jsonl_lines(&p.root.join("store/index.jsonl")), 2 * 54);
    assert_eq!(p.run(&["tournament", "--store", &store, "--rater", "oracle"]), 0);
    let log = fs::read_to_string(p.root.join("store/matchups.jsonl")).unwrap();
    let matchups: Vec<Matchup> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(matchups.len(), 2 * 53);
    for g in ["s2_z0", "s2_z1"] {
        assert_eq!(matchups.iter().filter(|m| m.group.to_string() == g).count(), 53);
    }
    let prefs = fs::read_to_string(p.root.join("store/prefs.jsonl")).unwrap();
    let prefs: Vec<PreferenceEntry> = prefs.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(prefs.len(), 2);
    assert!(prefs.iter().all(|e| e.r == 0 && e.pool_size == 54));
    // Running again is a no-op: everything is decided.
    assert_eq!(p.run(&["tournament", "--store", &store, "--rater", "oracle"]), 0);
    assert_eq!(jsonl_lines(&p.root.join("store/matchups.jsonl")), 2 * 53);
    assert_eq!(p.run(&["tournament", "--store", &store, "--rater", "human"]), 1);

    let args = ["train", "--out", &p.path("tuned"), "--epochs", "1", "--finetune-prefs",
        &p.path("store/prefs.jsonl"), "--store", &store, "--from", &p.path("ckpt/final.sbsn")];
    assert_eq!(p.run(&args), 0);
    assert!(p.root.join("tuned/final.sbsn").is_file());

    // Identical directories score perfectly.
    let clean = ds.join("flat/test_clean").display().to_string();
    let out = p.path("report.json");
    assert_eq!(p.run(&["eval", "--pred", &clean, "--ref", &clean, "--out", &out]), 0);
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["cases"], 2);
    assert_eq!(report["rmse"]["mean"], 0.0);
    assert_eq!(report["ssim"]["mean"], 1.0);
    assert!(report["arr"].is_null());
    let rows = fs::read_to_string(p.root.join("report.rows.csv")).unwrap();
    assert!(rows.starts_with("name,rmse,ssim,dice,artifact_score_before,artifact_score_after\n"));
    assert_eq!(rows.lines().count(), 3);

    let args = ["eval", "--pred", &p.path("pred"), "--ref", &clean, "--data", &ds.display().to_string(), "--out", &out];
    assert_eq!(p.run(&args), 0);
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(report["arr"].as_f64().unwrap() >= 0.0);
    assert!(report["rows"][0]["artifact_score_before"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_errors_exit_three() {
    let p = Project::new();
    fs::write(&p.config, "[sampler]\nscales = []\n").unwrap();
    assert_eq!(p.run(&["gen-data"]), 3);
    fs::write(&p.config, "[schedule\n").unwrap();
    assert_eq!(p.run(&["gen-data"]), 3);
    let missing = p.path("missing.toml");
    assert_eq!(run(vec!["bridgelab".into(), "--config".into(), missing, "gen-data".into()]), 3);
}

#[test]
fn runtime_failures_exit_one() {
    let p = Project::new();
    assert_eq!(p.run(&["serve", "--store", &p.path("nope")]), 1);
    assert_eq!(p.run(&["sample", "--ckpt", &p.path("nope.sbsn"), "--in", &p.path("x.img"), "--out", &p.path("y.img")]), 1);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_bridgelab");
    let status = Command::new(bin).arg("frobnicate").status().unwrap();
    assert_eq!(status.code(), Some(2));
    let p = Project::new();
    fs::write(&p.config, "bogus = 1\n").unwrap();
    let status = Command::new(bin)
        .args(["--config", p.config.to_str().unwrap(), "gen-data"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn data_root_env_override() {
    let p = Project::new();
    let bin = env!("CARGO_BIN_EXE_bridgelab");
    let elsewhere = p.root.join("elsewhere");
    let status = Command::new(bin)
        .env("BRIDGELAB_DATA_ROOT", &elsewhere)
        .args(["--config", p.config.to_str().unwrap(), "gen-data"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(elsewhere.join("dataset/subject_000/meta.json").is_file());
    assert!(!p.root.join("data/dataset").exists());
}
