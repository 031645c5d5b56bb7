use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adafuse::checkpoint::load_checkpoint;
use adafuse::manifest::load_manifest;
use tempfile::TempDir;

fn adafuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adafuse"))
        .args(args)
        .env("ADAFUSE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY_SYNTH: &str = r#"{"n_episodes":5,"clips_per_episode":3,
  "seq_len":{"acoustic":[2,3],"visual":[2,4],"language":[1,3]},"seed":3}"#;

const QUICK_RUN: &str = r#"{"epochs":2,"slave_epochs":1,"n_folds":1}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: TempDir::new().unwrap(),
        };
        f.write("synth.json", TINY_SYNTH);
        f.write("run.json", QUICK_RUN);
        let out = adafuse(&["generate", "--config", &f.p("synth.json"), "--out", &f.p("data.jsonl")]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).into_os_string().into_string().unwrap()
    }

    fn write(&self, name: &str, text: &str) {
        fs::write(self.path(name), text).unwrap();
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (data, config, out) = (self.p("data.jsonl"), self.p("run.json"), self.p(out));
        let mut args = vec!["train", "--data", &data, "--config", &config, "--out", &out];
        args.extend_from_slice(extra);
        adafuse(&args)
    }
}

fn csv_rows(path: &Path) -> (csv::StringRecord, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    let rows = r.records().map(Result::unwrap).collect();
    (header, rows)
}

fn column(header: &csv::StringRecord, name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn generate_writes_header_first_and_is_reproducible() {
    let f = Fixture::new();
    let text = fs::read_to_string(f.path("data.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["task"], "IPP");
    assert_eq!(first["episodes"].as_array().unwrap().len(), 5);
    assert_eq!(text.lines().count(), 1 + 15);

    let again = adafuse(&["generate", "--config", &f.p("synth.json"), "--out", &f.p("again.jsonl")]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(f.path("again.jsonl")).unwrap(), text.as_bytes());

    let other = adafuse(&["generate", "--config", &f.p("synth.json"), "--seed", "4", "--out", &f.p("other.jsonl")]);
    assert_eq!(code(&other), 0);
    assert_ne!(fs::read(f.path("other.jsonl")).unwrap(), text.as_bytes());
}

#[test]
fn generate_rejects_bad_config() {
    let f = Fixture::new();
    f.write("bad.json", r#"{"noise":{"acoustic":0.1,"visual":-1.0,"language":0.1}}"#);
    let out = adafuse(&["generate", "--config", &f.p("bad.json"), "--out", &f.p("x.jsonl")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise"));
    f.write("unknown.json", r#"{"sigma":1}"#);
    assert_eq!(code(&adafuse(&["generate", "--config", &f.p("unknown.json"), "--out", &f.p("x.jsonl")])), 2);
}

#[test]
fn train_writes_reports_diagnostics_and_checkpoints() {
    let f = Fixture::new();
    let out = f.train("run", &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = f.path("run");
    for name in ["report.csv", "weights.csv", "history.csv", "predictions.csv", "attention.json", "config.json", "fold_0.ckpt"] {
        assert!(run.join(name).is_file(), "missing {name}");
    }

    let (h, rows) = csv_rows(&run.join("weights.csv"));
    assert_eq!(rows.len(), 1);
    let sum: f64 = ["w_A", "w_V", "w_L"].iter().map(|c| rows[0][column(&h, c)].parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);

    let (h, rows) = csv_rows(&run.join("history.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| !r[column(&h, "ref_V")].is_empty()));

    // the reported metric is recomputable from the exported predictions
    let (ph, preds) = csv_rows(&run.join("predictions.csv"));
    let sq: Vec<f64> = preds
        .iter()
        .map(|r| {
            let y: f64 = r[column(&ph, "y_true")].parse().unwrap();
            let p: f64 = r[column(&ph, "y_pred")].parse().unwrap();
            (y - p) * (y - p)
        })
        .collect();
    let mse = sq.iter().sum::<f64>() / sq.len() as f64;
    let (rh, report) = csv_rows(&run.join("report.csv"));
    let metric: f64 = report[0][column(&rh, "metric")].parse().unwrap();
    assert!((mse - metric).abs() < 1e-12);
    assert_eq!(&report[1][column(&rh, "fold")], "mean");

    let manifest = load_manifest(f.path("data.jsonl")).unwrap();
    let attention: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("attention.json")).unwrap()).unwrap();
    let entries = attention.as_array().unwrap();
    assert_eq!(entries.len(), 3 * preds.len());
    for e in entries {
        let clip = manifest.clips.iter().find(|c| c.clip_id == e["clip_id"]).unwrap();
        let m = match e["modality"].as_str().unwrap() {
            "A" => adafuse_core::data::Modality::Acoustic,
            "V" => adafuse_core::data::Modality::Visual,
            _ => adafuse_core::data::Modality::Language,
        };
        assert_eq!(e["a"].as_array().unwrap().len(), clip.seq_len(m));
    }

    let ckpt = load_checkpoint(run.join("fold_0.ckpt")).unwrap();
    let w: f64 = ckpt.weights.w.iter().sum();
    assert!((w - 1.0).abs() < 1e-9);

    // same seed and output directory: identical files
    let first: Vec<Vec<u8>> = ["history.csv", "fold_0.ckpt"].iter().map(|n| fs::read(run.join(n)).unwrap()).collect();
    assert_eq!(code(&f.train("run", &[])), 0);
    let second: Vec<Vec<u8>> = ["history.csv", "fold_0.ckpt"].iter().map(|n| fs::read(run.join(n)).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn train_no_alignment_logs_zero_alignment_loss() {
    let f = Fixture::new();
    let out = f.train("noalign", &["--ablation", "no_alignment"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = csv_rows(&f.path("noalign").join("history.csv"));
    for r in &rows {
        assert_eq!(r[column(&h, "loss_align")].parse::<f64>().unwrap(), 0.0);
    }
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("noalign").join("config.json")).unwrap()).unwrap();
    assert_eq!(config["ablation"]["no_alignment"], true);
}

#[test]
fn train_exit_codes() {
    let f = Fixture::new();
    let missing = adafuse(&["train", "--data", &f.p("nope.jsonl"), "--config", &f.p("run.json"), "--out", &f.p("r")]);
    assert_eq!(code(&missing), 1);

    assert_eq!(code(&f.train("r", &["--ablation", "half"])), 2);
    f.write("typo.json", r#"{"epoch":3}"#);
    let typo = adafuse(&["train", "--data", &f.p("data.jsonl"), "--config", &f.p("typo.json"), "--out", &f.p("r")]);
    assert_eq!(code(&typo), 2);

    // five episodes cannot hold three rolling folds
    assert_eq!(code(&f.train("r", &["--n-folds", "3"])), 1);

    f.write("diverge.json", r#"{"epochs":3,"slave_epochs":1,"n_folds":1,"lr":1e200}"#);
    let div = adafuse(&["train", "--data", &f.p("data.jsonl"), "--config", &f.p("diverge.json"), "--out", &f.p("r")]);
    assert_eq!(code(&div), 3, "{}", String::from_utf8_lossy(&div.stderr));
    assert!(String::from_utf8_lossy(&div.stderr).contains("epoch"));
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let ok = adafuse(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let f = Fixture::new();
    // dropout in the config is ignored: the check always runs in eval mode
    f.write("drop.json", r#"{"dropout":0.9}"#);
    let drop = adafuse(&["gradcheck", "--config", &f.p("drop.json"), "--seed", "2"]);
    assert_eq!(code(&drop), 0, "{}", String::from_utf8_lossy(&drop.stdout));

    let bad = adafuse(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(code(&bad), 4);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("worst parameter"));
}

#[test]
fn sweep_and_sensitivity_tables() {
    let f = Fixture::new();
    f.write("grid.json", r#"{"lr":[0.001],"gamma":[0.1],"alpha":[0.5],"beta":[50]}"#);
    let (grid, data, config) = (f.p("grid.json"), f.p("data.jsonl"), f.p("run.json"));
    let sweep = |out: &str| adafuse(&["sweep", "--grid", &grid, "--data", &data, "--config", &config, "--out", &f.p(out)]);
    assert_eq!(code(&sweep("grid.csv")), 0);
    let (h, rows) = csv_rows(&f.path("grid.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][column(&h, "best")], "true");
    assert_eq!(code(&sweep("grid2.csv")), 0);
    assert_eq!(fs::read(f.path("grid.csv")).unwrap(), fs::read(f.path("grid2.csv")).unwrap());

    f.write("empty.json", r#"{"lr":[],"gamma":[0.1],"alpha":[0.5],"beta":[50]}"#);
    let empty = adafuse(&["sweep", "--grid", &f.p("empty.json"), "--data", &f.p("data.jsonl")]);
    assert_eq!(code(&empty), 2);

    let sens = adafuse(&["sensitivity", "--config", &f.p("run.json"), "--data", &f.p("data.jsonl"), "--out", &f.p("sens.csv")]);
    assert_eq!(code(&sens), 0, "{}", String::from_utf8_lossy(&sens.stderr));
    let (h, rows) = csv_rows(&f.path("sens.csv"));
    assert_eq!(rows.len(), 6);
    let params: Vec<&str> = rows.iter().map(|r| r.get(column(&h, "param")).unwrap()).collect();
    assert_eq!(params, ["alpha", "alpha", "beta", "beta", "gamma", "gamma"]);
}

#[test]
fn help_documents_every_command_and_flag() {
    let out = adafuse(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["generate", "train", "gradcheck", "sweep", "sensitivity"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    let out = adafuse(&["train", "--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--data", "--config", "--out", "--ablation", "--seed", "--epochs", "--n-folds", "--fold-scheme"] {
        assert!(text.contains(flag), "{flag}");
    }
    let out = adafuse(&["gradcheck", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--corrupt-gradient"));
}

#[test]
fn invalid_thread_cap_is_a_config_error() {
    let f = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_adafuse"))
        .args(["train", "--data", &f.p("data.jsonl"), "--config", &f.p("run.json"), "--out", &f.p("r")])
        .env("ADAFUSE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
