use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lapddpm::ingest::{write_dataset, CountMatrix};
use serde_json::Value;

const TINY: &str = r#"{
  "model": {"d_lat": 4, "d_hid": 8, "d_hid_mlp": 16, "k_cheb": 2, "n_enc_layers": 2,
            "n_score_layers": 2, "k_pe": 3, "time_embed_dim": 8, "label_embed_dim": 4},
  "preprocess": {"p_pca": 8},
  "train": {"knn_k": 4},
  "diffusion": {"n_steps": 40}
}"#;

fn lapddpm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lapddpm")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lapddpm(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    lapddpm(dir, args).status.code().unwrap()
}

/// Deterministic two-label count matrix.
fn counts(n: usize, n_genes: usize, offset: usize) -> CountMatrix {
    let labels: Vec<String> = (0..n).map(|i| ["A", "B"][i % 2].to_string()).collect();
    let data = (0..n)
        .flat_map(|i| (0..n_genes).map(move |j| (((i + offset) * 31 + j * 17) % 7 + if (i % 2 == 0) == (j < n_genes / 2) { 4 } else { 0 }) as u32))
        .collect();
    CountMatrix::with_string_labels(n, n_genes, data, &labels, (0..n_genes).map(|j| format!("g{j}")).collect()).unwrap()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        write_dataset(&root.join("raw"), &counts(40, 12, 0)).unwrap();
        write_dataset(&root.join("test"), &counts(20, 12, 100)).unwrap();
        fs::write(root.join("tiny.json"), TINY).unwrap();
        Self { _tmp: tmp, root }
    }

    fn dir(&self) -> &Path {
        &self.root
    }

    fn trained(&self) -> &Self {
        ok(self.dir(), &["--config", "tiny.json", "preprocess", "--input", "raw", "--out", "data.bin"]);
        ok(self.dir(), &["--config", "tiny.json", "train", "--data", "data.bin", "--out", "model.ckpt", "--epochs", "2", "--seed", "3"]);
        self
    }
}

fn json_lines(s: &str) -> Vec<Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn preprocess_reports_input_errors() {
    let ws = Workspace::new();
    let d = ws.dir();
    fs::create_dir(d.join("nolabels")).unwrap();
    fs::copy(d.join("raw/matrix.mtx"), d.join("nolabels/matrix.mtx")).unwrap();
    fs::copy(d.join("raw/genes.tsv"), d.join("nolabels/genes.tsv")).unwrap();
    assert_eq!(code(d, &["preprocess", "--input", "nolabels", "--out", "x.bin"]), 1);
    assert_eq!(code(d, &["preprocess", "--input", "raw", "--out", "x.bin", "--min-cells", "1000"]), 2);
    assert!(!d.join("x.bin").exists());
}

#[test]
fn train_logs_one_line_per_epoch() {
    let ws = Workspace::new();
    let d = ws.dir();
    ok(d, &["--config", "tiny.json", "preprocess", "--input", "raw", "--out", "data.bin"]);
    let log = json_lines(&ok(d, &["--config", "tiny.json", "train", "--data", "data.bin", "--out", "m.ckpt", "--epochs", "2"]));
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|l| l["perturb"] == "enabled" && l["l_total"].as_f64().unwrap().is_finite()));
    let log = json_lines(&ok(d, &["--config", "tiny.json", "train", "--data", "data.bin", "--out", "m.ckpt", "--epochs", "1", "--no-perturb"]));
    assert_eq!(log[0]["perturb"], "disabled");
    assert_eq!(code(d, &["train", "--data", "data.bin", "--out", "bad.ckpt", "--mask-fraction", "1.0"]), 2);
    assert!(!d.join("bad.ckpt").exists());
}

#[test]
fn generate_counts_labels_and_repeats_exactly() {
    let ws = Workspace::new();
    let d = ws.trained().dir();
    ok(d, &["generate", "--ckpt", "model.ckpt", "--n", "100", "--seed", "5", "--out", "g1"]);
    assert_eq!(fs::read_to_string(d.join("g1/labels.tsv")).unwrap().lines().count(), 100);
    ok(d, &["generate", "--ckpt", "model.ckpt", "--n", "100", "--seed", "5", "--out", "g2"]);
    assert_eq!(fs::read(d.join("g1/matrix.mtx")).unwrap(), fs::read(d.join("g2/matrix.mtx")).unwrap());
    ok(d, &["generate", "--ckpt", "model.ckpt", "--per-label", "A=5,B=3", "--out", "g3"]);
    let labels = fs::read_to_string(d.join("g3/labels.tsv")).unwrap();
    assert_eq!(labels.lines().filter(|l| *l == "A").count(), 5);
    assert_eq!(labels.lines().filter(|l| *l == "B").count(), 3);
    assert_eq!(code(d, &["generate", "--ckpt", "model.ckpt", "--per-label", "Z=5", "--out", "g4"]), 2);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("g1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_cells"], 100);
}

#[test]
fn eval_reports_and_aggregates() {
    let ws = Workspace::new();
    let d = ws.trained().dir();
    let selfrep: Value = serde_json::from_str(&ok(d, &["eval", "--real", "test", "--gen", "test", "--pcs", "5"])).unwrap();
    assert!(selfrep["mmd"]["mean"].as_f64().unwrap() < 1e-9);
    assert!(selfrep["wd"]["mean"].as_f64().unwrap() < 1e-9);

    ok(d, &["generate", "--ckpt", "model.ckpt", "--n", "30", "--out", "gen"]);
    let rep: Value =
        serde_json::from_str(&ok(d, &["eval", "--real", "test", "--gen", "gen", "--pcs", "5", "--per-label", "--seeds", "1,2", "--align-genes"]))
            .unwrap();
    assert_eq!(rep["seeds"], serde_json::json!([1, 2]));
    assert!(rep["mmd"]["std"].as_f64().unwrap() >= 0.0);
    assert!(rep["per_label"]["A"].is_object() && rep["per_label"]["B"].is_object());

    write_dataset(&d.join("other"), &counts(20, 10, 0)).unwrap();
    assert_eq!(code(d, &["eval", "--real", "test", "--gen", "other"]), 2);
}

#[test]
fn help_lists_config_keys() {
    let ws = Workspace::new();
    for sub in ["preprocess", "train", "generate", "eval", "attack"] {
        let out = lapddpm(ws.dir(), &[sub, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for key in ["train.mask_fraction", "perturb.epsilon", "diffusion.T", "eval.max_support"] {
            assert!(text.contains(key), "{sub} --help misses {key}");
        }
    }
}

#[test]
fn attack_reports_every_pair() {
    let ws = Workspace::new();
    let d = ws.trained().dir();
    ok(d, &["--config", "tiny.json", "train", "--data", "data.bin", "--out", "plain.ckpt", "--epochs", "1", "--no-perturb"]);
    let rows: Value = serde_json::from_str(&ok(
        d,
        &["attack", "--data", "data.bin", "--ckpt-a", "model.ckpt", "--ckpt-b", "plain.ckpt", "--fractions", "0.1", "--knn-k", "4"],
    ))
    .unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["drift"].as_f64().unwrap() >= 0.0));
}

fn pipeline_outputs(ws: &Workspace) -> Vec<Vec<u8>> {
    let d = ws.trained().dir();
    ok(d, &["generate", "--ckpt", "model.ckpt", "--n", "24", "--seed", "8", "--out", "gen"]);
    let report = ok(d, &["eval", "--real", "test", "--gen", "gen", "--pcs", "5", "--per-label"]);
    let mut files: Vec<Vec<u8>> = ["data.bin", "model.ckpt", "gen/matrix.mtx", "gen/labels.tsv", "gen/genes.tsv"]
        .iter()
        .map(|f| fs::read(d.join(f)).unwrap())
        .collect();
    files.push(report.into_bytes());
    files
}

#[test]
fn pipeline_is_reproducible() {
    assert_eq!(pipeline_outputs(&Workspace::new()), pipeline_outputs(&Workspace::new()));
}
