use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alf_core::data::save_dataset;
use alf_core::synthetic::{mixed_types, separable};

const TINY: &str = r#"
seed = 3

[model]
d = 8
heads = 2
layers = 1
ffn_dim = 16

[model.sngp]
d_rf = 32

[pretrain]
steps = 4
batch_size = 16

[finetune]
max_steps = 6
batch_size = 16
eval_every = 3

[eval]
folds = 2

[select]
probe_epochs = 20
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ds = mixed_types(60, 1);
        save_dataset(&ds, &dir.path().join("data.csv"), &dir.path().join("schema.json"), Some(&dir.path().join("emb.f32"))).unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }

    fn alf(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_alf")).args(args).current_dir(self.dir.path()).output().unwrap()
    }

    fn data_args(&self) -> Vec<String> {
        ["--schema", &self.s("schema.json"), "--data", &self.s("data.csv"), "--embeddings", &self.s("emb.f32"), "--config", &self.s("tiny.toml")]
            .map(String::from)
            .to_vec()
    }
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_documents_subcommands_and_exit_codes() {
    let f = Fixture::new();
    let o = f.alf(&["--help"]);
    assert_ok(&o);
    let out = String::from_utf8_lossy(&o.stdout);
    for cmd in ["pretrain", "finetune", "predict", "eval", "benchmark", "select-features", "export-embeddings"] {
        assert!(out.contains(cmd), "{cmd} missing from help");
    }
    for line in ["2  usage", "3  config", "4  missing-file", "5  data", "6  checkpoint", "7  numeric"] {
        assert!(out.contains(line), "{line} missing from help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let f = Fixture::new();
    let o = f.alf(&["pretrain", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.starts_with("error[usage]:") && e.trim().lines().count() == 1, "{e}");
}

#[test]
fn missing_schema_is_a_config_error_naming_the_flag() {
    let f = Fixture::new();
    let o = f.alf(&["pretrain", "--data", &f.s("data.csv")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--schema"), "{}", stderr(&o));
}

#[test]
fn invalid_config_is_a_config_error() {
    let f = Fixture::new();
    std::fs::write(f.p("bad.toml"), "[finetune]\nval_fraction = 1.5\n").unwrap();
    let o = f.alf(&["finetune", "--schema", &f.s("schema.json"), "--data", &f.s("data.csv"), "--config", &f.s("bad.toml")]);
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(f.p("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    let o = f.alf(&["finetune", "--schema", &f.s("schema.json"), "--data", &f.s("data.csv"), "--config", &f.s("bad.toml")]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_file_and_corrupt_checkpoint_have_their_own_codes() {
    let f = Fixture::new();
    let o = f.alf(&["pretrain", "--schema", &f.s("schema.json"), "--data", &f.s("nope.csv"), "--config", &f.s("tiny.toml")]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    std::fs::write(f.p("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = f.alf(&["predict", "--checkpoint", &f.s("junk.ckpt"), "--input", &f.s("data.csv")]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
}

#[test]
fn dry_run_validates_and_writes_nothing() {
    let f = Fixture::new();
    let mut a = vec!["finetune".to_string(), "--dry-run".into(), "--out".into(), f.s("run")];
    a.extend(f.data_args());
    let o = f.alf(&args(&a));
    assert_ok(&o);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["rows"], 60);
    assert_eq!(summary["dry_run"], true);
    assert!(!f.p("run").exists());
}

#[test]
fn pipeline_from_pretraining_to_export() {
    let f = Fixture::new();
    let mut a = vec!["pretrain".to_string(), "--out".into(), f.s("pre")];
    a.extend(f.data_args());
    assert_ok(&f.alf(&args(&a)));
    let m = manifest(&f.p("pre"));
    for key in ["config", "seeds", "datasets", "git_describe", "wall_time_secs"] {
        assert!(!m[key].is_null(), "manifest lacks {key}");
    }
    assert_eq!(m["seeds"]["root"], 3);
    assert_eq!(m["datasets"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(std::fs::read_to_string(f.p("pre/pretrain_curve.jsonl")).unwrap().lines().count(), 4);

    let ft = [
        "finetune",
        "--checkpoint",
        &f.s("pre/model.ckpt"),
        "--data",
        &f.s("data.csv"),
        "--embeddings",
        &f.s("emb.f32"),
        "--config",
        &f.s("tiny.toml"),
        "--out",
        &f.s("ft"),
    ];
    assert_ok(&f.alf(&ft));
    assert!(manifest(&f.p("ft"))["checkpoint"]["sha256"].is_string());

    let ckpt = f.s("ft/model.ckpt");
    for run in ["p1", "p2"] {
        assert_ok(&f.alf(&["predict", "--checkpoint", &ckpt, "--input", &f.s("data.csv"), "--embeddings", &f.s("emb.f32"), "--out", &f.s(run)]));
    }
    let p1 = std::fs::read(f.p("p1/predictions.jsonl")).unwrap();
    assert_eq!(p1, std::fs::read(f.p("p2/predictions.jsonl")).unwrap());
    let first: serde_json::Value = serde_json::from_slice(p1.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(first["predictions"].as_array().unwrap().len(), 2);
    assert_eq!(first["predictions"][0]["calibrated"], true);

    let ev = ["eval", "--checkpoint", &ckpt, "--data", &f.s("data.csv"), "--embeddings", &f.s("emb.f32"), "--out", &f.s("ev")];
    assert_ok(&f.alf(&ev));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.p("ev/metrics.json")).unwrap()).unwrap();
    let auroc = metrics[0]["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));

    let ex = ["export-embeddings", "--checkpoint", &ckpt, "--data", &f.s("data.csv"), "--embeddings", &f.s("emb.f32"), "--pca", "--out", &f.s("ex")];
    assert_ok(&f.alf(&ex));
    assert_eq!(std::fs::metadata(f.p("ex/embeddings.f32")).unwrap().len(), 60 * 8 * 4);
    assert!(f.p("ex/embeddings.pca.tsv").exists());
}

#[test]
fn predict_accepts_rows_without_label_columns() {
    let f = Fixture::new();
    let mut a = vec!["finetune".to_string(), "--out".into(), f.s("ft")];
    a.extend(f.data_args());
    assert_ok(&f.alf(&args(&a)));
    let text = std::fs::read_to_string(f.p("data.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| header[i] != "churn" && header[i] != "tier").collect();
    let cut: String = text
        .lines()
        .take(2)
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| cells[i]).collect::<Vec<_>>().join(",") + "\n"
        })
        .collect();
    std::fs::write(f.p("one.csv"), cut).unwrap();
    let o = f.alf(&["predict", "--checkpoint", &f.s("ft/model.ckpt"), "--input", &f.s("one.csv"), "--embeddings", &f.s("emb.f32"), "--out", &f.s("p")]);
    assert_ok(&o);
    assert_eq!(std::fs::read_to_string(f.p("p/predictions.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn select_features_writes_trace_and_reduced_schema() {
    let f = Fixture::new();
    let mut a = vec!["select-features".to_string(), "--out".into(), f.s("sel")];
    a.extend(f.data_args());
    assert_ok(&f.alf(&args(&a)));
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.p("sel/selection_trace.json")).unwrap()).unwrap();
    assert!(trace["full_metric"].is_number());
    assert!(f.p("sel/schema.json").exists());
}

#[test]
fn benchmark_is_reproducible_and_reports_missing_data() {
    let f = Fixture::new();
    let o = f.alf(&["benchmark", "--dataset", "blastchar", "--data-dir", &f.s("data")]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("kaggle.com"), "{}", stderr(&o));

    let dir = f.p("data/adult");
    std::fs::create_dir_all(&dir).unwrap();
    save_dataset(&separable(80, 3, 0.3, 2), &dir.join("data.csv"), &dir.join("schema.json"), None).unwrap();
    let run = |out: &str| {
        f.alf(&["benchmark", "--dataset", "adult", "--data-dir", &f.s("data"), "--folds", "2", "--config", &f.s("tiny.toml"), "--threads", "2", "--out", &f.s(out)])
    };
    assert_ok(&run("b1"));
    assert_ok(&run("b2"));
    let a = std::fs::read(f.p("b1/metrics.json")).unwrap();
    assert_eq!(a, std::fs::read(f.p("b2/metrics.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["folds"], 2);
    assert_eq!(report["pretrain_steps"], 4);
    assert_ok(&f.alf(&["benchmark", "--dataset", "adult", "--data-dir", &f.s("data"), "--folds", "2", "--pretrain-steps", "0", "--config", &f.s("tiny.toml"), "--out", &f.s("b3")]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(f.p("b3/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["pretrain_steps"], 0);
    assert_eq!(manifest(&f.p("b1"))["threads"], 2);
}
