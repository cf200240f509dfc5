use std::path::Path;
use std::process::{Command, Output};

use mapu_core::data::{load_dataset, save_dataset, Dataset};
use mapu_core::model::{ArchMeta, ModelBundle};
use mapu_core::pipeline::init_bundle;
use tempfile::TempDir;

fn mapu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapu"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn mapu")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", "ds", "--per-class", "12"];
    args.extend_from_slice(extra);
    let o = mapu(dir, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pretrain_then_adapt_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, &[]);
    let o = mapu(d, &["pretrain", "--data", "ds", "--domain", "src", "--out", "pre", "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["params.bin", "arch.json", "norm.json", "manifest.json", "metrics.jsonl", "report.json"] {
        assert!(d.join("pre").join(f).exists(), "missing {f}");
    }
    let o = mapu(
        d,
        &["adapt", "--bundle", "pre", "--data", "ds", "--target-domain", "tgt", "--out", "ad", "--epochs", "2"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(d.join("ad/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ad/report.json")).unwrap()).unwrap();
    assert!(report["adapted"]["mf1"].as_f64().is_some());
    assert!(d.join("ad/confusion.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("ad/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train.epochs"], "2");
    assert_eq!(manifest["config"]["loss.alpha"], "0.5");
    assert!(manifest["wall_clock_secs"].as_f64().is_some());
}

#[test]
fn missing_data_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = mapu(tmp.path(), &["pretrain", "--domain", "src", "--out", "pre"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn zero_epochs_saves_initialization() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, &[]);
    let o = mapu(
        d,
        &["pretrain", "--data", "ds", "--domain", "src", "--out", "pre", "--epochs", "0", "--seed", "7"],
    );
    assert_eq!(code(&o), 0);
    let saved = ModelBundle::<f32>::load(&d.join("pre")).unwrap();
    let init = init_bundle::<f32>(ArchMeta::standard(1, 64, 3), 7).unwrap();
    assert!(saved.same_values(&init));
}

#[test]
fn channel_mismatch_is_contract_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, &[]);
    let o = mapu(d, &["synth", "--out", "wide", "--per-class", "4", "--channels", "9"]);
    assert_eq!(code(&o), 0);
    let o = mapu(d, &["pretrain", "--data", "wide", "--domain", "src", "--out", "pre", "--epochs", "0"]);
    assert_eq!(code(&o), 0);
    let o = mapu(
        d,
        &["adapt", "--bundle", "pre", "--data", "ds", "--target-domain", "tgt", "--out", "ad", "--epochs", "1"],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn imputation_only_adaptation_runs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, &[]);
    assert_eq!(code(&mapu(d, &["pretrain", "--data", "ds", "--domain", "src", "--out", "pre", "--epochs", "1"])), 0);
    let o = mapu(
        d,
        &[
            "adapt", "--bundle", "pre", "--data", "ds", "--target-domain", "tgt", "--out", "ad", "--epochs", "1",
            "--sfda", "none",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ad/report.json")).unwrap()).unwrap();
    assert_eq!(report["curves"]["sf"].as_array().unwrap().len(), 0);
}

#[test]
fn run_directories_are_not_reused() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, &[]);
    let o = mapu(d, &["synth", "--out", "ds"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_precedence() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, &[]);
    std::fs::write(d.join("run.cfg"), "train.epochs = 0\nloss.alpha = 0.25\ntrain.seed = 3\n").unwrap();
    let o = mapu(
        d,
        &["pretrain", "--data", "ds", "--domain", "src", "--out", "pre", "--config", "run.cfg", "--seed", "5"],
    );
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("pre/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["train.epochs"], "0");
    assert_eq!(m["config"]["loss.alpha"], "0.25");
    assert_eq!(m["config"]["train.seed"], "5");
    assert_eq!(m["config"]["train.batch_size"], "32");

    std::fs::write(d.join("bad.cfg"), "loss.beta = 1\n").unwrap();
    let o = mapu(d, &["pretrain", "--data", "ds", "--domain", "src", "--out", "p2", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_requires_scenarios() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, &[]);
    assert_eq!(code(&mapu(d, &["bench", "--data", "ds", "--out", "b"])), 2);
    assert_eq!(code(&mapu(d, &["bench", "--out", "b"])), 2);
    assert_eq!(code(&mapu(d, &["bench", "--data", "ds", "--scenario", "src", "--out", "b"])), 2);
}

#[test]
fn bench_sweep_emits_csv_and_table() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let o = mapu(
        d,
        &[
            "bench", "--synthetic", "--per-class", "8", "--epochs", "1", "--seeds", "2", "--sweep",
            "mask_ratio=0.125,0.25,0.5", "--out", "b",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("b/sweep_mask_ratio.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,value,scenario,mean_mf1,std_mf1");
    assert_eq!(lines.iter().filter(|l| l.contains(",AVG,")).count(), 3);
    let table = std::fs::read_to_string(d.join("b/table.txt")).unwrap();
    assert!(table.contains("mask_ratio=0.125"));
    assert!(table.contains("±"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("b/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][0]["cells"][0]["report"]["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn failed_cell_exits_one_and_marks_table() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, &[]);
    // Two target samples cannot seed three pseudo-label centroids.
    let ds = load_dataset(&d.join("ds")).unwrap();
    let tiny = ds.domain("tgt").unwrap().select(&[0, 1]).unwrap();
    let mut small = Dataset {
        meta: ds.meta.clone(),
        domains: vec![ds.domain("src").unwrap().clone(), tiny],
    };
    small.meta.domains = vec!["src".into(), "tgt".into()];
    save_dataset(&d.join("small"), &small).unwrap();
    let o = mapu(
        d,
        &[
            "bench", "--data", "small", "--scenario", "src:tgt", "--epochs", "1", "--seeds", "1", "--out", "b",
        ],
    );
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(d.join("b/table.txt")).unwrap();
    assert!(table.contains("FAILED"));
    assert!(table.lines().any(|l| l.starts_with("Source-only") && !l.contains("FAILED")));
}
