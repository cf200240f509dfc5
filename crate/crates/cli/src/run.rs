//! Subcommand implementations.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mapu_core::bench::{format_table, plan_rows, run_bench, sweep_csv, BenchResult, Cell, Sweep};
use mapu_core::config;
use mapu_core::data::{
    load_dataset, normalize, save_dataset, synth_domain_pair_with, synth_target_holdout, ChannelStats, Dataset,
    DatasetMeta, ShiftSpec, SynthConfig, TimeSeriesBatch,
};
use mapu_core::eval::{evaluate, EvalResult};
use mapu_core::model::{ArchMeta, ModelBundle};
use mapu_core::pipeline::{adapt_target, init_bundle, pretrain_source, Precision, ScenarioData, TrainConfig};
use mapu_core::tensor::Real;
use mapu_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::args::{AdaptArgs, BenchArgs, Cli, Command, PretrainArgs, ReplayArgs, SynthArgs, SynthFlags, TrainFlags};
use crate::manifest::{write_json, write_text, RunManifest};

pub const NORM_FILE: &str = "norm.json";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
    /// At least one benchmark cell failed; everything else was written.
    CellsFailed,
    Other(String),
}

impl Failure {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Other(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::Contract(_) | Error::Dimension(_)) => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Other(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::CellsFailed => f.write_str("one or more benchmark cells failed"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

/// How one invocation resolves its training config.
pub struct Ctx {
    /// Arguments after the program name, as recorded in the manifest.
    pub args: Vec<String>,
    /// Replaces `--config` when replaying a manifest.
    pub file_layer: Option<Vec<(String, String)>>,
}

impl Ctx {
    /// Default, then config file (or replayed layer), then flags.
    fn resolve(&self, flags: &TrainFlags) -> Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::default();
        match (&self.file_layer, &flags.config) {
            (Some(layer), _) => config::apply_all(&mut cfg, layer)?,
            (None, Some(path)) => config::apply_all(&mut cfg, &config::load(path)?)?,
            (None, None) => {}
        }
        config::apply_all(&mut cfg, &flags.overrides())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn dispatch(cli: Cli, ctx: &Ctx) -> Outcome {
    match cli.command {
        Command::Synth(a) => synth(&a, ctx),
        Command::Pretrain(a) => pretrain(&a, ctx),
        Command::Adapt(a) => adapt(&a, ctx),
        Command::Bench(a) => bench(&a, ctx),
        Command::Replay(a) => replay(&a),
    }
}

/// Creates `dir`, refusing one that already holds files.
fn fresh_dir(dir: &Path) -> Outcome {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() {
            return Err(Failure::Usage(format!(
                "output directory {} is not empty; run directories are never reused",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn domain<'a>(ds: &'a Dataset, dir: &Path, id: &str) -> Result<&'a TimeSeriesBatch, Failure> {
    ds.domain(id).ok_or_else(|| {
        Failure::Usage(format!(
            "domain {id:?} not found in {} (available: {})",
            dir.display(),
            ds.meta.domains.join(", ")
        ))
    })
}

fn synth_pair(s: &SynthFlags) -> Result<(TimeSeriesBatch, TimeSeriesBatch, TimeSeriesBatch), Failure> {
    let cfg = SynthConfig {
        channels: s.channels,
        length: s.length,
        ..SynthConfig::default()
    };
    let shift = ShiftSpec {
        kind: s.shift.parse()?,
        magnitude: s.magnitude,
        seed: s.shift_seed,
    };
    let (src, tgt) = synth_domain_pair_with(&cfg, s.classes, s.per_class, &shift, s.data_seed)?;
    let holdout = synth_target_holdout(&cfg, s.classes, s.per_class, &shift, s.data_seed)?;
    Ok((src, tgt, holdout))
}

fn synth(a: &SynthArgs, ctx: &Ctx) -> Outcome {
    let started = Instant::now();
    fresh_dir(&a.out)?;
    let manifest = RunManifest::new("synth", &ctx.args, Default::default(), vec![a.synth.data_seed]);
    manifest.write(&a.out)?;
    let (src, tgt, holdout) = synth_pair(&a.synth)?;
    let ds = Dataset {
        meta: DatasetMeta {
            channels: src.channels(),
            length: src.length(),
            num_classes: a.synth.classes,
            domains: vec![src.domain_id.clone(), tgt.domain_id.clone(), holdout.domain_id.clone()],
        },
        domains: vec![src, tgt, holdout],
    };
    save_dataset(&a.out, &ds)?;
    let mut artifacts = vec!["meta.json".to_owned()];
    for d in &ds.meta.domains {
        artifacts.push(format!("{d}_x.f32"));
        artifacts.push(format!("{d}_y.u8"));
    }
    manifest.finish(&a.out, artifacts, started)
}

fn epoch_lines(columns: &[(&str, &[f64])]) -> String {
    let epochs = columns.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut out = String::new();
    for e in 0..epochs {
        let mut row = serde_json::Map::new();
        row.insert("epoch".into(), json!(e + 1));
        for (name, values) in columns {
            if let Some(v) = values.get(e) {
                row.insert((*name).into(), json!(v));
            }
        }
        out.push_str(&serde_json::Value::Object(row).to_string());
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct Score {
    mf1: f64,
    accuracy: f64,
}

impl From<&EvalResult> for Score {
    fn from(r: &EvalResult) -> Self {
        Score {
            mf1: r.mf1,
            accuracy: r.accuracy,
        }
    }
}

fn pretrain(a: &PretrainArgs, ctx: &Ctx) -> Outcome {
    let started = Instant::now();
    let cfg = ctx.resolve(&a.train)?;
    fresh_dir(&a.out)?;
    let manifest = RunManifest::new("pretrain", &ctx.args, config::materialize(&cfg), vec![cfg.seed]);
    manifest.write(&a.out)?;

    let ds = load_dataset(&a.data)?;
    let source = domain(&ds, &a.data, &a.domain)?;
    let mut artifacts = vec!["params.bin".to_owned(), "arch.json".to_owned()];
    let source = if cfg.normalize {
        let (batch, stats) = normalize(source, None)?;
        write_json(&a.out.join(NORM_FILE), &stats)?;
        artifacts.push(NORM_FILE.to_owned());
        batch
    } else {
        source.clone()
    };
    let arch = ArchMeta::standard(source.channels(), source.length(), ds.meta.num_classes);
    match cfg.precision {
        Precision::F32 => pretrain_at::<f32>(a, &cfg, arch, &source)?,
        Precision::F64 => pretrain_at::<f64>(a, &cfg, arch, &source)?,
    }
    artifacts.extend(["metrics.jsonl".to_owned(), "report.json".to_owned()]);
    manifest.finish(&a.out, artifacts, started)
}

fn pretrain_at<F: Real>(a: &PretrainArgs, cfg: &TrainConfig, arch: ArchMeta, source: &TimeSeriesBatch) -> Outcome {
    let bundle = init_bundle::<F>(arch, cfg.seed)?;
    let (bundle, curves) = pretrain_source(bundle, source, cfg, cfg.seed)?;
    bundle.save(&a.out)?;
    let fit = evaluate(&bundle, source)?;
    write_text(
        &a.out.join("metrics.jsonl"),
        &epoch_lines(&[("ce", &curves.ce), ("imputation", &curves.imputation)]),
    )?;
    write_json(
        &a.out.join("report.json"),
        &json!({
            "command": "pretrain",
            "domain": a.domain,
            "seed": cfg.seed,
            "source_fit": Score::from(&fit),
            "curves": curves,
        }),
    )
}

fn read_stats(path: &Path) -> Result<ChannelStats, Failure> {
    let raw = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn adapt(a: &AdaptArgs, ctx: &Ctx) -> Outcome {
    let started = Instant::now();
    let cfg = ctx.resolve(&a.train)?;
    fresh_dir(&a.out)?;
    let manifest = RunManifest::new("adapt", &ctx.args, config::materialize(&cfg), vec![cfg.seed]);
    manifest.write(&a.out)?;

    let ds = load_dataset(&a.data)?;
    let target = domain(&ds, &a.data, &a.target_domain)?;
    let eval = match &a.eval_domain {
        Some(id) => Some(domain(&ds, &a.data, id)?),
        None => target.labels().is_some().then_some(target),
    };
    let norm_path = a.bundle.join(NORM_FILE);
    let stats = if cfg.normalize && norm_path.exists() {
        Some(read_stats(&norm_path)?)
    } else {
        None
    };
    let prep = |b: &TimeSeriesBatch| -> Result<TimeSeriesBatch, Failure> {
        Ok(match &stats {
            Some(s) => normalize(b, Some(s))?.0,
            None => b.clone(),
        })
    };
    let target = prep(target)?;
    let eval = eval.map(prep).transpose()?;

    let mut artifacts = vec![
        "params.bin".to_owned(),
        "arch.json".to_owned(),
        "metrics.jsonl".to_owned(),
        "report.json".to_owned(),
    ];
    if let Some(s) = &stats {
        write_json(&a.out.join(NORM_FILE), s)?;
        artifacts.push(NORM_FILE.to_owned());
    }
    match cfg.precision {
        Precision::F32 => adapt_at::<f32>(a, &cfg, &ds.meta, &target, eval.as_ref())?,
        Precision::F64 => adapt_at::<f64>(a, &cfg, &ds.meta, &target, eval.as_ref())?,
    }
    if eval.is_some() {
        artifacts.push("confusion.csv".to_owned());
    }
    manifest.finish(&a.out, artifacts, started)
}

fn adapt_at<F: Real>(
    a: &AdaptArgs,
    cfg: &TrainConfig,
    meta: &DatasetMeta,
    target: &TimeSeriesBatch,
    eval: Option<&TimeSeriesBatch>,
) -> Outcome {
    let bundle = ModelBundle::<F>::load(&a.bundle)?;
    if bundle.arch.num_classes != meta.num_classes {
        return Err(Error::Contract(format!(
            "bundle predicts {} classes but the dataset has {}",
            bundle.arch.num_classes, meta.num_classes
        ))
        .into());
    }
    let before = eval.map(|e| evaluate(&bundle, e)).transpose()?;
    let (adapted, curves) = adapt_target(bundle, &target.unlabeled(), cfg, cfg.seed)?;
    adapted.save(&a.out)?;
    let after = eval.map(|e| evaluate(&adapted, e)).transpose()?;
    write_text(
        &a.out.join("metrics.jsonl"),
        &epoch_lines(&[("sf", &curves.sf), ("imputation", &curves.imputation), ("total", &curves.total)]),
    )?;
    if let Some(r) = &after {
        write_text(&a.out.join("confusion.csv"), &r.confusion.to_csv())?;
    }
    write_json(
        &a.out.join("report.json"),
        &json!({
            "command": "adapt",
            "target_domain": a.target_domain,
            "eval_domain": eval.map(|e| e.domain_id.clone()),
            "seed": cfg.seed,
            "source_only": before.as_ref().map(Score::from),
            "adapted": after.as_ref().map(Score::from),
            "curves": curves,
        }),
    )
}

fn slug(s: &str) -> String {
    s.replace("->", "_to_")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn bench_scenarios(a: &BenchArgs, cfg: &TrainConfig) -> Result<Vec<ScenarioData>, Failure> {
    if a.synthetic {
        if !a.scenarios.is_empty() {
            return Err(Failure::Usage("--scenario cannot be combined with --synthetic".into()));
        }
        let (src, tgt, holdout) = synth_pair(&a.synth)?;
        return Ok(vec![ScenarioData::new(a.synth.classes, src, tgt, Some(holdout), cfg.normalize)?]);
    }
    let dir = a
        .data
        .as_ref()
        .ok_or_else(|| Failure::Usage("bench needs --data with --scenario, or --synthetic".into()))?;
    if a.scenarios.is_empty() {
        return Err(Failure::Usage("empty scenario list: pass --scenario SRC:TGT at least once".into()));
    }
    let ds = load_dataset(dir)?;
    a.scenarios
        .iter()
        .map(|spec| {
            let parts: Vec<&str> = spec.split(':').collect();
            let (src, tgt, ev) = match parts.as_slice() {
                [s, t] => (*s, *t, None),
                [s, t, e] => (*s, *t, Some(*e)),
                _ => return Err(Failure::Usage(format!("scenario must be SRC:TGT or SRC:TGT:EVAL, got {spec:?}"))),
            };
            let eval = ev.map(|e| domain(&ds, dir, e).cloned()).transpose()?;
            Ok(ScenarioData::new(
                ds.meta.num_classes,
                domain(&ds, dir, src)?.clone(),
                domain(&ds, dir, tgt)?.clone(),
                eval,
                cfg.normalize,
            )?)
        })
        .collect()
}

fn results_csv(res: &BenchResult) -> String {
    let mut out = String::from("label,method,scenario,status,mean_mf1,std_mf1,source_only_mean_mf1\n");
    for row in &res.rows {
        for (cell, sc) in row.cells.iter().zip(&res.scenarios) {
            let method = serde_json::to_value(row.method).ok().and_then(|v| v.as_str().map(str::to_owned));
            let method = method.unwrap_or_default();
            match cell.report() {
                Some(r) => out.push_str(&format!(
                    "{},{method},{sc},ok,{},{},{}\n",
                    row.label, r.mean_mf1, r.std_mf1, r.source_only_mean_mf1
                )),
                None => out.push_str(&format!("{},{method},{sc},failed,,,\n", row.label)),
            }
        }
    }
    out
}

fn bench(a: &BenchArgs, ctx: &Ctx) -> Outcome {
    let started = Instant::now();
    let cfg = ctx.resolve(&a.train)?;
    let sweep = a.sweep.as_deref().map(Sweep::parse).transpose()?;
    let rows = plan_rows(&cfg, sweep.as_ref())?;
    let scenarios = bench_scenarios(a, &cfg)?;
    fresh_dir(&a.out)?;
    let manifest = RunManifest::new("bench", &ctx.args, config::materialize(&cfg), cfg.seed_list());
    manifest.write(&a.out)?;

    let mut res = run_bench(&scenarios, &rows, &cfg, a.jobs)?;
    res.sweep = sweep.clone();
    let table = format_table(&res);
    print!("{table}");
    write_json(&a.out.join("report.json"), &res)?;
    write_text(&a.out.join("table.txt"), &table)?;
    write_text(&a.out.join("results.csv"), &results_csv(&res))?;
    let mut artifacts = vec!["report.json".to_owned(), "table.txt".to_owned(), "results.csv".to_owned()];
    if let Some(sw) = &sweep {
        let name = format!("sweep_{}.csv", sw.param());
        write_text(&a.out.join(&name), &sweep_csv(&res, sw))?;
        artifacts.push(name);
    }
    for row in &res.rows {
        for (cell, sc) in row.cells.iter().zip(&res.scenarios) {
            let dir = PathBuf::from("cells").join(slug(&row.label)).join(slug(sc));
            match cell {
                Cell::Ok { report } => {
                    for run in &report.runs {
                        let name = dir.join(format!("confusion_seed{}.csv", run.seed));
                        write_text(&a.out.join(&name), &run.confusion.to_csv())?;
                        artifacts.push(name.display().to_string());
                        let name = dir.join(format!("metrics_seed{}.jsonl", run.seed));
                        let lines = epoch_lines(&[
                            ("pretrain_ce", &run.pretrain.ce),
                            ("pretrain_imputation", &run.pretrain.imputation),
                            ("adapt_sf", &run.adapt.sf),
                            ("adapt_imputation", &run.adapt.imputation),
                            ("adapt_total", &run.adapt.total),
                        ]);
                        write_text(&a.out.join(&name), &lines)?;
                        artifacts.push(name.display().to_string());
                    }
                }
                Cell::Failed { error } => eprintln!("cell {} / {sc} failed: {error}", row.label),
            }
        }
    }
    manifest.finish(&a.out, artifacts, started)?;
    if res.any_failed() {
        Err(Failure::CellsFailed)
    } else {
        Ok(())
    }
}

/// Stored arguments with `--config` dropped and `--out` pointed at `out`.
fn replay_args(stored: &[String], out: &Path) -> Vec<String> {
    let mut args = Vec::with_capacity(stored.len());
    let mut it = stored.iter();
    while let Some(a) = it.next() {
        if a == "--config" || a == "--out" {
            it.next();
        } else if !(a.starts_with("--config=") || a.starts_with("--out=")) {
            args.push(a.clone());
        }
    }
    args.push("--out".to_owned());
    args.push(out.display().to_string());
    args
}

fn replay(a: &ReplayArgs) -> Outcome {
    use clap::Parser;

    let manifest = RunManifest::read(&a.manifest)?;
    let out = std::path::absolute(&a.out).map_err(|e| Failure::io(&a.out, e))?;
    let args = replay_args(&manifest.args, &out);
    let cli = Cli::try_parse_from(std::iter::once("mapu".to_owned()).chain(args.iter().cloned()))
        .map_err(|e| Failure::Usage(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Failure::Usage("a replay manifest cannot replay itself".into()));
    }
    std::env::set_current_dir(&manifest.cwd).map_err(|e| Failure::io(&manifest.cwd, e))?;
    let ctx = Ctx {
        args,
        file_layer: Some(manifest.config.into_iter().collect()),
    };
    dispatch(cli, &ctx)
}
