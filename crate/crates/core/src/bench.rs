//! Benchmark grids: rows are methods or sweep values, columns are
//! scenarios. Each `(scenario, seed)` unit pretrains once per distinct mask
//! setting and adapts every row from that shared source model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::eval::evaluate;
use crate::model::ModelBundle;
use crate::pipeline::{
    adapt_and_score, init_bundle, mean_std, pretrain_source, summarize, PretrainCurves, Precision, ScenarioData,
    ScenarioReport, SeedResult, SfdaKind, TrainConfig,
};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The pretrained source model, unadapted.
    SourceOnly,
    /// SHOT alone; the imputer is dropped before adaptation.
    Shot,
    /// SHOT plus `alpha` times the imputation loss.
    Mapu,
    /// Imputation loss alone.
    ImputationOnly,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::SourceOnly => "Source-only",
            Method::Shot => "SHOT",
            Method::Mapu => "MAPU",
            Method::ImputationOnly => "Imputation-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Alpha(Vec<f64>),
    MaskRatio(Vec<f64>),
}

impl Sweep {
    /// Parses `alpha=0.1,0.5` or `mask_ratio=0.125,0.25`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| config_err!("sweep must look like name=v1,v2,..., got {s:?}"))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| config_err!("bad sweep value {v:?}")))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(config_err!("empty sweep"));
        }
        match name.trim() {
            "alpha" => Ok(Sweep::Alpha(values)),
            "mask_ratio" => Ok(Sweep::MaskRatio(values)),
            other => Err(config_err!("cannot sweep {other:?} (expected alpha or mask_ratio)")),
        }
    }

    pub fn param(&self) -> &'static str {
        match self {
            Sweep::Alpha(_) => "alpha",
            Sweep::MaskRatio(_) => "mask_ratio",
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Sweep::Alpha(v) | Sweep::MaskRatio(v) => v,
        }
    }
}

/// One table row: a method run under a fully resolved config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub label: String,
    pub method: Method,
    pub cfg: TrainConfig,
}

/// Rows for a plain comparison (`sweep = None`) or a MAPU sweep.
pub fn plan_rows(base: &TrainConfig, sweep: Option<&Sweep>) -> Result<Vec<RowSpec>> {
    let rows: Vec<RowSpec> = match sweep {
        None => [Method::SourceOnly, Method::Shot, Method::Mapu]
            .into_iter()
            .map(|m| {
                let mut cfg = base.clone();
                if m == Method::Shot {
                    cfg.sfda = SfdaKind::Shot;
                    cfg.weights.alpha = 0.0;
                }
                RowSpec {
                    label: m.label().to_owned(),
                    method: m,
                    cfg,
                }
            })
            .collect(),
        Some(sw) => sw
            .values()
            .iter()
            .map(|&v| {
                let mut cfg = base.clone();
                match sw {
                    Sweep::Alpha(_) => cfg.weights.alpha = v,
                    Sweep::MaskRatio(_) => cfg.mask.mask_ratio = v,
                }
                RowSpec {
                    label: format!("{}={v}", sw.param()),
                    method: if base.sfda == SfdaKind::None { Method::ImputationOnly } else { Method::Mapu },
                    cfg,
                }
            })
            .collect(),
    };
    for r in &rows {
        r.cfg.validate()?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Cell {
    Ok { report: ScenarioReport },
    Failed { error: String },
}

impl Cell {
    pub fn report(&self) -> Option<&ScenarioReport> {
        match self {
            Cell::Ok { report } => Some(report),
            Cell::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    pub method: Method,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenarios: Vec<String>,
    pub seeds: Vec<u64>,
    pub sweep: Option<Sweep>,
    pub rows: Vec<RowResult>,
}

impl BenchResult {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().flat_map(|r| &r.cells).any(|c| c.report().is_none())
    }
}

fn pretrain_key(cfg: &TrainConfig) -> (usize, u64) {
    (cfg.mask.num_blocks, cfg.mask.mask_ratio.to_bits())
}

fn run_unit<F: Real>(data: &ScenarioData, rows: &[RowSpec], seed: u64) -> Vec<Result<SeedResult>> {
    let arch = data.arch();
    let mut cache: HashMap<(usize, u64), Result<(ModelBundle<F>, PretrainCurves)>> = HashMap::new();
    rows.iter()
        .map(|row| {
            let mut pre_cfg = row.cfg.clone();
            pre_cfg.pretrain_imputer = true;
            let entry = cache.entry(pretrain_key(&pre_cfg)).or_insert_with(|| {
                let bundle = init_bundle::<F>(arch.clone(), seed)?;
                pretrain_source(bundle, &data.source, &pre_cfg, seed)
            });
            let (pretrained, curves) = match entry {
                Ok(v) => v,
                Err(e) => return Err(config_err!("pretraining failed: {e}")),
            };
            match row.method {
                Method::SourceOnly => {
                    let r = evaluate(pretrained, &data.target_eval)?;
                    Ok(SeedResult {
                        seed,
                        mf1: r.mf1,
                        accuracy: r.accuracy,
                        source_only_mf1: r.mf1,
                        source_only_accuracy: r.accuracy,
                        pretrain: curves.clone(),
                        adapt: Default::default(),
                        confusion: r.confusion,
                    })
                }
                Method::Shot => {
                    let mut stripped = pretrained.clone();
                    stripped.imputer = None;
                    adapt_and_score(&stripped, curves.clone(), data, &row.cfg, seed)
                }
                Method::Mapu | Method::ImputationOnly => {
                    adapt_and_score(pretrained, curves.clone(), data, &row.cfg, seed)
                }
            }
        })
        .collect()
}

/// Runs every `(scenario, seed)` unit on a pool of `jobs` threads and
/// assembles the grid. Results do not depend on `jobs`.
pub fn run_bench(scenarios: &[ScenarioData], rows: &[RowSpec], base: &TrainConfig, jobs: usize) -> Result<BenchResult> {
    use rayon::prelude::*;

    if scenarios.is_empty() {
        return Err(config_err!("no scenarios to run"));
    }
    if rows.is_empty() {
        return Err(config_err!("no rows to run"));
    }
    base.validate()?;
    let seeds = base.seed_list();
    let units: Vec<(usize, u64)> = (0..scenarios.len())
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| config_err!("cannot start worker pool: {e}"))?;
    let outcomes: Vec<Vec<Result<SeedResult>>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(s, seed)| match base.precision {
                Precision::F32 => run_unit::<f32>(&scenarios[s], rows, seed),
                Precision::F64 => run_unit::<f64>(&scenarios[s], rows, seed),
            })
            .collect()
    });

    let mut result_rows = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let mut cells = Vec::with_capacity(scenarios.len());
        for (s, sc) in scenarios.iter().enumerate() {
            let mut runs = Vec::with_capacity(seeds.len());
            let mut failure = None;
            for (u, &(us, _)) in units.iter().enumerate() {
                if us != s {
                    continue;
                }
                match &outcomes[u][r] {
                    Ok(v) => runs.push(v.clone()),
                    Err(e) => {
                        failure.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            cells.push(match failure {
                Some(error) => Cell::Failed { error },
                None => Cell::Ok {
                    report: summarize(&sc.name, runs),
                },
            });
        }
        result_rows.push(RowResult {
            label: row.label.clone(),
            method: row.method,
            cells,
        });
    }
    Ok(BenchResult {
        scenarios: scenarios.iter().map(|s| s.name.clone()).collect(),
        seeds,
        sweep: None,
        rows: result_rows,
    })
}

/// Fixed-width text table of `mean±std` MF1 (in percent) with an AVG column.
pub fn format_table(res: &BenchResult) -> String {
    let mut header = vec!["Method".to_owned()];
    header.extend(res.scenarios.iter().cloned());
    header.push("AVG".to_owned());
    let mut lines = vec![header];
    for row in &res.rows {
        let mut line = vec![row.label.clone()];
        let mut means = Vec::new();
        for cell in &row.cells {
            match cell.report() {
                Some(r) => {
                    means.push(r.mean_mf1);
                    line.push(format!("{:.2}±{:.2}", 100.0 * r.mean_mf1, 100.0 * r.std_mf1));
                }
                None => line.push("FAILED".to_owned()),
            }
        }
        line.push(if means.len() == row.cells.len() {
            format!("{:.2}", 100.0 * mean_std(&means).0)
        } else {
            "FAILED".to_owned()
        });
        lines.push(line);
    }
    let cols = lines[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

/// `param,value,scenario,mean_mf1,std_mf1` rows for a sweep, one per cell
/// plus an `AVG` line per value.
pub fn sweep_csv(res: &BenchResult, sweep: &Sweep) -> String {
    let mut out = String::from("param,value,scenario,mean_mf1,std_mf1\n");
    for (row, &v) in res.rows.iter().zip(sweep.values()) {
        let mut means = Vec::new();
        for (cell, sc) in row.cells.iter().zip(&res.scenarios) {
            match cell.report() {
                Some(r) => {
                    means.push(r.mean_mf1);
                    out.push_str(&format!("{},{v},{sc},{},{}\n", sweep.param(), r.mean_mf1, r.std_mf1));
                }
                None => out.push_str(&format!("{},{v},{sc},FAILED,FAILED\n", sweep.param())),
            }
        }
        if means.len() == row.cells.len() {
            let (m, s) = mean_std(&means);
            out.push_str(&format!("{},{v},AVG,{m},{s}\n", sweep.param()));
        }
    }
    out
}
