//! Flat `key = value` configuration.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Every key of
//! [`TrainConfig`] is addressable, and [`materialize`] lists them all with
//! their resolved values.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{config_err, Error, Result};
use crate::pipeline::TrainConfig;

pub const KEYS: &[&str] = &[
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.seed",
    "train.seeds",
    "train.precision",
    "train.checked",
    "train.normalize",
    "train.pretrain_imputer",
    "train.reset_bn_stats",
    "mask.num_blocks",
    "mask.ratio",
    "loss.alpha",
    "loss.shot_im_weight",
    "loss.shot_pl_weight",
    "sfda.method",
];

/// Parses config text into ordered key/value pairs. Unknown keys and
/// malformed lines are rejected.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", no + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(config_err!("line {}: unknown key {k:?}", no + 1));
        }
        out.push((k.to_owned(), v.to_owned()));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err!("{key}: expected true or false, got {v:?}")),
    }
}

/// Sets one key.
pub fn apply(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "train.epochs" => cfg.epochs = num(key, v)?,
        "train.batch_size" => cfg.batch_size = num(key, v)?,
        "train.lr" => cfg.lr = num(key, v)?,
        "train.weight_decay" => cfg.weight_decay = num(key, v)?,
        "train.seed" => cfg.seed = num(key, v)?,
        "train.seeds" => cfg.seeds_per_scenario = num(key, v)?,
        "train.precision" => cfg.precision = v.parse()?,
        "train.checked" => cfg.checked = flag(key, v)?,
        "train.normalize" => cfg.normalize = flag(key, v)?,
        "train.pretrain_imputer" => cfg.pretrain_imputer = flag(key, v)?,
        "train.reset_bn_stats" => cfg.reset_bn_stats = flag(key, v)?,
        "mask.num_blocks" => cfg.mask.num_blocks = num(key, v)?,
        "mask.ratio" => cfg.mask.mask_ratio = num(key, v)?,
        "loss.alpha" => cfg.weights.alpha = num(key, v)?,
        "loss.shot_im_weight" => cfg.weights.shot_im_weight = num(key, v)?,
        "loss.shot_pl_weight" => cfg.weights.shot_pl_weight = num(key, v)?,
        "sfda.method" => cfg.sfda = v.parse()?,
        other => return Err(config_err!("unknown key {other:?}")),
    }
    Ok(())
}

pub fn apply_all(cfg: &mut TrainConfig, pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs {
        apply(cfg, k, v)?;
    }
    Ok(())
}

/// Every key with its value in `cfg`, in a stable order.
pub fn materialize(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let b = |x: bool| x.to_string();
    let precision = match cfg.precision {
        crate::pipeline::Precision::F32 => "f32",
        crate::pipeline::Precision::F64 => "f64",
    };
    let sfda = match cfg.sfda {
        crate::pipeline::SfdaKind::Shot => "shot",
        crate::pipeline::SfdaKind::None => "none",
    };
    [
        ("train.epochs", cfg.epochs.to_string()),
        ("train.batch_size", cfg.batch_size.to_string()),
        ("train.lr", cfg.lr.to_string()),
        ("train.weight_decay", cfg.weight_decay.to_string()),
        ("train.seed", cfg.seed.to_string()),
        ("train.seeds", cfg.seeds_per_scenario.to_string()),
        ("train.precision", precision.to_owned()),
        ("train.checked", b(cfg.checked)),
        ("train.normalize", b(cfg.normalize)),
        ("train.pretrain_imputer", b(cfg.pretrain_imputer)),
        ("train.reset_bn_stats", b(cfg.reset_bn_stats)),
        ("mask.num_blocks", cfg.mask.num_blocks.to_string()),
        ("mask.ratio", cfg.mask.mask_ratio.to_string()),
        ("loss.alpha", cfg.weights.alpha.to_string()),
        ("loss.shot_im_weight", cfg.weights.shot_im_weight.to_string()),
        ("loss.shot_pl_weight", cfg.weights.shot_pl_weight.to_string()),
        ("sfda.method", sfda.to_owned()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect()
}
