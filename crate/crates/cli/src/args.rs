use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mapu", version, about = "Source-free time-series domain adaptation with temporal imputation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target dataset directory.
    Synth(SynthArgs),
    /// Train encoder, classifier and imputer on a labelled source domain.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained bundle to an unlabelled target domain.
    Adapt(AdaptArgs),
    /// Run a method comparison or sweep over scenarios and seeds.
    Bench(BenchArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

/// Training overrides. Anything left unset falls back to the config file,
/// then to the built-in default.
#[derive(Clone, Debug, Default, Args)]
pub struct TrainFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Weight of the imputation loss during adaptation.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub mask_blocks: Option<usize>,
    /// Source-free objective: shot or none.
    #[arg(long)]
    pub sfda: Option<String>,
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds per scenario.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Fail on the first NaN or infinity.
    #[arg(long)]
    pub checked: bool,
    /// Skip z-scoring with source statistics.
    #[arg(long)]
    pub no_normalize: bool,
    /// Reset batch-norm running statistics before adaptation.
    #[arg(long)]
    pub reset_bn_stats: bool,
}

impl TrainFlags {
    /// The flags that were given, as config key/value pairs.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("train.batch_size", self.batch_size.map(|v| v.to_string()));
        put("train.lr", self.lr.map(|v| v.to_string()));
        put("train.weight_decay", self.weight_decay.map(|v| v.to_string()));
        put("loss.alpha", self.alpha.map(|v| v.to_string()));
        put("mask.ratio", self.mask_ratio.map(|v| v.to_string()));
        put("mask.num_blocks", self.mask_blocks.map(|v| v.to_string()));
        put("sfda.method", self.sfda.clone());
        put("train.seed", self.seed.map(|v| v.to_string()));
        put("train.seeds", self.seeds.map(|v| v.to_string()));
        put("train.precision", self.precision.clone());
        put("train.checked", self.checked.then(|| "true".to_owned()));
        put("train.normalize", self.no_normalize.then(|| "false".to_owned()));
        put("train.reset_bn_stats", self.reset_bn_stats.then(|| "true".to_owned()));
        out
    }
}

/// Shape of a generated shifted pair.
#[derive(Clone, Debug, Args)]
pub struct SynthFlags {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// amplitude_scale, phase_shift, time_warp or additive_noise.
    #[arg(long, default_value = "phase_shift")]
    pub shift: String,
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    pub magnitude: f64,
    #[arg(long, default_value_t = 0)]
    pub shift_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub synth: SynthFlags,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Labelled source domain.
    #[arg(long)]
    pub domain: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Directory written by `pretrain`.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target_domain: String,
    /// Labelled domain to score on; defaults to the target domain when it
    /// carries labels.
    #[arg(long)]
    pub eval_domain: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Dataset directory holding the scenario domains.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `SRC:TGT` or `SRC:TGT:EVAL`; repeatable.
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    /// Benchmark a generated shifted pair instead of `--data`.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: bool,
    #[command(flatten)]
    pub synth: SynthFlags,
    /// `alpha=v1,v2,...` or `mask_ratio=v1,v2,...`.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
