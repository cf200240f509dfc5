//! Source pretraining, source-free target adaptation and multi-seed
//! scenario runs.
//!
//! Every source of randomness draws from its own ChaCha stream derived from
//! the run seed, so switching one loss term on or off never shifts the draws
//! seen by another part of the pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, gather_samples, normalize, ChannelStats, TimeSeriesBatch, UnlabeledBatch};
use crate::error::{config_err, contract_err, Result};
use crate::eval::{evaluate, ConfusionMatrix};
use crate::losses::{
    adapt_loss, compute_pseudo_labels, cross_entropy, imputation_mse, pretrain_loss, shot_loss, LossWeights,
};
use crate::masking::{mask_values, MaskSpec};
use crate::model::{ArchMeta, Classifier, ModelBundle};
use crate::nn::{AdamConfig, AdamState, Bind, Mode, Module};
use crate::tensor::{Graph, Param, Real, Tensor, Var};

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    PretrainShuffle = 2,
    PretrainMask = 3,
    AdaptShuffle = 4,
    AdaptMask = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SfdaKind {
    Shot,
    None,
}

impl std::str::FromStr for SfdaKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shot" => Ok(SfdaKind::Shot),
            "none" => Ok(SfdaKind::None),
            other => Err(config_err!("unknown sfda method {other:?} (expected shot or none)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(config_err!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub seeds_per_scenario: usize,
    pub mask: MaskSpec,
    pub weights: LossWeights,
    pub sfda: SfdaKind,
    /// Train the imputer alongside the source model.
    pub pretrain_imputer: bool,
    /// Restore batch-norm running statistics to their initial values before
    /// adaptation.
    pub reset_bn_stats: bool,
    /// Z-score both domains with source statistics.
    pub normalize: bool,
    pub checked: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            seeds_per_scenario: 3,
            mask: MaskSpec::default(),
            weights: LossWeights::default(),
            sfda: SfdaKind::Shot,
            pretrain_imputer: true,
            reset_bn_stats: false,
            normalize: true,
            checked: false,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err!("train.weight_decay must be non-negative"));
        }
        if self.seeds_per_scenario == 0 {
            return Err(config_err!("train.seeds must be at least 1"));
        }
        self.mask.validate()?;
        self.weights.validate()
    }

    /// Seeds of the scenario's runs: `seed, seed + 1, ...`.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds_per_scenario as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    fn adam_for<F: Real>(&self) -> Result<AdamState<F>> {
        AdamState::new(AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::with_lr(self.lr)
        })
    }
}

/// Per-epoch batch-mean losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainCurves {
    pub ce: Vec<f64>,
    /// Empty when the imputer is not trained.
    pub imputation: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptCurves {
    /// Source-free objective; empty for `SfdaKind::None`.
    pub sf: Vec<f64>,
    /// Empty when the bundle has no imputer.
    pub imputation: Vec<f64>,
    pub total: Vec<f64>,
}

fn init_zero_grads<F: Real>(params: &mut [&mut Param<F>]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}

fn epoch_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Fresh bundle with parameters drawn from the run's init stream.
pub fn init_bundle<F: Real>(arch: ArchMeta, seed: u64) -> Result<ModelBundle<F>> {
    ModelBundle::new(arch, &mut stream_rng(seed, Stream::Init))
}

/// Supervised source training. Each batch computes cross-entropy on the
/// clean view and, when `cfg.pretrain_imputer` is set, the imputation loss
/// between detached clean features and the imputer's output on detached
/// masked features. Only the clean pass moves batch-norm running statistics.
pub fn pretrain_source<F: Real>(
    mut bundle: ModelBundle<F>,
    data: &TimeSeriesBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelBundle<F>, PretrainCurves)> {
    cfg.validate()?;
    let labels = data
        .labels()
        .ok_or_else(|| contract_err!("source domain {} has no labels", data.domain_id))?;
    if data.is_empty() {
        return Err(config_err!("source domain {} is empty", data.domain_id));
    }
    data.check_labels(bundle.arch.num_classes)?;
    bundle.arch.check_input(data.values().shape())?;
    if cfg.pretrain_imputer {
        bundle.imputer()?;
    }
    let mut adam = cfg.adam_for::<F>()?;
    let mut shuffle = stream_rng(seed, Stream::PretrainShuffle);
    let mut mask_rng = stream_rng(seed, Stream::PretrainMask);
    let mut curves = PretrainCurves::default();

    for _ in 0..cfg.epochs {
        let (mut ce_acc, mut imp_acc) = (Vec::new(), Vec::new());
        for idx in batch_indices(data.len(), cfg.batch_size, Some(&mut shuffle)) {
            let x = gather_samples(data.values(), &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::with_checked(cfg.checked);
            let (h, stats) = bundle.encode(&mut g, &x, Mode::Train, Bind::Trainable)?;
            let logits = bundle.classify(&mut g, h, Bind::Trainable)?;
            let ce = cross_entropy(&mut g, logits, &y)?;
            ce_acc.push(g.value(ce).item().as_f64());
            let loss = if cfg.pretrain_imputer {
                let (xm, _) = mask_values(&x, &cfg.mask, &mut mask_rng)?;
                let (hm, _) = bundle.encode(&mut g, &xm, Mode::Train, Bind::Trainable)?;
                let target = g.detach(h);
                let masked = g.detach(hm);
                let imputed = bundle.impute(&mut g, masked, Bind::Trainable)?;
                let imp = imputation_mse(&mut g, target, imputed)?;
                imp_acc.push(g.value(imp).item().as_f64());
                pretrain_loss(&mut g, ce, imp)?
            } else {
                ce
            };
            g.backward(loss)?;
            bundle.encoder.update_running(&stats)?;

            let ModelBundle {
                encoder,
                classifier,
                imputer,
                ..
            } = &mut bundle;
            let mut params = encoder.params_mut();
            params.extend(classifier.params_mut());
            if cfg.pretrain_imputer {
                params.extend(imputer.as_mut().expect("checked above").params_mut());
            }
            init_zero_grads(&mut params);
            for p in params.iter_mut() {
                p.accumulate_grad(&g);
            }
            adam.step(&mut params)?;
        }
        curves.ce.push(epoch_mean(&ce_acc));
        if cfg.pretrain_imputer {
            curves.imputation.push(epoch_mean(&imp_acc));
        }
    }
    Ok((bundle, curves))
}

/// A source-free adaptation objective evaluated on the frozen classifier's
/// outputs.
pub trait SourceFreeObjective<F: Real> {
    fn name(&self) -> &'static str;

    /// Called at the start of every epoch with the current model.
    fn refresh(&mut self, bundle: &ModelBundle<F>, data: &UnlabeledBatch) -> Result<()>;

    /// Loss for the samples `idx` of the epoch's data, or `None` when the
    /// objective contributes nothing.
    fn loss(&self, g: &mut Graph<F>, logits: Var, pooled: Var, idx: &[usize]) -> Result<Option<Var>>;
}

/// Information maximisation plus pseudo-label cross-entropy. Pseudo-labels
/// are recomputed once per epoch from eval-mode features of the full target
/// set; with `shot_pl_weight == 0` they are skipped.
pub struct Shot {
    pub weights: LossWeights,
    labels: Option<Vec<usize>>,
}

impl Shot {
    pub fn new(weights: LossWeights) -> Self {
        Shot { weights, labels: None }
    }

    pub fn pseudo_labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
}

impl<F: Real> SourceFreeObjective<F> for Shot {
    fn name(&self) -> &'static str {
        "shot"
    }

    fn refresh(&mut self, bundle: &ModelBundle<F>, data: &UnlabeledBatch) -> Result<()> {
        if self.weights.shot_pl_weight == 0.0 {
            self.labels = None;
            return Ok(());
        }
        let inf = bundle.infer(data.values())?;
        self.labels = Some(compute_pseudo_labels(&inf.features, &inf.logits)?.labels);
        Ok(())
    }

    fn loss(&self, g: &mut Graph<F>, logits: Var, _pooled: Var, idx: &[usize]) -> Result<Option<Var>> {
        let pl: Option<Vec<usize>> = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        shot_loss(g, logits, pl.as_deref(), &self.weights).map(Some)
    }
}

/// No source-free term; adaptation is driven by imputation alone.
pub struct NoObjective;

impl<F: Real> SourceFreeObjective<F> for NoObjective {
    fn name(&self) -> &'static str {
        "none"
    }

    fn refresh(&mut self, _: &ModelBundle<F>, _: &UnlabeledBatch) -> Result<()> {
        Ok(())
    }

    fn loss(&self, _: &mut Graph<F>, _: Var, _: Var, _: &[usize]) -> Result<Option<Var>> {
        Ok(None)
    }
}

pub fn objective_for<F: Real>(cfg: &TrainConfig) -> Box<dyn SourceFreeObjective<F>> {
    match cfg.sfda {
        SfdaKind::Shot => Box::new(Shot::new(cfg.weights.clone())),
        SfdaKind::None => Box::new(NoObjective),
    }
}

/// Target adaptation. Only encoder parameters (and its batch-norm running
/// statistics) change; the classifier and imputer are bound frozen and never
/// reach the optimizer. When the bundle carries an imputer the imputation
/// loss `mse(h, imputer(h_masked))` is computed every batch and weighted by
/// `alpha`; a bundle without an imputer adapts with the source-free term
/// alone, which requires `sfda = shot`.
pub fn adapt_target<F: Real>(
    mut bundle: ModelBundle<F>,
    data: &UnlabeledBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelBundle<F>, AdaptCurves)> {
    cfg.validate()?;
    if bundle.arch.check_input(data.values().shape()).is_err() {
        return Err(contract_err!(
            "bundle expects [B, {}, {}] inputs but target domain {} is {:?}",
            bundle.arch.in_channels,
            bundle.arch.seq_len,
            data.domain_id,
            data.values().shape()
        ));
    }
    let with_imputation = bundle.imputer.is_some();
    if !with_imputation && (cfg.sfda == SfdaKind::None || cfg.weights.alpha > 0.0) {
        bundle.imputer()?;
    }
    if cfg.reset_bn_stats {
        bundle.encoder.reset_running();
    }
    let mut objective = objective_for::<F>(cfg);
    let mut adam = cfg.adam_for::<F>()?;
    let mut shuffle = stream_rng(seed, Stream::AdaptShuffle);
    let mut mask_rng = stream_rng(seed, Stream::AdaptMask);
    let mut curves = AdaptCurves::default();

    for _ in 0..cfg.epochs {
        objective.refresh(&bundle, data)?;
        let (mut sf_acc, mut imp_acc, mut tot_acc) = (Vec::new(), Vec::new(), Vec::new());
        for idx in batch_indices(data.len(), cfg.batch_size, Some(&mut shuffle)) {
            let x = gather_samples(data.values(), &idx)?;
            let mut g = Graph::with_checked(cfg.checked);
            let (h, stats) = bundle.encode(&mut g, &x, Mode::Train, Bind::Trainable)?;
            let pooled = Classifier::pool(&mut g, h)?;
            let logits = bundle.classifier.forward_pooled(&mut g, pooled, Bind::Frozen)?;
            let sf = objective.loss(&mut g, logits, pooled, &idx)?;
            if let Some(sf) = sf {
                sf_acc.push(g.value(sf).item().as_f64());
            }
            let imp = if with_imputation {
                let (xm, _) = mask_values(&x, &cfg.mask, &mut mask_rng)?;
                let (hm, _) = bundle.encode(&mut g, &xm, Mode::Train, Bind::Trainable)?;
                let imputed = bundle.impute(&mut g, hm, Bind::Frozen)?;
                let imp = imputation_mse(&mut g, h, imputed)?;
                imp_acc.push(g.value(imp).item().as_f64());
                Some(imp)
            } else {
                None
            };
            let loss = match (sf, imp) {
                (Some(sf), Some(imp)) => adapt_loss(&mut g, sf, imp, &cfg.weights)?,
                (Some(sf), None) => sf,
                (None, Some(imp)) => g.scale(imp, F::of(cfg.weights.alpha))?,
                (None, None) => unreachable!("rejected before the loop"),
            };
            tot_acc.push(g.value(loss).item().as_f64());
            g.backward(loss)?;
            bundle.encoder.update_running(&stats)?;

            let mut params = bundle.encoder.params_mut();
            init_zero_grads(&mut params);
            for p in params.iter_mut() {
                p.accumulate_grad(&g);
            }
            adam.step(&mut params)?;
        }
        if !sf_acc.is_empty() {
            curves.sf.push(epoch_mean(&sf_acc));
        }
        if !imp_acc.is_empty() {
            curves.imputation.push(epoch_mean(&imp_acc));
        }
        curves.total.push(epoch_mean(&tot_acc));
    }
    Ok((bundle, curves))
}

/// Inputs of one source-to-target scenario.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub name: String,
    pub num_classes: usize,
    pub source: TimeSeriesBatch,
    pub target: UnlabeledBatch,
    /// Labelled target samples used only for scoring.
    pub target_eval: TimeSeriesBatch,
}

impl ScenarioData {
    /// Optionally z-scores every split with statistics of the source domain.
    pub fn new(
        num_classes: usize,
        source: TimeSeriesBatch,
        target: TimeSeriesBatch,
        target_eval: Option<TimeSeriesBatch>,
        normalize_inputs: bool,
    ) -> Result<Self> {
        let name = format!("{}->{}", source.domain_id, target.domain_id);
        let target_eval = target_eval.unwrap_or_else(|| target.clone());
        target_eval
            .labels()
            .ok_or_else(|| contract_err!("target domain {} has no labels to score against", target_eval.domain_id))?;
        target_eval.check_labels(num_classes)?;
        let (source, target, target_eval) = if normalize_inputs {
            let stats = ChannelStats::from_values(source.values());
            (
                normalize(&source, Some(&stats))?.0,
                normalize(&target, Some(&stats))?.0,
                normalize(&target_eval, Some(&stats))?.0,
            )
        } else {
            (source, target, target_eval)
        };
        Ok(ScenarioData {
            name,
            num_classes,
            source,
            target: target.unlabeled(),
            target_eval,
        })
    }

    pub fn arch(&self) -> ArchMeta {
        ArchMeta::standard(self.source.channels(), self.source.length(), self.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mf1: f64,
    pub accuracy: f64,
    pub source_only_mf1: f64,
    pub source_only_accuracy: f64,
    pub pretrain: PretrainCurves,
    pub adapt: AdaptCurves,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedResult>,
    pub mean_mf1: f64,
    pub std_mf1: f64,
    pub source_only_mean_mf1: f64,
    pub source_only_std_mf1: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pretrain, score the source model, adapt and score again, for a single
/// seed.
pub fn run_seed<F: Real>(data: &ScenarioData, cfg: &TrainConfig, arch: &ArchMeta, seed: u64) -> Result<SeedResult> {
    let bundle = init_bundle::<F>(arch.clone(), seed)?;
    let (pretrained, pretrain) = pretrain_source(bundle, &data.source, cfg, seed)?;
    adapt_and_score(&pretrained, pretrain, data, cfg, seed)
}

/// The adaptation half of [`run_seed`], starting from a pretrained bundle.
pub fn adapt_and_score<F: Real>(
    pretrained: &ModelBundle<F>,
    pretrain: PretrainCurves,
    data: &ScenarioData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SeedResult> {
    let before = evaluate(pretrained, &data.target_eval)?;
    let (adapted, adapt) = adapt_target(pretrained.clone(), &data.target, cfg, seed)?;
    let after = evaluate(&adapted, &data.target_eval)?;
    Ok(SeedResult {
        seed,
        mf1: after.mf1,
        accuracy: after.accuracy,
        source_only_mf1: before.mf1,
        source_only_accuracy: before.accuracy,
        pretrain,
        adapt,
        confusion: after.confusion,
    })
}

pub fn summarize(scenario: &str, runs: Vec<SeedResult>) -> ScenarioReport {
    let (mean_mf1, std_mf1) = mean_std(&runs.iter().map(|r| r.mf1).collect::<Vec<_>>());
    let (so_mean, so_std) = mean_std(&runs.iter().map(|r| r.source_only_mf1).collect::<Vec<_>>());
    ScenarioReport {
        scenario: scenario.to_owned(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        runs,
        mean_mf1,
        std_mf1,
        source_only_mean_mf1: so_mean,
        source_only_std_mf1: so_std,
    }
}

/// Every seed of `cfg.seed_list()` in sequence at precision `F`.
pub fn run_scenario<F: Real>(data: &ScenarioData, cfg: &TrainConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    let arch = data.arch();
    let runs = cfg
        .seed_list()
        .into_iter()
        .map(|seed| run_seed::<F>(data, cfg, &arch, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&data.name, runs))
}

/// [`run_scenario`] at the precision named in the config.
pub fn run_scenario_dyn(data: &ScenarioData, cfg: &TrainConfig) -> Result<ScenarioReport> {
    match cfg.precision {
        Precision::F32 => run_scenario::<f32>(data, cfg),
        Precision::F64 => run_scenario::<f64>(data, cfg),
    }
}

/// Copies a bundle's parameters into a tensor list for byte comparisons.
pub fn snapshot<F: Real>(bundle: &ModelBundle<F>) -> Vec<(String, Tensor<F>)> {
    bundle.named_tensors()
}
