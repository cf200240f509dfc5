//! Encoder, classifier and imputer, bundled with their architecture metadata.
//!
//! The encoder is a stack of `conv(same) -> batch norm -> ReLU -> max-pool(2)`
//! blocks mapping `[B, C, L]` to a feature sequence `[B, D, L / 2^blocks]`.
//! The classifier averages that sequence over time and applies a linear
//! layer. The imputer runs an RNN along the feature sequence and projects
//! every hidden state back to `D` features.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::nn::{BatchNorm1d, Bind, Conv1d, Conv1dConfig, Linear, Mode, Module, Rnn};
use crate::tensor::{load_file, save_file, BatchStats, Graph, Param, Real, Tensor, Var};

pub const PARAMS_FILE: &str = "params.bin";
pub const ARCH_FILE: &str = "arch.json";

/// Rows per forward pass when running inference over a whole dataset.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchMeta {
    pub in_channels: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub pool: usize,
    pub imputer_hidden: usize,
}

impl ArchMeta {
    /// Three blocks of width 64/128/128, kernel 8, and a 128-unit imputer.
    pub fn standard(in_channels: usize, seq_len: usize, num_classes: usize) -> Self {
        ArchMeta {
            in_channels,
            seq_len,
            num_classes,
            conv_channels: vec![64, 128, 128],
            kernel_size: 8,
            pool: 2,
            imputer_hidden: 128,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&self.in_channels)
    }

    /// Length `T'` of the encoder's feature sequence.
    pub fn feature_len(&self) -> usize {
        self.conv_channels.iter().fold(self.seq_len, |l, _| l / self.pool)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.kernel_size == 0 || self.pool == 0 {
            return Err(config_err!("degenerate architecture {self:?}"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) || self.imputer_hidden == 0 {
            return Err(config_err!("layer widths must be positive: {self:?}"));
        }
        if self.feature_len() == 0 {
            return Err(config_err!(
                "sequence length {} too short for {} pooling stages",
                self.seq_len,
                self.conv_channels.len()
            ));
        }
        Ok(())
    }

    /// Fails unless `[B, C, L]` data matches the declared input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.in_channels || shape[2] != self.seq_len {
            return Err(dim_err!(
                "model expects [B, {}, {}], got {shape:?}",
                self.in_channels,
                self.seq_len
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock<F: Real> {
    pub conv: Conv1d<F>,
    pub bn: BatchNorm1d<F>,
}

#[derive(Clone, Debug)]
pub struct Encoder<F: Real> {
    pub blocks: Vec<ConvBlock<F>>,
    pool: usize,
}

impl<F: Real> Encoder<F> {
    fn new<R: Rng + ?Sized>(arch: &ArchMeta, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(arch.conv_channels.len());
        let mut c_in = arch.in_channels;
        for (i, &c_out) in arch.conv_channels.iter().enumerate() {
            let cfg = Conv1dConfig::same(c_in, c_out, arch.kernel_size);
            blocks.push(ConvBlock {
                conv: Conv1d::new(&format!("encoder.block{i}.conv"), cfg, rng)?,
                bn: BatchNorm1d::new(&format!("encoder.block{i}.bn"), c_out),
            });
            c_in = c_out;
        }
        Ok(Encoder { blocks, pool: arch.pool })
    }

    /// Returns the feature sequence and, in train mode, each block's batch
    /// statistics.
    pub fn forward(&self, g: &mut Graph<F>, x: Var, mode: Mode, bind: Bind) -> Result<(Var, Vec<BatchStats<F>>)> {
        let mut h = x;
        let mut stats = Vec::new();
        for block in &self.blocks {
            h = block.conv.forward(g, h, bind)?;
            let (y, s) = block.bn.forward(g, h, mode, bind)?;
            stats.extend(s);
            h = g.relu(y)?;
            h = g.max_pool1d(h, self.pool)?;
        }
        Ok((h, stats))
    }

    pub fn update_running(&mut self, stats: &[BatchStats<F>]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(contract_err!("{} batch statistics for {} blocks", stats.len(), self.blocks.len()));
        }
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.bn.update_running(s)?;
        }
        Ok(())
    }

    pub fn reset_running(&mut self) {
        for block in &mut self.blocks {
            block.bn.reset_running();
        }
    }
}

impl<F: Real> Module<F> for Encoder<F> {
    fn params(&self) -> Vec<&Param<F>> {
        self.blocks.iter().flat_map(|b| b.conv.params().into_iter().chain(b.bn.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.conv.params_mut().into_iter().chain(b.bn.params_mut()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Classifier<F: Real> {
    pub linear: Linear<F>,
}

impl<F: Real> Classifier<F> {
    /// Temporal mean of `h: [B, D, T']`, giving `[B, D]`.
    pub fn pool(g: &mut Graph<F>, h: Var) -> Result<Var> {
        g.mean_axis(h, 2)
    }

    /// Logits from pooled features.
    pub fn forward_pooled(&self, g: &mut Graph<F>, z: Var, bind: Bind) -> Result<Var> {
        self.linear.forward(g, z, bind)
    }
}

impl<F: Real> Module<F> for Classifier<F> {
    fn params(&self) -> Vec<&Param<F>> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.linear.params_mut()
    }
}

#[derive(Clone, Debug)]
pub struct Imputer<F: Real> {
    pub rnn: Rnn<F>,
    pub proj: Linear<F>,
}

impl<F: Real> Imputer<F> {
    /// `h: [B, D, T']` to an imputed sequence of the same shape.
    pub fn forward(&self, g: &mut Graph<F>, h: Var, bind: Bind) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[1] != self.rnn.input_dim() {
            return Err(dim_err!("imputer expects [B, {}, T], got {s:?}", self.rnn.input_dim()));
        }
        let (b, d, t) = (s[0], s[1], s[2]);
        let seq = g.swap_last(h)?;
        let states = self.rnn.forward(g, seq, bind)?;
        let flat = g.reshape(states, &[b * t, self.rnn.hidden_dim()])?;
        let out = self.proj.forward(g, flat, bind)?;
        let out = g.reshape(out, &[b, t, d])?;
        g.swap_last(out)
    }
}

impl<F: Real> Module<F> for Imputer<F> {
    fn params(&self) -> Vec<&Param<F>> {
        self.rnn.params().into_iter().chain(self.proj.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.rnn.params_mut().into_iter().chain(self.proj.params_mut()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle<F: Real> {
    pub arch: ArchMeta,
    pub encoder: Encoder<F>,
    pub classifier: Classifier<F>,
    /// Absent when a bundle was saved without imputer weights.
    pub imputer: Option<Imputer<F>>,
}

/// Eval-mode outputs for a whole dataset.
#[derive(Clone, Debug)]
pub struct Inference<F> {
    /// Pooled features `[N, D]`.
    pub features: Tensor<F>,
    /// `[N, K]`
    pub logits: Tensor<F>,
}

impl<F: Real> ModelBundle<F> {
    /// Initialises every parameter from `rng` in a fixed order: encoder
    /// blocks, classifier, imputer.
    pub fn new<R: Rng + ?Sized>(arch: ArchMeta, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let encoder = Encoder::new(&arch, rng)?;
        let d = arch.feature_dim();
        let classifier = Classifier {
            linear: Linear::new("classifier", d, arch.num_classes, rng),
        };
        let imputer = Imputer {
            rnn: Rnn::new("imputer.rnn", d, arch.imputer_hidden, rng),
            proj: Linear::new("imputer.proj", arch.imputer_hidden, d, rng),
        };
        Ok(ModelBundle {
            arch,
            encoder,
            classifier,
            imputer: Some(imputer),
        })
    }

    /// Puts `[B, C, L]` data on the graph as a constant and encodes it.
    pub fn encode(&self, g: &mut Graph<F>, x: &Tensor<f32>, mode: Mode, bind: Bind) -> Result<(Var, Vec<BatchStats<F>>)> {
        self.arch.check_input(x.shape())?;
        let xv = g.constant(x.cast());
        self.encoder.forward(g, xv, mode, bind)
    }

    /// Logits from a feature sequence.
    pub fn classify(&self, g: &mut Graph<F>, h: Var, bind: Bind) -> Result<Var> {
        let z = Classifier::pool(g, h)?;
        self.classifier.forward_pooled(g, z, bind)
    }

    pub fn impute(&self, g: &mut Graph<F>, h_masked: Var, bind: Bind) -> Result<Var> {
        self.imputer()?.forward(g, h_masked, bind)
    }

    pub fn imputer(&self) -> Result<&Imputer<F>> {
        self.imputer
            .as_ref()
            .ok_or_else(|| contract_err!("bundle has no imputer weights"))
    }

    /// Eval-mode pooled features and logits, computed in chunks.
    pub fn infer(&self, x: &Tensor<f32>) -> Result<Inference<F>> {
        self.arch.check_input(x.shape())?;
        let n = x.shape()[0];
        let (d, k) = (self.arch.feature_dim(), self.arch.num_classes);
        let mut feats = Vec::with_capacity(n * d);
        let mut logits = Vec::with_capacity(n * k);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(INFERENCE_CHUNK) {
            let xc = crate::data::gather_samples(x, chunk)?;
            let mut g = Graph::new();
            let (h, _) = self.encode(&mut g, &xc, Mode::Eval, Bind::Frozen)?;
            let z = Classifier::pool(&mut g, h)?;
            let y = self.classifier.forward_pooled(&mut g, z, Bind::Frozen)?;
            feats.extend_from_slice(g.value(z).data());
            logits.extend_from_slice(g.value(y).data());
        }
        Ok(Inference {
            features: Tensor::new(vec![n, d], feats)?,
            logits: Tensor::new(vec![n, k], logits)?,
        })
    }

    /// Every stored tensor by name: parameters and batch-norm running
    /// buffers.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        let mut out: Vec<(String, Tensor<F>)> = Vec::new();
        for block in &self.encoder.blocks {
            for p in block.conv.params().into_iter().chain(block.bn.params()) {
                out.push((p.name().to_owned(), p.value.clone()));
            }
            out.push((format!("{}.running_mean", block.bn.name()), block.bn.running_mean.clone()));
            out.push((format!("{}.running_var", block.bn.name()), block.bn.running_var.clone()));
        }
        for p in self.classifier.params() {
            out.push((p.name().to_owned(), p.value.clone()));
        }
        if let Some(imp) = &self.imputer {
            for p in imp.params() {
                out.push((p.name().to_owned(), p.value.clone()));
            }
        }
        out
    }

    /// Writes `params.bin` and `arch.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors: Vec<(String, Tensor<f32>)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, Tensor::from_real(&t)))
            .collect();
        save_file(&dir.join(PARAMS_FILE), &tensors)?;
        let arch_path = dir.join(ARCH_FILE);
        let mut json = serde_json::to_string_pretty(&self.arch).map_err(|source| Error::Json {
            path: arch_path.clone(),
            source,
        })?;
        json.push('\n');
        std::fs::write(&arch_path, json).map_err(|e| Error::io(&arch_path, e))
    }

    /// Reads a bundle written by [`ModelBundle::save`]. Imputer tensors are
    /// optional; every other tensor must be present with the expected shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let arch_path = dir.join(ARCH_FILE);
        let raw = std::fs::read(&arch_path).map_err(|e| Error::io(&arch_path, e))?;
        let arch: ArchMeta = serde_json::from_slice(&raw).map_err(|source| Error::Json {
            path: arch_path.clone(),
            source,
        })?;
        arch.validate()?;
        let params_path = dir.join(PARAMS_FILE);
        let stored = load_file(&params_path)?;
        let lookup = |name: &str| stored.iter().find(|(n, _)| n == name).map(|(_, t)| t.cast::<F>());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut bundle = ModelBundle::<F>::new(arch, &mut rng)?;
        let bad = |msg: String| Error::ingestion(&params_path, msg);

        let assign = |p: &mut Param<F>| -> Result<()> {
            let t = lookup(p.name()).ok_or_else(|| bad(format!("missing tensor {}", p.name())))?;
            p.assign(t).map_err(|e| bad(e.to_string()))
        };
        for block in &mut bundle.encoder.blocks {
            for p in block.conv.params_mut().into_iter().chain(block.bn.params_mut()) {
                assign(p)?;
            }
        }
        for p in bundle.classifier.params_mut() {
            assign(p)?;
        }
        for block in &mut bundle.encoder.blocks {
            let bn_name = block.bn.name().to_owned();
            for (suffix, buf) in [("running_mean", &mut block.bn.running_mean), ("running_var", &mut block.bn.running_var)] {
                let name = format!("{bn_name}.{suffix}");
                let t = lookup(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
                if t.shape() != buf.shape() {
                    return Err(bad(format!("{name} has shape {:?}, expected {:?}", t.shape(), buf.shape())));
                }
                *buf = t;
            }
        }
        let has_imputer = stored.iter().any(|(n, _)| n.starts_with("imputer."));
        if has_imputer {
            let imp = bundle.imputer.as_mut().expect("constructed with imputer");
            for p in imp.params_mut() {
                assign(p)?;
            }
        } else {
            bundle.imputer = None;
        }
        Ok(bundle)
    }

    /// Value-level equality of every stored tensor.
    pub fn same_values(&self, other: &Self) -> bool {
        self.arch == other.arch && self.named_tensors() == other.named_tensors()
    }
}
