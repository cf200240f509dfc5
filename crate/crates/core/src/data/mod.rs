//! Time-series batches, the on-disk dataset format, synthetic domain pairs
//! and per-channel normalisation.

mod io;
mod synth;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, save_dataset, Dataset, DatasetMeta};
pub use synth::{synth_domain_pair, synth_domain_pair_with, synth_target_holdout, ShiftKind, ShiftSpec, SynthConfig};

/// A batch of `B` sequences with `C` channels and length `L`, optionally
/// labelled.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    values: Tensor<f32>,
    labels: Option<Vec<usize>>,
    pub domain_id: String,
}

/// Sequences with no labels attached. Adaptation consumes only this type.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    values: Tensor<f32>,
    pub domain_id: String,
}

fn check_values(values: &Tensor<f32>) -> Result<()> {
    if values.rank() != 3 {
        return Err(dim_err!("series values must be [B, C, L], got {:?}", values.shape()));
    }
    if !values.all_finite() {
        return Err(contract_err!("series values contain NaN or infinity"));
    }
    Ok(())
}

/// Copies the selected samples of a `[B, C, L]` tensor.
pub(crate) fn gather_samples(values: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let s = values.shape();
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        if i >= s[0] {
            return Err(contract_err!("sample index {i} out of range for {} samples", s[0]));
        }
        data.extend_from_slice(&values.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(vec![idx.len(), s[1], s[2]], data)
}

impl TimeSeriesBatch {
    pub fn new(values: Tensor<f32>, labels: Option<Vec<usize>>, domain_id: impl Into<String>) -> Result<Self> {
        check_values(&values)?;
        if let Some(l) = &labels {
            if l.len() != values.shape()[0] {
                return Err(dim_err!(
                    "{} labels for {} samples",
                    l.len(),
                    values.shape()[0]
                ));
            }
        }
        Ok(TimeSeriesBatch {
            values,
            labels,
            domain_id: domain_id.into(),
        })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[2]
    }

    /// Fails unless every label lies in `[0, num_classes)`.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(bad) = self.labels().and_then(|l| l.iter().find(|&&y| y >= num_classes)) {
            return Err(contract_err!("label {bad} outside [0, {num_classes})"));
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let values = gather_samples(&self.values, idx)?;
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        TimeSeriesBatch::new(values, labels, self.domain_id.clone())
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> UnlabeledBatch {
        UnlabeledBatch {
            values: self.values.clone(),
            domain_id: self.domain_id.clone(),
        }
    }

    pub fn with_values(&self, values: Tensor<f32>) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(dim_err!("replacement values {:?} vs {:?}", values.shape(), self.values.shape()));
        }
        TimeSeriesBatch::new(values, self.labels.clone(), self.domain_id.clone())
    }
}

impl UnlabeledBatch {
    pub fn new(values: Tensor<f32>, domain_id: impl Into<String>) -> Result<Self> {
        check_values(&values)?;
        Ok(UnlabeledBatch {
            values,
            domain_id: domain_id.into(),
        })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Splits `0..n` into consecutive chunks of at most `batch_size` indices
/// (the tail is kept). With an RNG the order is a random permutation,
/// otherwise it is `0..n`.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, shuffle: Option<&mut R>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl ChannelStats {
    pub fn from_values(values: &Tensor<f32>) -> Self {
        let s = values.shape();
        let (b, c, l) = (s[0], s[1], s[2]);
        let d = values.data();
        let n = (b * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let row = &d[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                mean[ch] += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ch in 0..c {
                let row = &d[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                var[ch] += row.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        ChannelStats { mean, std }
    }
}

/// Per-channel z-scoring. When `stats` is omitted they are computed from the
/// batch itself; either way the statistics used are returned. Channels with
/// (near) zero spread are only centred.
pub fn normalize(batch: &TimeSeriesBatch, stats: Option<&ChannelStats>) -> Result<(TimeSeriesBatch, ChannelStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ChannelStats::from_values(batch.values()),
    };
    let values = apply_stats(batch.values(), &stats)?;
    Ok((batch.with_values(values)?, stats))
}

pub(crate) fn apply_stats(values: &Tensor<f32>, stats: &ChannelStats) -> Result<Tensor<f32>> {
    let s = values.shape();
    let (c, l) = (s[1], s[2]);
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(dim_err!("statistics for {} channels applied to {c}", stats.mean.len()));
    }
    let mut out = values.clone();
    for (i, row) in out.data_mut().chunks_mut(l).enumerate() {
        let ch = i % c;
        let sd = if stats.std[ch] > STD_FLOOR { stats.std[ch] } else { 1.0 };
        for v in row {
            *v = ((*v as f64 - stats.mean[ch]) / sd) as f32;
        }
    }
    Ok(out)
}
