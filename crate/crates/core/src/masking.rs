//! Temporal block masking.
//!
//! The time axis is cut into `num_blocks` contiguous blocks of
//! `floor(L / num_blocks)` steps, the last block absorbing the remainder.
//! Each sample zeroes `round(mask_ratio * num_blocks)` distinct blocks, drawn
//! uniformly without replacement, across all channels.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesBatch;
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub num_blocks: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            num_blocks: 8,
            mask_ratio: 0.125,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(config_err!("mask.num_blocks must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(config_err!("mask.ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }

    pub fn num_masked(&self) -> usize {
        ((self.mask_ratio * self.num_blocks as f64).round() as usize).min(self.num_blocks)
    }

    /// `[start, end)` time range of every block for a sequence of length `len`.
    pub fn block_bounds(&self, len: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        if len < self.num_blocks {
            return Err(config_err!(
                "sequence length {len} is shorter than mask.num_blocks = {}",
                self.num_blocks
            ));
        }
        let size = len / self.num_blocks;
        Ok((0..self.num_blocks)
            .map(|b| {
                let end = if b + 1 == self.num_blocks { len } else { (b + 1) * size };
                (b * size, end)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskResult {
    pub masked: TimeSeriesBatch,
    /// Sorted masked block ids, one list per sample.
    pub block_indices: Vec<Vec<usize>>,
    pub block_bounds: Vec<(usize, usize)>,
}

/// Masks a batch with an RNG seeded from `spec.seed`.
pub fn apply_temporal_mask(batch: &TimeSeriesBatch, spec: &MaskSpec) -> Result<MaskResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (values, block_indices) = mask_values(batch.values(), spec, &mut rng)?;
    Ok(MaskResult {
        masked: batch.with_values(values)?,
        block_indices,
        block_bounds: spec.block_bounds(batch.length())?,
    })
}

/// Masks a raw `[B, C, L]` tensor drawing from a caller-owned RNG stream;
/// `spec.seed` is ignored.
pub fn mask_values<R: Rng + ?Sized>(
    values: &Tensor<f32>,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<Vec<usize>>)> {
    let s = values.shape();
    let (b, c, l) = (s[0], s[1], s[2]);
    let bounds = spec.block_bounds(l)?;
    let k = spec.num_masked();
    let mut out = values.clone();
    let mut chosen = Vec::with_capacity(b);
    for bi in 0..b {
        let mut blocks = if k == 0 {
            Vec::new()
        } else {
            index::sample(rng, spec.num_blocks, k).into_vec()
        };
        blocks.sort_unstable();
        let sample = &mut out.data_mut()[bi * c * l..(bi + 1) * c * l];
        for row in sample.chunks_mut(l) {
            for &blk in &blocks {
                let (lo, hi) = bounds[blk];
                row[lo..hi].fill(0.0);
            }
        }
        chosen.push(blocks);
    }
    Ok((out, chosen))
}
