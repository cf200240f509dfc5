//! Synthetic source/target pairs with a controlled covariate shift.
//!
//! Class `k` is a sinusoid with `base_cycles + k * cycle_step` cycles per
//! window, random amplitude, a small random phase and white noise. Channel `c`
//! carries the same wave delayed by `c * pi / 4`. The target domain draws
//! fresh waveforms and applies the shift, leaving each class's frequency (and
//! hence `P(y | x)`) unchanged.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TimeSeriesBatch;
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Amplitude multiplied by `1 + magnitude`; magnitude in `[0, 10]`.
    AmplitudeScale,
    /// Phase offset of `magnitude` radians; magnitude in `[0, 2 pi]`.
    PhaseShift,
    /// Monotone warp `u + magnitude / (2 pi) * sin(2 pi u)` of normalised
    /// time; magnitude in `[0, 1)`.
    TimeWarp,
    /// Extra Gaussian noise with standard deviation `magnitude`; in `[0, 10]`.
    AdditiveNoise,
}

impl std::str::FromStr for ShiftKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amplitude_scale" => Ok(ShiftKind::AmplitudeScale),
            "phase_shift" => Ok(ShiftKind::PhaseShift),
            "time_warp" => Ok(ShiftKind::TimeWarp),
            "additive_noise" => Ok(ShiftKind::AdditiveNoise),
            other => Err(config_err!("unknown shift kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.magnitude;
        let ok = match self.kind {
            ShiftKind::AmplitudeScale | ShiftKind::AdditiveNoise => (0.0..=10.0).contains(&m),
            ShiftKind::PhaseShift => (0.0..=TAU).contains(&m),
            ShiftKind::TimeWarp => (0.0..1.0).contains(&m),
        };
        if ok {
            Ok(())
        } else {
            Err(config_err!("magnitude {m} out of range for {:?}", self.kind))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub length: usize,
    pub base_cycles: f64,
    pub cycle_step: f64,
    pub noise_std: f64,
    /// Half-width of the uniform per-sample phase jitter, in radians.
    pub phase_jitter: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            channels: 1,
            length: 64,
            base_cycles: 2.0,
            cycle_step: 0.5,
            noise_std: 0.5,
            phase_jitter: 0.3,
            amplitude_min: 0.8,
            amplitude_max: 1.2,
        }
    }
}

impl SynthConfig {
    /// Cycles per window of class `k`.
    pub fn cycles(&self, k: usize) -> f64 {
        self.base_cycles + k as f64 * self.cycle_step
    }
}

const SOURCE_STREAM: u64 = 0;
const TARGET_STREAM_BIT: u64 = 1 << 63;
const HOLDOUT_STREAM_BIT: u64 = 1 << 62;

/// Source and target domains under the default [`SynthConfig`].
pub fn synth_domain_pair(
    num_classes: usize,
    n_per_class: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(TimeSeriesBatch, TimeSeriesBatch)> {
    synth_domain_pair_with(&SynthConfig::default(), num_classes, n_per_class, shift, seed)
}

pub fn synth_domain_pair_with(
    cfg: &SynthConfig,
    num_classes: usize,
    n_per_class: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(TimeSeriesBatch, TimeSeriesBatch)> {
    let source = synth_domain(cfg, num_classes, n_per_class, None, seed, SOURCE_STREAM, "src")?;
    let target = synth_domain(
        cfg,
        num_classes,
        n_per_class,
        Some(shift),
        seed,
        shift.seed | TARGET_STREAM_BIT,
        "tgt",
    )?;
    Ok((source, target))
}

/// A fresh labelled draw from the shifted target distribution, independent of
/// the adaptation set returned by [`synth_domain_pair_with`].
pub fn synth_target_holdout(
    cfg: &SynthConfig,
    num_classes: usize,
    n_per_class: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<TimeSeriesBatch> {
    let stream = shift.seed | TARGET_STREAM_BIT | HOLDOUT_STREAM_BIT;
    synth_domain(cfg, num_classes, n_per_class, Some(shift), seed, stream, "tgt_test")
}

fn synth_domain(
    cfg: &SynthConfig,
    num_classes: usize,
    n_per_class: usize,
    shift: Option<&ShiftSpec>,
    seed: u64,
    stream: u64,
    domain: &str,
) -> Result<TimeSeriesBatch> {
    if num_classes < 2 {
        return Err(config_err!("synthetic data needs at least 2 classes"));
    }
    if n_per_class == 0 {
        return Err(config_err!("n_per_class must be positive"));
    }
    if cfg.channels == 0 || cfg.length < 2 {
        return Err(config_err!("synthetic series need channels >= 1 and length >= 2"));
    }
    if !(cfg.noise_std >= 0.0 && cfg.amplitude_min > 0.0 && cfg.amplitude_max >= cfg.amplitude_min) {
        return Err(config_err!("invalid synthetic noise or amplitude range"));
    }
    if let Some(s) = shift {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let base_noise = Normal::new(0.0, cfg.noise_std).map_err(|e| config_err!("{e}"))?;
    let extra_noise = match shift {
        Some(ShiftSpec { kind: ShiftKind::AdditiveNoise, magnitude, .. }) => {
            Some(Normal::new(0.0, *magnitude).map_err(|e| config_err!("{e}"))?)
        }
        _ => None,
    };
    let (c, l) = (cfg.channels, cfg.length);
    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * c * l);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % num_classes;
        let amp = rng.random_range(cfg.amplitude_min..=cfg.amplitude_max);
        let phase = if cfg.phase_jitter > 0.0 {
            rng.random_range(-cfg.phase_jitter..=cfg.phase_jitter)
        } else {
            0.0
        };
        let (amp, phase, warp) = match shift {
            None => (amp, phase, 0.0),
            Some(s) => match s.kind {
                ShiftKind::AmplitudeScale => (amp * (1.0 + s.magnitude), phase, 0.0),
                ShiftKind::PhaseShift => (amp, phase + s.magnitude, 0.0),
                ShiftKind::TimeWarp => (amp, phase, s.magnitude),
                ShiftKind::AdditiveNoise => (amp, phase, 0.0),
            },
        };
        let cycles = cfg.cycles(k);
        for ch in 0..c {
            let delay = ch as f64 * PI / 4.0;
            for t in 0..l {
                let u = t as f64 / l as f64;
                let tau = u + warp / TAU * (TAU * u).sin();
                let mut v = amp * (TAU * cycles * tau + phase - delay).sin() + base_noise.sample(&mut rng);
                if let Some(extra) = &extra_noise {
                    v += extra.sample(&mut rng);
                }
                data.push(v as f32);
            }
        }
        labels.push(k);
    }
    TimeSeriesBatch::new(Tensor::new(vec![n, c, l], data)?, Some(labels), domain)
}
