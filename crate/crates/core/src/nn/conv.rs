use rand::Rng;

use super::{uniform, Bind, Module};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{ConvGeom, Graph, Param, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dConfig {
    /// Symmetric padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, padding: usize) -> Self {
        Conv1dConfig {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            pad_left: padding,
            pad_right: padding,
        }
    }

    /// Stride 1 with padding chosen so the output length equals the input
    /// length; even kernels put the extra zero on the right.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        let total = kernel_size.saturating_sub(1);
        Conv1dConfig {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            pad_left: total / 2,
            pad_right: total - total / 2,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            pad_left: self.pad_left,
            pad_right: self.pad_right,
        }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        self.geom().output_len(len, self.kernel_size)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d<F: Real> {
    pub config: Conv1dConfig,
    /// `[out, in, kernel]`
    pub weight: Param<F>,
    /// `[out]`
    pub bias: Param<F>,
}

impl<F: Real> Conv1d<F> {
    /// Kaiming-uniform initialisation (`a = √5`, i.e. bound `1/√fan_in`).
    pub fn new<R: Rng + ?Sized>(name: &str, config: Conv1dConfig, rng: &mut R) -> Result<Self> {
        if config.in_channels == 0 || config.out_channels == 0 || config.kernel_size == 0 || config.stride == 0 {
            return Err(config_err!("degenerate conv1d config {config:?}"));
        }
        let fan_in = (config.in_channels * config.kernel_size) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = uniform(
            rng,
            &[config.out_channels, config.in_channels, config.kernel_size],
            bound,
        );
        let bias = uniform(rng, &[config.out_channels], bound);
        Ok(Conv1d {
            config,
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        })
    }

    /// `x: [B, C_in, L]` to `[B, C_out, L_out]`.
    pub fn forward(&self, g: &mut Graph<F>, x: Var, bind: Bind) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.config.in_channels {
            return Err(dim_err!(
                "conv1d {} expects [B, {}, L], got {s:?}",
                self.weight.name(),
                self.config.in_channels
            ));
        }
        let w = g.bind(&self.weight, bind.trainable())?;
        let b = g.bind(&self.bias, bind.trainable())?;
        g.conv1d(x, w, Some(b), self.config.geom())
    }
}

impl<F: Real> Module<F> for Conv1d<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
