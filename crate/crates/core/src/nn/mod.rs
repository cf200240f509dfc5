//! Network building blocks and the optimizer.

mod adam;
mod batchnorm;
mod conv;
mod linear;
mod rnn;

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::{Graph, Param, Real, Tensor, Var};

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::BatchNorm1d;
pub use conv::{Conv1d, Conv1dConfig};
pub use linear::Linear;
pub use rnn::Rnn;

/// How a layer's parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    Frozen,
}

impl Bind {
    pub fn trainable(self) -> bool {
        self == Bind::Trainable
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics are used and returned for a running-stat update.
    Train,
    /// Running statistics are used.
    Eval,
}

/// Anything that owns trainable parameters.
pub trait Module<F: Real> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Pulls this module's gradients out of a graph after backward.
    fn accumulate_grads(&mut self, graph: &Graph<F>) {
        for p in self.params_mut() {
            p.accumulate_grad(graph);
        }
    }
}

pub(crate) fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<F> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = F::of(rng.random_range(-bound..=bound));
    }
    t
}

/// Inverted dropout: zeroes each element with probability `p` and scales the
/// survivors by `1 / (1 - p)`.
pub fn dropout<F: Real, R: Rng + ?Sized>(g: &mut Graph<F>, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(config_err!("dropout probability {p} outside [0, 1)"));
    }
    if p == 0.0 {
        return Ok(x);
    }
    let keep = F::of(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let mut mask = Tensor::zeros(&shape);
    for v in mask.data_mut() {
        *v = if rng.random::<f64>() < p { F::zero() } else { keep };
    }
    let m = g.constant(mask);
    g.mul(x, m)
}
