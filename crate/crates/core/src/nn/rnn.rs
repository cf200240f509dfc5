use rand::Rng;

use super::{uniform, Bind, Module};
use crate::error::{dim_err, Result};
use crate::tensor::{Graph, Param, Real, Var};

/// Single-layer Elman recurrence `hₜ = tanh(W_ih·xₜ + W_hh·hₜ₋₁ + b)`, `h₀ = 0`.
#[derive(Clone, Debug)]
pub struct Rnn<F: Real> {
    /// `[hidden, input]`
    pub w_ih: Param<F>,
    /// `[hidden, hidden]`
    pub w_hh: Param<F>,
    /// `[hidden]`
    pub bias: Param<F>,
}

impl<F: Real> Rnn<F> {
    /// All weights uniform in `±1/√hidden`.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Rnn {
            w_ih: Param::new(format!("{name}.w_ih"), uniform(rng, &[hidden, input], bound)),
            w_hh: Param::new(format!("{name}.w_hh"), uniform(rng, &[hidden, hidden], bound)),
            bias: Param::new(format!("{name}.bias"), uniform(rng, &[hidden], bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.value.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ih.value.shape()[0]
    }

    /// `seq: [B, T, D]` to all hidden states `[B, T, H]`.
    pub fn forward(&self, g: &mut Graph<F>, seq: Var, bind: Bind) -> Result<Var> {
        let s = g.shape(seq);
        if s.len() != 3 || s[2] != self.input_dim() {
            return Err(dim_err!(
                "rnn expects [B, T, {}], got {s:?}",
                self.input_dim()
            ));
        }
        let w_ih = g.bind(&self.w_ih, bind.trainable())?;
        let w_hh = g.bind(&self.w_hh, bind.trainable())?;
        let b = g.bind(&self.bias, bind.trainable())?;
        g.rnn_tanh(seq, w_ih, w_hh, b)
    }
}

impl<F: Real> Module<F> for Rnn<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}
