use rand::Rng;

use super::{uniform, Bind, Module};
use crate::error::Result;
use crate::tensor::{Graph, Param, Real, Var};

/// Fully connected layer `y = x · Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear<F: Real> {
    /// `[out, in]`
    pub weight: Param<F>,
    /// `[out]`
    pub bias: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Param::new(format!("{name}.weight"), uniform(rng, &[output, input], bound)),
            bias: Param::new(format!("{name}.bias"), uniform(rng, &[output], bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `x: [N, in]` to `[N, out]`.
    pub fn forward(&self, g: &mut Graph<F>, x: Var, bind: Bind) -> Result<Var> {
        let w = g.bind(&self.weight, bind.trainable())?;
        let b = g.bind(&self.bias, bind.trainable())?;
        g.linear(x, w, Some(b))
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
