use super::{Bind, Mode, Module};
use crate::error::{dim_err, Result};
use crate::tensor::{BatchStats, Graph, Param, Real, Tensor, Var};

/// Per-channel batch normalisation over `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct BatchNorm1d<F: Real> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub eps: F,
    pub momentum: F,
    name: String,
}

impl<F: Real> BatchNorm1d<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm1d {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], F::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            eps: F::of(1e-5),
            momentum: F::of(0.1),
            name: name.to_owned(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// In train mode the returned statistics should be handed to
    /// [`BatchNorm1d::update_running`] if this pass is meant to move the
    /// running buffers.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        x: Var,
        mode: Mode,
        bind: Bind,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let gamma = g.bind(&self.gamma, bind.trainable())?;
        let beta = g.bind(&self.beta, bind.trainable())?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let y = g.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    self.running_mean.data(),
                    self.running_var.data(),
                    self.eps,
                )?;
                Ok((y, None))
            }
        }
    }

    /// Exponential moving average of batch statistics; the variance is
    /// stored unbiased.
    pub fn update_running(&mut self, stats: &BatchStats<F>) -> Result<()> {
        let c = self.channels();
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(dim_err!("statistics for {} channels, layer has {c}", stats.mean.len()));
        }
        let m = self.momentum;
        let keep = F::one() - m;
        let n = stats.count as f64;
        let unbias = if n > 1.0 { F::of(n / (n - 1.0)) } else { F::one() };
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * v * unbias;
        }
        Ok(())
    }

    pub fn reset_running(&mut self) {
        let c = self.channels();
        self.running_mean = Tensor::zeros(&[c]);
        self.running_var = Tensor::full(&[c], F::one());
    }
}

impl<F: Real> Module<F> for BatchNorm1d<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
