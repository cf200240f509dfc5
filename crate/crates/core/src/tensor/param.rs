use std::sync::atomic::{AtomicU64, Ordering};

use super::{Graph, Real, Tensor};
use crate::error::{dim_err, Result};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_KEY.fetch_add(1, Ordering::Relaxed)
}

/// A named trainable tensor with an additive gradient buffer.
///
/// Every instance (including clones) carries a unique key, which is how a
/// [`Graph`] maps its leaf nodes back to the parameter they were bound from.
pub struct Param<F> {
    name: String,
    pub value: Tensor<F>,
    grad: Option<Tensor<F>>,
    key: u64,
}

impl<F: Real> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param {
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            key: fresh_key(),
        }
    }
}

impl<F: Real> std::fmt::Debug for Param<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
            key: fresh_key(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    pub fn grad(&self) -> Option<&Tensor<F>> {
        self.grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds the gradient the graph holds for this parameter, if it was bound
    /// as trainable there.
    pub fn accumulate_grad(&mut self, graph: &Graph<F>) {
        if let Some(g) = graph.param_grad(self) {
            match &mut self.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => self.grad = Some(g.clone()),
            }
        }
    }

    /// Overwrites the value, keeping the shape.
    pub fn assign(&mut self, value: Tensor<F>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(dim_err!(
                "cannot assign shape {:?} to parameter {} of shape {:?}",
                value.shape(),
                self.name,
                self.value.shape()
            ));
        }
        self.value = value;
        Ok(())
    }
}
