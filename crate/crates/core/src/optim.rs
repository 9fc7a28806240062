//! Adam over a [`TensorStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TensorStore;
use crate::tensor::Tensor;

pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &TensorStore, beta1: f64) -> Self {
        let zeros = || params.values.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1, beta2: ADAM_BETA2, eps: ADAM_EPS, step: 0, m: zeros(), v: zeros() }
    }

    /// One update; `grads[i]` is `None` for parameters that received no gradient.
    pub fn step(&mut self, params: &mut TensorStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.values.len() || self.m.len() != params.values.len() {
            return Err(Error::Shape(format!(
                "optimizer state for {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.values.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != params.values[i].shape() {
                return Err(Error::Shape(format!("gradient for {} has the wrong shape", params.names[i])));
            }
            let p = params.values[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
