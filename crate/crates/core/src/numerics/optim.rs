//! Adam with bias correction.

use super::param::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    t: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let shapes: Vec<_> = store.iter().map(|(_, p)| p.value.shape()).collect();
        Self {
            config,
            m: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// Applies one update from the gradients held in `store`. A non-finite
    /// gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(Error::Numeric {
                    step: self.t + 1,
                    msg: format!("non-finite gradient in {}", p.name),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let val = p.value.data_mut();
            for i in 0..g.len() {
                let md = &mut m.data_mut()[i];
                *md = beta1 * *md + (1.0 - beta1) * g[i];
                let vd = &mut v.data_mut()[i];
                *vd = beta2 * *vd + (1.0 - beta2) * g[i] * g[i];
                let mhat = *md / c1;
                let vhat = *vd / c2;
                val[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
