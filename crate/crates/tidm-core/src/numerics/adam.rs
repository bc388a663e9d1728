//! Adam optimizer (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).

use crate::error::Result;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Only parameters present in `grads` are touched;
    /// names iterate in lexicographic order so the update is deterministic.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let current = params.get(name)?.clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let mut out = current.data().to_vec();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                out[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
            params.set(name, Tensor::from_vec(current.shape().to_vec(), out)?)?;
        }
        params.set_step_count(self.step);
        Ok(())
    }
}
