//! SGD and Adam over a [`ParamSet`].
//!
//! Optimizer state is keyed by the canonical parameter order, so a given
//! optimizer instance is only valid for the param set layout it was built
//! for. Running batch-norm statistics are parameters but are never touched
//! here — they receive no gradients and are updated directly by the trainer.

use crate::params::{Grads, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimKind {
    pub fn adam_default() -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f32,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f32, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor<f32>> =
            params.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Optimizer { kind, lr, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn sgd(lr: f32, momentum: f32, params: &ParamSet) -> Self {
        Optimizer::new(OptimKind::Sgd { momentum }, lr, params)
    }

    pub fn adam(lr: f32, params: &ParamSet) -> Self {
        Optimizer::new(OptimKind::adam_default(), lr, params)
    }

    /// Apply one update step in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads<f32>) {
        self.step += 1;
        match self.kind {
            OptimKind::Sgd { momentum } => {
                for (i, p) in params.tensors_mut().iter_mut().enumerate() {
                    let g = &grads.tensors[i];
                    let m = &mut self.m[i];
                    for j in 0..p.data.len() {
                        m.data[j] = momentum * m.data[j] + g.data[j];
                        p.data[j] -= self.lr * m.data[j];
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.step as f64;
                let bc1 = 1.0 - (beta1 as f64).powf(t);
                let bc2 = 1.0 - (beta2 as f64).powf(t);
                for (i, p) in params.tensors_mut().iter_mut().enumerate() {
                    let g = &grads.tensors[i];
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for j in 0..p.data.len() {
                        let gj = g.data[j];
                        m.data[j] = beta1 * m.data[j] + (1.0 - beta1) * gj;
                        v.data[j] = beta2 * v.data[j] + (1.0 - beta2) * gj * gj;
                        let mhat = m.data[j] as f64 / bc1;
                        let vhat = v.data[j] as f64 / bc2;
                        p.data[j] -= (self.lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
                    }
                }
            }
        }
    }
}
