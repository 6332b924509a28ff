//! Parameter storage.
//!
//! A [`ParamSet`] owns one f32 tensor per parameter of an [`Arch`], stored in
//! the canonical enumeration order. That order (and nothing else) defines the
//! serialized parameter layout, so surgery can reason about flat offsets.

use crate::arch::{Arch, ParamId, ParamName};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// All parameters of a model, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    ids: Vec<ParamId>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<ParamId, usize>,
}

impl ParamSet {
    /// Zero-initialized parameters (bn-scale 1, bn-var 1).
    pub fn zeros(arch: &Arch) -> Self {
        let mut set = ParamSet { ids: vec![], tensors: vec![], index: HashMap::new() };
        for (id, shape) in arch.param_specs() {
            let t = match id.name {
                ParamName::BnScale | ParamName::BnVar => Tensor::filled(&shape, 1.0),
                _ => Tensor::zeros(&shape),
            };
            set.push(id, t);
        }
        set
    }

    /// He-style initialization for ReLU networks: weights ~ N(0, √(2/fan_in)),
    /// biases a small positive constant (keeps narrow ReLU nets alive at
    /// init), bn at identity.
    pub fn init(arch: &Arch, rng: &mut Rng) -> Self {
        let mut set = ParamSet::zeros(arch);
        for i in 0..set.ids.len() {
            let id = set.ids[i];
            match id.name {
                ParamName::Weight => {
                    let shape = &set.tensors[i].shape;
                    // dense [out, in] -> fan_in = in; conv [out, in/g, k, k]
                    // -> fan_in = (in/g)·k²
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).unwrap();
                    for v in &mut set.tensors[i].data {
                        *v = dist.sample(rng) as f32;
                    }
                }
                ParamName::Bias => {
                    for v in &mut set.tensors[i].data {
                        *v = 0.02;
                    }
                }
                _ => {}
            }
        }
        set
    }

    /// Every parameter drawn uniformly from `(lo, hi)`, avoiding exact zero;
    /// bn variances are shifted positive. Useful for structural tests that
    /// need all-distinct continuous values.
    pub fn random_uniform(arch: &Arch, rng: &mut Rng, lo: f32, hi: f32) -> Self {
        let mut set = ParamSet::zeros(arch);
        for i in 0..set.ids.len() {
            let positive = set.ids[i].name == ParamName::BnVar;
            for v in &mut set.tensors[i].data {
                let mut x = rng.gen_range(lo..hi);
                while x == 0.0 {
                    x = rng.gen_range(lo..hi);
                }
                *v = if positive { x.abs() + 0.1 } else { x };
            }
        }
        set
    }

    fn push(&mut self, id: ParamId, t: Tensor<f32>) {
        self.index.insert(id, self.tensors.len());
        self.ids.push(id);
        self.tensors.push(t);
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<f32>> {
        self.index.get(&id).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<f32>> {
        self.index.get(&id).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn len_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Flatten into the canonical order.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len_params());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Rebuild from a canonical flat vector.
    pub fn from_flat(arch: &Arch, flat: &[f32]) -> Result<Self> {
        let mut set = ParamSet::zeros(arch);
        if flat.len() != set.len_params() {
            return Err(Error::Format(format!(
                "parameter count mismatch: arch needs {}, got {}",
                set.len_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in &mut set.tensors {
            let len = t.len();
            t.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(set)
    }

    /// Cast every tensor to another scalar type (f64 verification runs).
    pub fn cast<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| t.cast()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

/// Per-parameter gradients, aligned with a [`ParamSet`]'s order.
#[derive(Debug, Clone)]
pub struct Grads<S: Scalar = f32> {
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(params: &[Tensor<S>]) -> Self {
        Grads { tensors: params.iter().map(|t| Tensor::zeros(&t.shape)).collect() }
    }

    pub fn add_assign(&mut self, other: &Grads<S>) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: S) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}
