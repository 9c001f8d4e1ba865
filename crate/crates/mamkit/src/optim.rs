//! Named parameter storage, gradient accumulation and the Adam update rule.

use std::collections::HashMap;

use crate::rng::RngStream;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Zero-mean Gaussian tensor with the given deviation; each parameter is
/// initialized from its own named substream so layouts can change without
/// perturbing unrelated parameters.
pub fn gaussian_init(shape: Vec<usize>, std: f64, rng: &mut RngStream) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| std * rng.next_gaussian()).collect())
}

/// Learning-rate group a parameter belongs to. Convolutional parameters and
/// transformer/cluster parameters are optimized with different rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Conv,
    Transformer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which fixes the checkpoint layout and the optimizer state layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.params.len();
        self.index.insert(name.to_string(), idx);
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> &Param {
        self.get(self.idx(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Parameters materialized as leaves on one tape, aligned with store indices.
pub struct TapeBinding {
    vars: Vec<VarId>,
}

impl TapeBinding {
    pub fn bind(tape: &mut Tape, store: &ParamStore, requires_grad: bool) -> Self {
        TapeBinding {
            vars: store
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn var(&self, idx: usize) -> VarId {
        self.vars[idx]
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
pub struct GradAccum {
    grads: Vec<Vec<f64>>,
}

impl GradAccum {
    pub fn zeros(store: &ParamStore) -> Self {
        GradAccum {
            grads: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate(&mut self, idx: usize, grad: &[f64]) {
        let buf = &mut self.grads[idx];
        assert_eq!(buf.len(), grad.len());
        for (a, b) in buf.iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.grads[idx]
    }

    /// Pull every bound parameter's gradient off a backpropagated tape.
    pub fn accumulate_from_tape(&mut self, tape: &Tape, binding: &TapeBinding) {
        for idx in 0..self.grads.len() {
            if let Some(g) = tape.grad(binding.var(idx)) {
                let g = g.to_vec();
                self.accumulate(idx, &g);
            }
        }
    }
}

/// Adam with bias correction. Each parameter group carries its own learning
/// rate; moments are kept per parameter value.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr_conv: f64, lr_transformer: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..store.len() {
            let param = store.get_mut(idx);
            let lr = match param.group {
                ParamGroup::Conv => lr_conv,
                ParamGroup::Transformer => lr_transformer,
            };
            let g = grads.get(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = param.value.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
