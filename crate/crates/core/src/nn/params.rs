use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Precision, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Gradient buffers aligned one-to-one with the parameters of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

/// Named trainable parameters with matching gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new(), index: HashMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name `{name}`");
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&grads.0) {
            a.add_assign(b);
        }
    }

    pub fn take_grads(&mut self) -> Gradients {
        let g = self.grads.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Gradients(std::mem::replace(&mut self.grads, g))
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients(self.values.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn round_to(&mut self, precision: Precision) {
        for v in &mut self.values {
            v.round_to(precision);
        }
    }
}

/// Uniform Glorot initialisation for a `fan_in × fan_out` matrix.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], limit)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}
