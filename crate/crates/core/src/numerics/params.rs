use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Tape, Tensor, Var};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data).unwrap());
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    /// Copies every tensor whose name starts with `prefix` from `other`,
    /// renaming the prefix. Returns how many tensors were copied.
    pub fn copy_prefixed(&mut self, other: &ParamStore, from: &str, to: &str) -> usize {
        let mut n = 0;
        for (name, t) in other.iter() {
            if let Some(rest) = name.strip_prefix(from) {
                let target = format!("{to}{rest}");
                if let Some(existing) = self.tensors.get(&target) {
                    if existing.shape() != t.shape() {
                        continue;
                    }
                }
                self.tensors.insert(target, t.clone());
                n += 1;
            }
        }
        n
    }

    /// Every shape in `expected` must be present here with the same shape.
    pub fn validate_against(&self, expected: &ParamStore) -> Result<(), NumericsError> {
        for (name, t) in expected.iter() {
            let found = self
                .get(name)
                .ok_or_else(|| NumericsError::MissingParam(name.clone()))?;
            if found.shape() != t.shape() {
                return Err(NumericsError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Multi-layer perceptron layout: ReLU between layers, none after the last.
///
/// Parameters live in a [`ParamStore`] under `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn init(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        for (i, pair) in dims.windows(2).enumerate() {
            store.init_glorot(&format!("{prefix}.w{i}"), pair[0], pair[1], rng);
            store.init_zeros(&format!("{prefix}.b{i}"), 1, pair[1]);
        }
        Self {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
        }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let mut h = x;
        for layer in 0..self.layers() {
            let w = tape.param(store, &self.weight_name(layer))?;
            let b = tape.param(store, &self.bias_name(layer))?;
            h = tape.linear(h, w, b)?;
            if layer + 1 < self.layers() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Zeroes the last layer so the network outputs exactly zero.
    pub fn zero_last_layer(&self, store: &mut ParamStore) {
        let last = self.layers() - 1;
        for name in [self.weight_name(last), self.bias_name(last)] {
            if let Some(t) = store.get_mut(&name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn validate(&self, store: &ParamStore) -> Result<(), NumericsError> {
        for (i, pair) in self.dims.windows(2).enumerate() {
            for (name, shape) in [
                (self.weight_name(i), vec![pair[0], pair[1]]),
                (self.bias_name(i), vec![1, pair[1]]),
            ] {
                let t = store
                    .get(&name)
                    .ok_or_else(|| NumericsError::MissingParam(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(NumericsError::ParamShape {
                        name,
                        expected: shape,
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}
