use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Named learnable tensors. Names are stable and sorted, so iteration order is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(shape_err("ParamStore::set", slot.shape(), t.shape()));
        }
        *slot = t;
        Ok(())
    }

    /// Glorot-uniform matrix `[fan_in × fan_out]`.
    pub fn init_matrix(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new([fan_in, fan_out], data).expect("shape"));
    }

    pub fn init_const(&mut self, name: &str, len: usize, value: f64) {
        self.insert(name, Tensor::full([len], value));
    }

    /// Registers `<prefix>.weight` and a zero `<prefix>.bias`.
    pub fn init_linear(&mut self, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
        self.init_matrix(&format!("{prefix}.weight"), d_in, d_out, rng);
        self.init_const(&format!("{prefix}.bias"), d_out, 0.0);
    }

    /// Registers `<prefix>.gamma = 1` and `<prefix>.beta = 0`.
    pub fn init_layer_norm(&mut self, prefix: &str, c: usize) {
        self.init_const(&format!("{prefix}.gamma"), c, 1.0);
        self.init_const(&format!("{prefix}.beta"), c, 0.0);
    }
}
