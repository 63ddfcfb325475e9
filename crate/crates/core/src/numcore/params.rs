use std::collections::BTreeMap;

use rand::Rng;

use super::{NumError, Tensor};

/// Gradients (or any per-parameter tensors) keyed by parameter path.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Named trainable tensors plus the optimizer step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), NumError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Insert, replacing any existing entry of the same name.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Copy every parameter whose name starts with `prefix` from `other`.
    pub fn absorb_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.iter() {
            if k.starts_with(prefix) {
                self.params.insert(k.clone(), v.clone());
            }
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        out.absorb_prefix(self, prefix);
        out.step = self.step;
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<(), NumError> {
        self.init_uniform_bound(rng, name, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn init_uniform_bound<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
    ) -> Result<(), NumError> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<(), NumError> {
        self.insert(name, Tensor::full(shape, value))
    }
}
