use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every parameter of a model. Names are unique paths such as
/// `battn/ch3/wq`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::structural(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    /// Register a parameter drawn uniformly from `[-bound, bound]`. The
    /// stream depends only on `(seed, name)`, so a parameter gets the same
    /// initial value in every model that shares its name.
    pub fn register_uniform(&mut self, name: &str, shape: &[usize], bound: f64, seed: u64) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Add a backward pass's parameter gradients into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            for (acc, v) in self.params[id.0].grad.data_mut().iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
    }

    /// Overwrite a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::structural(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::new();
        store.register("a/w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(store.register("a/w", Tensor::zeros(&[3])), Err(Error::Structural(_))));
        assert_eq!(store.get(store.id("a/w").unwrap()).grad.shape(), &[2]);
    }

    #[test]
    fn uniform_init_depends_on_name_and_seed() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        b.register_uniform("other", &[3], 1.0, 4).unwrap();
        let x = a.register_uniform("w", &[5], 0.5, 4).unwrap();
        let y = b.register_uniform("w", &[5], 0.5, 4).unwrap();
        assert_eq!(a.value(x), b.value(y));
        assert!(a.value(x).data().iter().all(|v| v.abs() <= 0.5));
        let z = a.register_uniform("w2", &[5], 0.5, 4).unwrap();
        assert_ne!(a.value(x), a.value(z));
    }

    #[test]
    fn set_value_checks_shape() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(store.set_value(id, Tensor::zeros(&[4])).is_err());
        store.set_value(id, Tensor::eye(2)).unwrap();
        assert_eq!(store.value(id), &Tensor::eye(2));
    }
}
