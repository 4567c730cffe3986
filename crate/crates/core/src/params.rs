//! Named trainable parameters and their gradient accumulators.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameters. Order is registration order and is stable,
/// which keeps checkpoints and optimizer state deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix drawn from uniform(−1/√fan_in, 1/√fan_in).
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add_uniform_bound(name, shape, bound, rng)
    }

    pub fn add_uniform_bound(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrites every value from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Input(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| Error::Input(format!("missing parameter `{}`", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::dim("load_params", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
