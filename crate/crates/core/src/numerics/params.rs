use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Array, NumericsError};

/// Handle to one named parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)), using the first and last axes as fans.
    XavierUniform,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub grad: Array,
    /// First-moment optimizer slot.
    pub m: Array,
    /// Second-moment optimizer slot.
    pub v: Array,
}

/// Named learnable arrays with gradient and optimizer slots.
///
/// Registration order fixes the [`ParamId`]s; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId, NumericsError> {
        if self.index.contains_key(name) {
            return Err(NumericsError::DuplicateParameter(name.to_string()));
        }
        let value = match init {
            Init::Zeros => Array::zeros(shape),
            Init::Ones => Array::full(shape, 1.0),
            Init::XavierUniform => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.last().copied().unwrap_or(1);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Array::from_vec(shape, data)?
            }
        };
        Ok(self.insert(name, value))
    }

    /// Inserts a parameter with an explicit value.
    pub fn insert(&mut self, name: &str, value: Array) -> ParamId {
        let shape = value.shape().to_vec();
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            grad: Array::zeros(&shape),
            m: Array::zeros(&shape),
            v: Array::zeros(&shape),
            value,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale · grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
/// Parameters the loss does not reach hold `None` (an implicit zero).
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Dense gradient, zero-filled for unreachable parameters.
    pub fn dense(&self, store: &ParameterStore, id: ParamId) -> Array {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(store.value(id).shape()))
    }
}
