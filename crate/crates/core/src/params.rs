//! Named learnable tensors with gradient buffers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a tensor is filled when registered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitSpec {
    Zero,
    Constant(f64),
    /// Uniform on `(-bound, bound)`.
    Uniform(f64),
    /// Kaiming-uniform for ReLU networks: bound `sqrt(6 / fan_in)`.
    Kaiming { fan_in: usize },
}

/// What a tensor is used for. Optimizers update only learnable roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Running statistics; never touched by the optimizer.
    Statistic,
}

impl Role {
    pub fn learnable(self) -> bool {
        !matches!(self, Role::Statistic)
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub init: InitSpec,
    pub role: Role,
}

impl<T: Element> ParamTensor<T> {
    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<ParamTensor<T>>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn register(&mut self, name: &str, shape: Shape, init: InitSpec, role: Role) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let value = sample_init(shape, init, &mut self.rng);
        let id = ParamId(self.entries.len());
        self.entries.push(ParamTensor {
            name: name.to_string(),
            grad: Tensor::zeros(shape),
            value,
            init,
            role,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.entries.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.role.learnable())
            .map(|p| p.numel())
            .sum()
    }

    /// Zeroes every convolution weight and bias while leaving normalization
    /// parameters and statistics at their identity values.
    pub fn zero_weights_and_biases(&mut self) {
        for p in &mut self.entries {
            if matches!(p.role, Role::Weight | Role::Bias) {
                p.value.data_mut().fill(T::zero());
            }
        }
    }

    /// Redraws every tensor from its init spec with a fresh stream.
    pub fn reinitialize(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.entries {
            p.value = sample_init(p.value.shape(), p.init, &mut self.rng);
        }
    }

    /// Fills learnable tensors with seeded uniform noise in `(-scale, scale)`,
    /// keeping normalization scales near one. Used to probe blocks away from
    /// their initialization.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.entries {
            let offset = if p.role == Role::NormScale { 1.0 } else { 0.0 };
            if p.role.learnable() {
                for v in p.value.data_mut() {
                    *v = T::of(offset + rng.gen_range(-scale..scale));
                }
            }
        }
    }
}

fn sample_init<T: Element>(shape: Shape, init: InitSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match init {
        InitSpec::Zero => Tensor::zeros(shape),
        InitSpec::Constant(c) => Tensor::full(shape, T::of(c)),
        InitSpec::Uniform(b) if b > 0.0 => Tensor::rand_uniform(shape, -b, b, rng),
        InitSpec::Uniform(_) => Tensor::zeros(shape),
        InitSpec::Kaiming { fan_in } => {
            let b = (6.0 / fan_in.max(1) as f64).sqrt();
            Tensor::rand_uniform(shape, -b, b, rng)
        }
    }
}
