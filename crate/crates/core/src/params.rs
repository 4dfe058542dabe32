//! Named parameter storage and initialization.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-√(6/fan_in), √(6/fan_in))`, for layers followed by ReLU.
    KaimingUniform,
    /// `U(-1/√fan_in, 1/√fan_in)`, for output layers.
    FanIn,
    Zeros,
    Constant(f32),
    /// `gain · I` for square `n×n` weights.
    ScaledIdentity(f32),
}

impl Init {
    fn sample(self, rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
        let uniform = |rng: &mut ChaCha8Rng, bound: f32| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        match self {
            Init::KaimingUniform => uniform(rng, (6.0 / fan_in.max(1) as f32).sqrt()),
            Init::FanIn => uniform(rng, 1.0 / (fan_in.max(1) as f32).sqrt()),
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::ScaledIdentity(gain) => {
                let d = fan_in.max(1);
                (0..n).map(|k| if k / d == k % d { gain } else { 0.0 }).collect()
            }
        }
    }
}

/// Ordered map from dotted parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Creates and stores an initialized `shape` tensor.
    pub fn init(&mut self, rng: &mut ChaCha8Rng, name: impl Into<String>, shape: Vec<usize>, init: Init) -> Result<()> {
        let fan_in = shape.first().copied().unwrap_or(1);
        let n = shape.iter().product();
        let t = Tensor::new(shape, init.sample(rng, fan_in, n))?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Bit-level equality of names, order, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Copies gradients recorded on `tape` into each tensor's `grad` slot.
    pub fn pull_grads(&mut self, tape: &crate::tape::Tape) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            match tape.param_grad(name) {
                Some(g) if t.requires_grad() => t.set_grad(g.iter().map(|&x| x as f32).collect())?,
                _ => t.zero_grad(),
            }
        }
        Ok(())
    }
}
