//! Named parameter storage and seeded initialisation.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Insertion-ordered map from dotted hierarchical names to parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore<T: Real> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: IndexMap::new(),
        }
    }

    /// Adds a trainable tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Marks every tensor as frozen (no gradient) or trainable.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.entries.values_mut() {
            let v = std::mem::replace(t, Tensor::scalar(T::zero()));
            *t = v.with_requires_grad(trainable);
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Accumulates gradients of every parameter bound on `tape` into the
    /// matching tensors' gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, var) in tape.bound_params() {
            if let Some(g) = grads.get(var) {
                let t = self
                    .entries
                    .get_mut(name)
                    .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies values for every name also present in `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParameterStore<T>) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(Error::dim(
                    "load",
                    format!("`{name}` is {:?} in the file, {:?} in the model", src.shape(), t.shape()),
                ));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±bound`.
    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::c(rng.random_range(-bound..=bound)))
    }

    /// Fan-in scaled uniform for linear projections: `±1/√fan_in`.
    pub fn linear<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    /// He-uniform for ReLU convolutions: `±√(6/fan_in)`.
    pub fn conv<T: Real>(&mut self, cout: usize, cin: usize, k: usize) -> Tensor<T> {
        let fan_in = (cin * k * k) as f64;
        self.uniform(&[cout, cin, k, k], (6.0 / fan_in).sqrt())
    }

    /// Normal with the given std, redrawn outside ±2 std.
    pub fn trunc_normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let normal = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::c(v);
            }
        })
    }
}
