use std::collections::BTreeMap;

use crate::error::{invalid, Result};

use super::batch_renorm::RunningUpdate;
use super::{Real, Tensor};

/// Named parameter tensors of one model, iterated in name order.
///
/// The same type holds gradients and Adam moments, which mirror the
/// parameter names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| invalid!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Adds `t` into the entry `name`, creating it when absent.
    pub fn accumulate(&mut self, name: &str, t: Tensor<T>) {
        match self.tensors.get_mut(name) {
            Some(existing) => existing.add_assign(&t),
            None => {
                self.tensors.insert(name.to_string(), t);
            }
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_same_layout<U: Real>(&self, other: &ModelParams<U>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(invalid!(
                "parameter sets differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        for ((a, ta), (b, tb)) in self.tensors.iter().zip(other.tensors.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(invalid!(
                    "parameter layout mismatch: {a} {:?} vs {b} {:?}",
                    ta.shape(),
                    tb.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in self.tensors.values() {
            t.check_finite("parameters")?;
        }
        Ok(())
    }

    /// Writes running statistics gathered by a training-mode forward pass.
    pub fn apply_running_updates(&mut self, updates: &[(String, RunningUpdate<T>)]) -> Result<()> {
        for (prefix, u) in updates {
            self.get_mut(&format!("{prefix}.running_mean"))?
                .data_mut()
                .copy_from_slice(&u.mean);
            self.get_mut(&format!("{prefix}.running_std"))?
                .data_mut()
                .copy_from_slice(&u.std);
        }
        Ok(())
    }

    /// Flat view of every value in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

/// Whether a parameter is a running statistic, updated by forward passes
/// rather than by the optimizer.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_std")
}
