use std::ops::Index;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{NdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub(crate) value: Arc<Tensor>,
    pub(crate) grad: Option<Tensor>,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Named trainable tensors in insertion order.
///
/// Values are reference counted so binding them to a [`Tape`] is free; an
/// optimizer step copies a value only while a tape still holds it.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NdError::DuplicateParam(name));
        }
        self.entries.insert(
            name,
            Parameter {
                value: Arc::new(value),
                grad: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| p.value.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| Arc::make_mut(&mut p.value))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a leaf on `tape`. Leaves require gradients
    /// when the tape records them.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(Arc::clone(&p.value), true)))
            .collect();
        Bindings { vars }
    }

    /// Copy gradients out of a tape after `backward`. Parameters the loss did
    /// not reach receive an explicit zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (name, p) in &mut self.entries {
            let grad = bindings
                .vars
                .get(name)
                .and_then(|&v| tape.grad(v).cloned())
                .unwrap_or_else(|| {
                    Tensor::new(p.value.shape().to_vec(), vec![0.0; p.value.len()]).expect("shape")
                });
            p.grad = Some(grad);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Check that `other` carries exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParameterStore) -> Result<()> {
        for (name, p) in &self.entries {
            match other.entries.get(name) {
                None => return Err(NdError::Checkpoint(format!("missing parameter `{name}`"))),
                Some(q) if q.value.shape() != p.value.shape() => {
                    return Err(NdError::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        q.value.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.entries.contains_key(*n)) {
            return Err(NdError::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl Index<&str> for Bindings {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}
