//! Named parameter tensors and their gradients.

use std::collections::HashMap;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of parameters, addressable by index or name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<usize> {
        ensure!(!self.index.contains_key(name), "duplicate parameter '{name}'");
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            "parameter '{name}' has {} values for shape {shape:?}",
            data.len()
        );
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param { name: name.to_string(), shape, data });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Rounds every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Gradient norm over parameters whose name starts with `prefix`.
    pub fn group_norm(&self, store: &ParamStore, prefix: &str) -> f64 {
        store
            .iter()
            .zip(&self.0)
            .filter(|(p, _)| p.name.starts_with(prefix))
            .flat_map(|(_, g)| g)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
