//! Dense named-tensor storage — the currency of every merge and mixture
//! operation.
//!
//! A [`TensorStore`] is an ordered map from tensor name to a row-major f32
//! tensor. Iteration order is always lexicographic by name, which makes
//! every downstream computation (merging, hashing, serialization)
//! deterministic.

use std::collections::BTreeMap;

use crate::error::{GlueError, Result};

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(GlueError::Shape(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(GlueError::Shape(format!(
                "shape {shape:?} implies {count} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; count],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }
}

/// Named map of tensors holding one checkpoint's weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(GlueError::InvalidArg("empty tensor name".into()));
        }
        if self.entries.contains_key(&name) {
            return Err(GlueError::InvalidArg(format!("duplicate tensor name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| GlueError::Format(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
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

    /// Lexicographic iteration over (name, tensor) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// True when both stores hold the same tensor names with the same shapes.
    pub fn same_geometry(&self, other: &TensorStore) -> bool {
        self.len() == other.len()
            && self.iter().all(|(name, t)| {
                other
                    .get(name)
                    .map(|o| o.shape() == t.shape())
                    .unwrap_or(false)
            })
    }
}

impl FromIterator<(String, Tensor)> for TensorStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut store = TensorStore::new();
        for (name, tensor) in iter {
            store
                .insert(name, tensor)
                .expect("FromIterator with invalid tensor entries");
        }
        store
    }
}
