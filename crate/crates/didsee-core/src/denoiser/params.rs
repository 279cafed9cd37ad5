//! Named parameter and gradient storage for the denoiser.

use crate::error::{Error, Result};
use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewD};
use std::collections::HashMap;

/// Ordered collection of named f64 arrays. Insertion order is the canonical
/// order used for checkpoint serialization and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, array: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.arrays.len());
        self.names.push(name.to_string());
        self.arrays.push(array);
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.arrays[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self.arrays[self.index[name]]
    }

    pub fn try_get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.index
            .get(name)
            .map(|&i| &self.arrays[i])
            .ok_or_else(|| Error::invalid_argument(format!("unknown parameter {name}")))
    }

    /// 2-D view of a parameter (weight matrices).
    pub fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality()
            .unwrap_or_else(|_| panic!("parameter {name} is not 2-D"))
    }

    /// 1-D view of a parameter (biases, norm scales).
    pub fn vec(&self, name: &str) -> ArrayView1<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality()
            .unwrap_or_else(|_| panic!("parameter {name} is not 1-D"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ArrayViewD<'_, f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.arrays.iter().map(|a| a.view()))
    }

    /// A zero-filled set with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, arr) in self.iter() {
            out.insert(name, ArrayD::zeros(arr.raw_dim()));
        }
        out
    }

    /// Adds `other` (same structure) element-wise into `self`.
    pub fn add_assign(&mut self, other: &ParamSet) {
        assert_eq!(self.names, other.names, "parameter structure mismatch");
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.arrays {
            *a *= factor;
        }
    }

    /// Accumulates a gradient contribution for one parameter.
    pub fn accumulate(&mut self, name: &str, grad: &ArrayD<f64>) {
        let idx = self.index[name];
        self.arrays[idx] += grad;
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
