//! Named parameter storage shared by every model component.

// Unused whenever std is linked, which then supplies the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order. Registration order is part of the
/// checkpoint contract: rebuilding a model from the same config yields the
/// same names in the same order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; names are fixed by model construction code.
    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(self.id_of(name).is_none(), "duplicate parameter name {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform weight of shape `fan_in × fan_out`.
    pub fn add_glorot<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
        self.add(name, Matrix::from_vec(fan_in, fan_out, data))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Overwrite values from `(name, matrix)` pairs. Every parameter must be
    /// covered exactly once with a matching shape.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, Matrix)>) -> Result<()> {
        let mut seen = alloc::vec![false; self.len()];
        for (name, value) in entries {
            let id = self.id_of(name).ok_or_else(|| Error::Format(alloc::format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Shape(alloc::format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(alloc::format!("missing parameter {}", self.names[missing])));
        }
        Ok(())
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters not reached.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn empty(len: usize) -> Self {
        ParamGrads { grads: (0..len).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn set(&mut self, id: ParamId, g: Matrix) {
        self.grads[id.0] = Some(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        self.grads.iter_mut().enumerate().filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.squared_norm()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }

    /// Rescale so the global norm does not exceed `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for (_, g) in self.iter_mut() {
                g.scale_in_place(s);
            }
        }
        norm
    }
}
