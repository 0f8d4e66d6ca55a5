//! Flat registry of learnable parameters.
//!
//! Every model component stores its parameters as [`ParamRef`] indices into
//! one [`ParamStore`]. Each training step registers the whole store as tape
//! leaves in index order, which keeps the optimizer a single aligned loop
//! and makes finite-difference checks trivial (perturb one entry, re-run the
//! forward).

use crate::diff::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamRef {
        self.values.push(value);
        self.names.push(name.into());
        ParamRef(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, r: ParamRef) -> &Tensor {
        &self.values[r.0]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor {
        &mut self.values[r.0]
    }

    pub fn set(&mut self, r: ParamRef, value: Tensor) {
        assert_eq!(
            self.values[r.0].shape(),
            value.shape(),
            "parameter {} cannot change shape",
            self.names[r.0]
        );
        self.values[r.0] = value;
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn scalar(&self, r: ParamRef) -> f64 {
        self.values[r.0].as_scalar()
    }

    /// One leaf per parameter, in index order; `vars[r.0]` is the handle for
    /// `ParamRef(r.0)`.
    pub fn register_all(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }
}
