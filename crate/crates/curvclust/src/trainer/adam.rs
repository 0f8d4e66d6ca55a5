//! Adam-style moments for every parameter, with a manifold retraction for
//! the parameters that must stay on a restricted factor.
//!
//! Unconstrained parameters take the plain bias-corrected Adam step.
//! Centroid restricted blocks take the same step in ambient coordinates and
//! are then projected back onto their factor (using the curvature magnitudes
//! the step just updated), which keeps the norm constraints exact without
//! parallel-transport machinery.

use crate::diff::{Gradients, Tensor, Var};
use crate::manifold::{ManifoldError, ProductManifold};
use crate::params::{ParamRef, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        let v = store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { m, v, step: 0, cfg }
    }

    /// One update over every parameter. `vars` must be the leaves registered
    /// from `store` in index order for this step's tape.
    pub fn step(&mut self, store: &mut ParamStore, vars: &[Var], grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for i in 0..store.len() {
            let g = grads.get(vars[i]);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = store.get_mut(ParamRef(i));
            for ((mv, vv), (gv, tv)) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data().iter().zip(theta.data_mut().iter_mut()))
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *tv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Projects each centroid restricted block back onto its factor. Must run
/// after the curvature magnitudes in `manifold` have been synced to their
/// post-step values.
pub fn retract_centroids(
    store: &mut ParamStore,
    manifold: &ProductManifold,
    centroid_blocks: &[ParamRef],
) -> Result<(), ManifoldError> {
    for (factor, &block) in manifold.restricted.iter().zip(centroid_blocks) {
        let tensor = store.get(block).clone();
        let mut rows = Vec::with_capacity(tensor.rows());
        for r in 0..tensor.rows() {
            let row = tensor.row_slice(r);
            // rows already on the factor are kept bit-for-bit so an idle
            // step is a true fixpoint
            if factor.constraint_violation(row) <= 1e-12 {
                rows.push(row.to_vec());
            } else {
                rows.push(factor.project(row)?);
            }
        }
        store.set(block, Tensor::from_rows(&rows));
    }
    Ok(())
}
