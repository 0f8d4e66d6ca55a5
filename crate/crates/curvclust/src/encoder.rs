//! Fully Riemannian graph convolutions over the product manifold.
//!
//! Per factor, nodes are lifted from feature space through the pole
//! exponential map, passed through two (linear layer -> attentive
//! aggregation) blocks, and never leave the manifold: the linear layer's
//! t-component is solved in closed form (generalized Lorentz transform) and
//! the aggregation renormalizes the weighted sum back onto the factor, so no
//! tangent-space detour is involved. The free factor runs the same pipeline
//! with an unconstrained t-scale and a plain weighted-sum aggregation.
//!
//! Everything is expressed twice: tape ops on row matrices (the training
//! path) and plain `f64` single-point helpers (used by tests, the optimizer
//! retraction, and evaluation); the two are pinned against each other in
//! tests.

use std::cell::Cell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diff::{Tape, Tensor, Var};
use crate::graph::Graph;
use crate::manifold::{CurvatureSign, ProductManifold, RestrictedFactor};
use crate::params::{ParamRef, ParamStore};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("aggregate is degenerate: |<s,s>_c| = {0:.3e} < 1e-12")]
    DegenerateAggregate(f64),
}

/// Keeps the rescaled spatial norm strictly inside the spherical cap.
const SPHERICAL_MARGIN: f64 = 1e-6;
/// Below this quadratic norm an aggregate has no usable direction.
const AGGREGATE_FLOOR: f64 = 1e-12;
/// Margin on arcosh/arccos domain clamps in differentiable code. Coincident
/// point pairs land on the domain boundary only up to float noise (~1e-16);
/// without the margin that noise randomly toggles between a zeroed gradient
/// and a 1/sqrt(u^2-1) amplifier. The margin costs at most ~6e-7 of
/// distance.
const DOMAIN_MARGIN: f64 = 1e-13;

// ---------------------------------------------------------------------------
// plain f64 single-point operators
// ---------------------------------------------------------------------------

/// Generalized Lorentz transform of one point: spatial part `w * z_s`,
/// t-component solved so the output lands on the target factor (Manifold
/// Preserving). Spherical inputs whose transformed spatial norm would leave
/// the cap are rescaled to norm `(1 - 1e-6)/sqrt(c)`.
pub fn glt_point(factor: &RestrictedFactor, w: &Tensor, z: &[f64]) -> Vec<f64> {
    linear_point_impl(factor, w, None, z, None)
}

/// Linear layer of one point: `[w_t z_t, w * z_s + b]` with the same closed
/// t-solve as [`glt_point`].
pub fn linear_point(factor: &RestrictedFactor, w: &Tensor, b: &[f64], z: &[f64]) -> Vec<f64> {
    linear_point_impl(factor, w, Some(b), z, None)
}

fn linear_point_impl(
    factor: &RestrictedFactor,
    w: &Tensor,
    b: Option<&[f64]>,
    z: &[f64],
    diag: Option<&EncoderDiag>,
) -> Vec<f64> {
    let d_in = w.cols();
    let d_out = w.rows();
    assert_eq!(z.len(), d_in + 1, "point has wrong ambient dimension");
    if let Some(b) = b {
        assert_eq!(b.len(), d_out, "bias has wrong dimension");
    }
    let mag = factor.magnitude();
    let mut y = vec![0.0; d_out];
    for (r, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..d_in {
            acc += w.get(r, c) * z[1 + c];
        }
        *out = acc + b.map_or(0.0, |b| b[r]);
    }
    let mut ell: f64 = y.iter().map(|v| v * v).sum();
    if matches!(factor.sign(), CurvatureSign::Positive) {
        let cap = (1.0 - SPHERICAL_MARGIN).powi(2) / mag;
        if ell > cap {
            let scale = (cap / ell).sqrt();
            for v in &mut y {
                *v *= scale;
            }
            ell = y.iter().map(|v| v * v).sum();
            if let Some(d) = diag {
                d.spherical_rescales.set(d.spherical_rescales.get() + 1);
            }
        }
    }
    let zt = (factor.sign().as_f64() * (1.0 / factor.curvature() - ell)).sqrt();
    let mut out = Vec::with_capacity(d_out + 1);
    out.push(zt);
    out.extend_from_slice(&y);
    out
}

/// Softmax of `-tau * d - gamma` over a neighborhood's distances.
pub fn attention_weights(distances: &[f64], tau: f64, gamma: f64) -> Vec<f64> {
    let logits: Vec<f64> = distances.iter().map(|d| -tau * d - gamma).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Weighted geometric centroid: `s / (sqrt|c| sqrt|<s,s>_c|)` with
/// `s = sum nu_j h_j`. Fails when the weighted sum has no quadratic norm to
/// normalize by (spherical cancellation).
pub fn aggregate_point(
    factor: &RestrictedFactor,
    points: &[Vec<f64>],
    weights: &[f64],
) -> Result<Vec<f64>, EncoderError> {
    assert_eq!(points.len(), weights.len());
    let dim = factor.ambient_dim();
    let mut s = vec![0.0; dim];
    for (p, &nu) in points.iter().zip(weights) {
        for (acc, &v) in s.iter_mut().zip(p) {
            *acc += nu * v;
        }
    }
    let inner = factor.inner(&s, &s);
    let a = inner.abs();
    if a < AGGREGATE_FLOOR {
        return Err(EncoderError::DegenerateAggregate(a));
    }
    let denom = factor.magnitude().sqrt() * a.sqrt();
    Ok(s.into_iter().map(|v| v / denom).collect())
}

// ---------------------------------------------------------------------------
// tape-side building blocks (rows = items)
// ---------------------------------------------------------------------------

/// Curvature scalars of one restricted factor on the tape.
#[derive(Clone, Copy)]
pub struct FactorVars {
    pub sign: CurvatureSign,
    /// `|c| = softplus(param)`.
    pub mag: Var,
    pub sqrt_mag: Var,
    pub inv_mag: Var,
}

impl FactorVars {
    pub fn new(tape: &Tape, sign: CurvatureSign, magnitude_param: Var) -> Self {
        let mag = tape.softplus(magnitude_param);
        Self { sign, mag, sqrt_mag: tape.sqrt(mag), inv_mag: tape.pow_const(mag, -1.0) }
    }

    /// Signed curvature value `sign * |c|` as a tape scalar.
    pub fn curvature(&self, tape: &Tape) -> Var {
        tape.mul_const(self.mag, self.sign.as_f64())
    }
}

/// Counters for numeric events worth surfacing in logs.
#[derive(Debug, Default)]
pub struct EncoderDiag {
    pub spherical_rescales: Cell<usize>,
    pub degenerate_aggregates: Cell<usize>,
}

/// Row-wise signed inner product `sgn(c) a_t b_t + a_s . b_s` -> n x 1.
pub fn minkowski_rows(tape: &Tape, fv: &FactorVars, a: Var, b: Var) -> Var {
    let (_, cols) = tape.shape(a);
    let prod = tape.mul(a, b);
    let t = tape.slice_cols(prod, 0, 1);
    let sp = tape.sum_rows(tape.slice_cols(prod, 1, cols));
    match fv.sign {
        CurvatureSign::Negative => tape.sub(sp, t),
        CurvatureSign::Positive => tape.add(sp, t),
    }
}

/// Geodesic distance from the signed inner product of point pairs.
fn distance_from_inner(tape: &Tape, fv: &FactorVars, inner: Var) -> Var {
    match fv.sign {
        CurvatureSign::Negative => {
            let u = tape.mul_sv(tape.neg(inner), fv.mag);
            let uc = tape.clamp_min(u, 1.0 + DOMAIN_MARGIN);
            tape.div_sv(tape.arcosh(uc), fv.sqrt_mag)
        }
        CurvatureSign::Positive => {
            let u = tape.mul_sv(inner, fv.mag);
            let uc = tape.clamp(u, -1.0 + DOMAIN_MARGIN, 1.0 - DOMAIN_MARGIN);
            tape.div_sv(tape.arccos(uc), fv.sqrt_mag)
        }
    }
}

/// Row-wise geodesic distance between aligned rows of `a` and `b` -> n x 1.
pub fn factor_distance_rows(tape: &Tape, fv: &FactorVars, a: Var, b: Var) -> Var {
    let inner = minkowski_rows(tape, fv, a, b);
    distance_from_inner(tape, fv, inner)
}

/// All-pairs geodesic distances between rows of `z` (N) and rows of `c` (K)
/// -> N x K.
pub fn factor_distance_cross(tape: &Tape, fv: &FactorVars, z: Var, c: Var) -> Var {
    let (_, cols) = tape.shape(z);
    let zt = tape.slice_cols(z, 0, 1);
    let zs = tape.slice_cols(z, 1, cols);
    let ct = tape.slice_cols(c, 0, 1);
    let cs = tape.slice_cols(c, 1, cols);
    let t_outer = tape.matmul(zt, tape.transpose(ct));
    let s_outer = tape.matmul(zs, tape.transpose(cs));
    let inner = match fv.sign {
        CurvatureSign::Negative => tape.sub(s_outer, t_outer),
        CurvatureSign::Positive => tape.add(s_outer, t_outer),
    };
    distance_from_inner(tape, fv, inner)
}

/// Row-wise Euclidean distance between aligned rows -> n x 1.
pub fn free_distance_rows(tape: &Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.sum_rows(tape.mul(d, d));
    tape.sqrt(tape.clamp_min(sq, 1e-24))
}

/// All-pairs squared Euclidean distances between rows of `z` (N) and `c` (K)
/// -> N x K.
pub fn free_distance_sq_cross(tape: &Tape, z: Var, c: Var) -> Var {
    let cross = tape.mul_const(tape.matmul(z, tape.transpose(c)), -2.0);
    let zsq = tape.sum_rows(tape.mul(z, z));
    let csq = tape.sum_rows(tape.mul(c, c));
    let with_rows = tape.add_col(cross, zsq);
    let all = tape.add_row(with_rows, tape.transpose(csq));
    tape.clamp_min(all, 0.0)
}

/// Pole exponential map of spatial tangent rows -> on-factor rows
/// `[z_t | z_s]`.
pub fn exp_at_pole_rows(tape: &Tape, fv: &FactorVars, v: Var) -> Var {
    let r2 = tape.clamp_min(tape.sum_rows(tape.mul(v, v)), 1e-24);
    let r = tape.sqrt(r2);
    let s = tape.mul_sv(r, fv.sqrt_mag);
    let (zt, ratio) = match fv.sign {
        CurvatureSign::Negative => (
            tape.div_sv(tape.cosh(s), fv.sqrt_mag),
            tape.div(tape.sinh(s), s),
        ),
        CurvatureSign::Positive => (
            tape.div_sv(tape.cos(s), fv.sqrt_mag),
            tape.div(tape.sin(s), s),
        ),
    };
    let zs = tape.mul_col(v, ratio);
    tape.concat_cols(&[zt, zs])
}

/// Pole logarithmic map of on-factor rows -> spatial tangent rows.
pub fn log_at_pole_rows(tape: &Tape, fv: &FactorVars, z: Var) -> Var {
    let (_, cols) = tape.shape(z);
    let zt = tape.slice_cols(z, 0, 1);
    let zs = tape.slice_cols(z, 1, cols);
    // <pole, z>_c scaled by +-|c| reduces to sqrt|c| * z_t for both signs
    let u = tape.mul_sv(zt, fv.sqrt_mag);
    let d = match fv.sign {
        CurvatureSign::Negative => {
            tape.div_sv(tape.arcosh(tape.clamp_min(u, 1.0 + DOMAIN_MARGIN)), fv.sqrt_mag)
        }
        CurvatureSign::Positive => {
            tape.div_sv(tape.arccos(tape.clamp(u, -1.0 + DOMAIN_MARGIN, 1.0 - DOMAIN_MARGIN)), fv.sqrt_mag)
        }
    };
    let norm = tape.sqrt(tape.clamp_min(tape.sum_rows(tape.mul(zs, zs)), 1e-24));
    let unit = tape.div_col(zs, norm);
    tape.mul_col(unit, d)
}

/// Row-wise generalized Lorentz transform (no bias).
pub fn glt_rows(tape: &Tape, fv: &FactorVars, w: Var, z: Var, diag: &EncoderDiag) -> Var {
    linear_rows_impl(tape, fv, w, None, z, diag)
}

/// Row-wise manifold linear layer `[w_t z_t | W z_s + b]`.
pub fn linear_rows(tape: &Tape, fv: &FactorVars, w: Var, b: Var, z: Var, diag: &EncoderDiag) -> Var {
    linear_rows_impl(tape, fv, w, Some(b), z, diag)
}

fn linear_rows_impl(
    tape: &Tape,
    fv: &FactorVars,
    w: Var,
    b: Option<Var>,
    z: Var,
    diag: &EncoderDiag,
) -> Var {
    let (_, cols) = tape.shape(z);
    let zs = tape.slice_cols(z, 1, cols);
    let mut y = tape.matmul(zs, tape.transpose(w));
    if let Some(b) = b {
        y = tape.add_row(y, b);
    }
    let ell = tape.sum_rows(tape.mul(y, y));
    let (zt, y_out) = match fv.sign {
        CurvatureSign::Negative => {
            let arg = tape.add_sv(ell, fv.inv_mag);
            (tape.sqrt(arg), y)
        }
        CurvatureSign::Positive => {
            // rows beyond the cap are pulled back to spatial norm
            // (1 - 1e-6)/sqrt(c); inside the cap the clamp is the identity
            let margin = (1.0 - SPHERICAL_MARGIN).powi(2);
            let ratio = tape.mul_const(tape.mul_sv(ell, fv.mag), 1.0 / margin);
            let over = tape.value(ratio).data().iter().filter(|&&v| v > 1.0).count();
            if over > 0 {
                diag.spherical_rescales.set(diag.spherical_rescales.get() + over);
            }
            let t = tape.clamp_min(ratio, 1.0);
            let y_scaled = tape.div_col(y, tape.sqrt(t));
            let ell_scaled = tape.div(ell, t);
            let arg = tape.neg(tape.sub_sv(ell_scaled, fv.inv_mag));
            (tape.sqrt(arg), y_scaled)
        }
    };
    tape.concat_cols(&[zt, y_out])
}

/// Image of a restricted view in the free view's ambient space: a gLT into
/// spatial dimension `d0 - 1` followed by the pole log map, padded with the
/// zero t-component -> N x d0 with first column 0.
pub fn view_image_rows(
    tape: &Tape,
    fv: &FactorVars,
    w: Var,
    z: Var,
    diag: &EncoderDiag,
) -> Var {
    let transformed = glt_rows(tape, fv, w, z, diag);
    let tangent = log_at_pole_rows(tape, fv, transformed);
    let (rows, _) = tape.shape(tangent);
    let zero = tape.constant(Tensor::zeros(rows, 1));
    tape.concat_cols(&[zero, tangent])
}

// ---------------------------------------------------------------------------
// neighborhood structure
// ---------------------------------------------------------------------------

/// Flattened closed neighborhoods: for each anchor i in order, the pairs
/// (i, j) with j in {i} followed by i's neighbors ascending. `offsets`
/// delimits each anchor's segment.
pub struct NeighborIndex {
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub offsets: Rc<Vec<usize>>,
    pub num_nodes: usize,
}

impl NeighborIndex {
    pub fn new(g: &Graph) -> Self {
        let n = g.num_nodes();
        let mut src = Vec::with_capacity(n + 2 * g.num_edges());
        let mut dst = Vec::with_capacity(n + 2 * g.num_edges());
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            src.push(i);
            dst.push(i);
            for &j in g.neighbors(i) {
                src.push(i);
                dst.push(j);
            }
            offsets.push(src.len());
        }
        Self { src: Rc::new(src), dst: Rc::new(dst), offsets: Rc::new(offsets), num_nodes: n }
    }
}

/// Distance-based attention over closed neighborhoods -> one weight per
/// (anchor, neighbor) pair, summing to 1 within each anchor's segment.
fn attention_from_distances(tape: &Tape, idx: &NeighborIndex, d: Var, tau: Var, gamma: Var) -> Var {
    let logits = tape.neg(tape.add_sv(tape.mul_sv(d, tau), gamma));
    tape.segment_softmax(logits, idx.offsets.clone())
}

/// One restricted-factor convolution block: manifold linear layer followed
/// by attentive geometric-centroid aggregation.
#[allow(clippy::too_many_arguments)]
pub fn restricted_block(
    tape: &Tape,
    fv: &FactorVars,
    idx: &NeighborIndex,
    h: Var,
    w: Var,
    b: Var,
    tau: Var,
    gamma: Var,
    diag: &EncoderDiag,
) -> Var {
    let h = linear_rows(tape, fv, w, b, h, diag);
    let anchors = tape.gather_rows(h, idx.src.clone());
    let neighbors = tape.gather_rows(h, idx.dst.clone());
    let d = factor_distance_rows(tape, fv, neighbors, anchors);
    let nu = attention_from_distances(tape, idx, d, tau, gamma);
    let weighted = tape.mul_col(neighbors, nu);
    let s = tape.scatter_add_rows(weighted, idx.src.clone(), idx.num_nodes);
    let inner = minkowski_rows(tape, fv, s, s);
    let a = tape.abs(inner);
    // degenerate rows (spherical cancellation) fall back to the node's own
    // point; the clamp keeps the unused normalized row finite
    let degenerate: Vec<usize> = tape
        .value(a)
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < AGGREGATE_FLOOR)
        .map(|(i, _)| i)
        .collect();
    let denom = tape.mul_sv(tape.sqrt(tape.clamp_min(a, AGGREGATE_FLOOR)), fv.sqrt_mag);
    let normalized = tape.div_col(s, denom);
    if degenerate.is_empty() {
        normalized
    } else {
        diag.degenerate_aggregates
            .set(diag.degenerate_aggregates.get() + degenerate.len());
        let n = idx.num_nodes;
        let mut keep = vec![1.0; n];
        for &i in &degenerate {
            keep[i] = 0.0;
        }
        let drop: Vec<f64> = keep.iter().map(|&k| 1.0 - k).collect();
        let keep = tape.constant(Tensor::column(keep));
        let drop = tape.constant(Tensor::column(drop));
        tape.add(tape.mul_col(normalized, keep), tape.mul_col(h, drop))
    }
}

/// One free-factor block: `[w_t z_t | W z_s + b]` then attentive plain
/// weighted-sum aggregation under Euclidean distance.
#[allow(clippy::too_many_arguments)]
pub fn free_block(
    tape: &Tape,
    idx: &NeighborIndex,
    h: Var,
    t_scale: Var,
    w: Var,
    b: Var,
    tau: Var,
    gamma: Var,
) -> Var {
    let (_, cols) = tape.shape(h);
    let zt = tape.mul_sv(tape.slice_cols(h, 0, 1), t_scale);
    let zs = tape.add_row(tape.matmul(tape.slice_cols(h, 1, cols), tape.transpose(w)), b);
    let h = tape.concat_cols(&[zt, zs]);
    let anchors = tape.gather_rows(h, idx.src.clone());
    let neighbors = tape.gather_rows(h, idx.dst.clone());
    let d = free_distance_rows(tape, neighbors, anchors);
    let nu = attention_from_distances(tape, idx, d, tau, gamma);
    let weighted = tape.mul_col(neighbors, nu);
    tape.scatter_add_rows(weighted, idx.src.clone(), idx.num_nodes)
}

// ---------------------------------------------------------------------------
// encoder parameters and the full forward pass
// ---------------------------------------------------------------------------

/// Parameter references for one convolution layer.
#[derive(Debug, Clone)]
pub struct LayerRefs {
    pub weight: ParamRef,
    pub bias: ParamRef,
    /// Softplus-reparameterized inverse temperature.
    pub tau_param: ParamRef,
    pub gamma: ParamRef,
    /// Free factor only: unconstrained t-scale.
    pub t_scale: Option<ParamRef>,
}

#[derive(Debug, Clone)]
pub struct CurvatureMlpRefs {
    pub w1: ParamRef,
    pub b1: ParamRef,
    pub w2: ParamRef,
    pub b2: ParamRef,
}

/// All encoder parameters, as references into the shared store.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub lift_free: ParamRef,
    pub lift_restricted: Vec<ParamRef>,
    pub free_layers: Vec<LayerRefs>,
    pub restricted_layers: Vec<Vec<LayerRefs>>,
    pub mlp: CurvatureMlpRefs,
    pub num_layers: usize,
}

/// Uniform fan-based init in +-sqrt(6 / (d_in + d_out)).
pub fn fan_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

impl EncoderModel {
    /// Registers freshly initialized parameters: projection per factor, two
    /// convolution layers per factor, and the 2-layer curvature MLP.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        manifold: &ProductManifold,
        feature_dim: usize,
        mlp_hidden: usize,
    ) -> Self {
        let tau_init = crate::diff::softplus_inverse(1.0);
        let num_layers = 2;
        let d0 = manifold.free.dim();

        let lift_free = store.add("lift.free", fan_init(rng, d0, feature_dim));
        let lift_restricted = manifold
            .restricted
            .iter()
            .enumerate()
            .map(|(m, f)| store.add(format!("lift.r{m}"), fan_init(rng, f.dim(), feature_dim)))
            .collect();

        let mut free_layers = Vec::new();
        for l in 0..num_layers {
            free_layers.push(LayerRefs {
                weight: store.add(format!("free.l{l}.weight"), fan_init(rng, d0 - 1, d0 - 1)),
                bias: store.add(format!("free.l{l}.bias"), Tensor::zeros(1, d0 - 1)),
                tau_param: store.add(format!("free.l{l}.tau"), Tensor::scalar(tau_init)),
                gamma: store.add(format!("free.l{l}.gamma"), Tensor::scalar(0.0)),
                t_scale: Some(store.add(format!("free.l{l}.t_scale"), Tensor::scalar(1.0))),
            });
        }

        let mut restricted_layers = Vec::new();
        for (m, f) in manifold.restricted.iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..num_layers {
                layers.push(LayerRefs {
                    weight: store.add(format!("r{m}.l{l}.weight"), fan_init(rng, f.dim(), f.dim())),
                    bias: store.add(format!("r{m}.l{l}.bias"), Tensor::zeros(1, f.dim())),
                    tau_param: store.add(format!("r{m}.l{l}.tau"), Tensor::scalar(tau_init)),
                    gamma: store.add(format!("r{m}.l{l}.gamma"), Tensor::scalar(0.0)),
                    t_scale: None,
                });
            }
            restricted_layers.push(layers);
        }

        let m_plus_1 = manifold.num_restricted() + 1;
        let mlp = CurvatureMlpRefs {
            w1: store.add("mlp.w1", fan_init(rng, mlp_hidden, m_plus_1)),
            b1: store.add("mlp.b1", Tensor::zeros(1, mlp_hidden)),
            w2: store.add("mlp.w2", fan_init(rng, 1, mlp_hidden)),
            b2: store.add("mlp.b2", Tensor::zeros(1, 1)),
        };

        Self { lift_free, lift_restricted, free_layers, restricted_layers, mlp, num_layers }
    }
}

/// Tape handles for the per-factor views produced by one forward pass.
pub struct EncodedViews {
    /// N x d0.
    pub free: Var,
    /// Per restricted factor, N x (d_m + 1), on-manifold rows.
    pub restricted: Vec<Var>,
}

/// Forward values of the views, detached from the tape.
pub struct EmbeddingSet {
    pub free: Tensor,
    pub restricted: Vec<Tensor>,
}

/// Feature projection into one restricted factor: tangent `(0, proj x)` at
/// the pole pushed through the exponential map.
pub fn lift_restricted_rows(tape: &Tape, fv: &FactorVars, x: Var, proj: Var) -> Var {
    let u = tape.matmul(x, tape.transpose(proj));
    exp_at_pole_rows(tape, fv, u)
}

/// Full fRGCN forward pass over every factor.
pub fn encode(
    tape: &Tape,
    model: &EncoderModel,
    vars: &[Var],
    factor_vars: &[FactorVars],
    x: Var,
    idx: &NeighborIndex,
    diag: &EncoderDiag,
) -> EncodedViews {
    let free = {
        let mut h = tape.matmul(x, tape.transpose(vars[model.lift_free.0]));
        for layer in &model.free_layers {
            let tau = tape.softplus(vars[layer.tau_param.0]);
            h = free_block(
                tape,
                idx,
                h,
                vars[layer.t_scale.expect("free layer has t_scale").0],
                vars[layer.weight.0],
                vars[layer.bias.0],
                tau,
                vars[layer.gamma.0],
            );
        }
        h
    };

    let mut restricted = Vec::with_capacity(factor_vars.len());
    for (m, fv) in factor_vars.iter().enumerate() {
        let mut h = lift_restricted_rows(tape, fv, x, vars[model.lift_restricted[m].0]);
        for layer in &model.restricted_layers[m] {
            let tau = tape.softplus(vars[layer.tau_param.0]);
            h = restricted_block(
                tape,
                fv,
                idx,
                h,
                vars[layer.weight.0],
                vars[layer.bias.0],
                tau,
                vars[layer.gamma.0],
                diag,
            );
        }
        restricted.push(h);
    }

    EncodedViews { free, restricted }
}

/// Fine-grained node curvature estimates: a 2-layer tanh MLP over
/// `[(z_i^0)_1, c_1, ..., c_M]` -> N x 1.
pub fn estimate_node_curvature(
    tape: &Tape,
    mlp: &CurvatureMlpRefs,
    vars: &[Var],
    free_view: Var,
    factor_vars: &[FactorVars],
) -> Var {
    let (n, _) = tape.shape(free_view);
    let rot_coord = tape.slice_cols(free_view, 0, 1);
    let curvatures: Vec<Var> = factor_vars.iter().map(|fv| fv.curvature(tape)).collect();
    let c_row = tape.concat_cols(&curvatures);
    let c_rep = tape.repeat_rows(c_row, n);
    let input = tape.concat_cols(&[rot_coord, c_rep]);
    let h = tape.tanh(tape.add_row(tape.matmul(input, tape.transpose(vars[mlp.w1.0])), vars[mlp.b1.0]));
    tape.add_row(tape.matmul(h, tape.transpose(vars[mlp.w2.0])), vars[mlp.b2.0])
}

/// Extracts detached embedding values from the tape.
pub fn embedding_values(tape: &Tape, views: &EncodedViews) -> EmbeddingSet {
    EmbeddingSet {
        free: tape.value(views.free),
        restricted: views.restricted.iter().map(|&v| tape.value(v)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::FreeFactor;
    use rand::SeedableRng;

    const TEST_CURVATURES: [f64; 5] = [-2.0, -1.0, -0.1, 0.1, 1.0];

    fn factor_for(c: f64, dim: usize) -> RestrictedFactor {
        let sign = if c < 0.0 { CurvatureSign::Negative } else { CurvatureSign::Positive };
        RestrictedFactor::new(sign, dim, c.abs())
    }

    fn random_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn random_point(f: &RestrictedFactor, rng: &mut ChaCha8Rng, spread: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..f.dim()).map(|_| rng.gen_range(-spread..spread)).collect();
        f.exp_at_pole(&v).unwrap()
    }

    #[test]
    fn glt_fixes_the_pole() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in TEST_CURVATURES {
            let f = factor_for(c, 4);
            let w = random_weight(&mut rng, 6, 4);
            let out = glt_point(&f, &w, &f.pole());
            let target = factor_for(c, 6);
            assert!((out[0] - target.pole()[0]).abs() < 1e-12, "curvature {c}");
            assert!(out[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn glt_is_manifold_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in TEST_CURVATURES {
            let f = factor_for(c, 4);
            for _ in 0..100 {
                let z = random_point(&f, &mut rng, 1.0);
                let d_out = rng.gen_range(2..7usize);
                let w = random_weight(&mut rng, d_out, 4);
                let out = glt_point(&f, &w, &z);
                let target = factor_for(c, d_out);
                assert!(
                    target.constraint_violation(&out) <= 1e-6,
                    "curvature {c}: violation {}",
                    target.constraint_violation(&out)
                );
            }
        }
    }

    #[test]
    fn glt_identity_weight_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in TEST_CURVATURES {
            let f = factor_for(c, 3);
            let mut eye = Tensor::zeros(3, 3);
            for i in 0..3 {
                eye.set(i, i, 1.0);
            }
            let z = random_point(&f, &mut rng, 0.8);
            let out = glt_point(&f, &eye, &z);
            for (a, b) in out.iter().zip(&z) {
                assert!((a - b).abs() < 1e-9, "curvature {c}");
            }
        }
    }

    #[test]
    fn linear_layer_with_zero_bias_reduces_to_glt() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = factor_for(-1.0, 4);
        let w = random_weight(&mut rng, 5, 4);
        let z = random_point(&f, &mut rng, 1.0);
        let a = glt_point(&f, &w, &z);
        let b = linear_point(&f, &w, &[0.0; 5], &z);
        assert_eq!(a, b);
    }

    #[test]
    fn linear_layer_is_manifold_preserving_both_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for c in [-1.0, 1.0] {
            let f = factor_for(c, 4);
            for _ in 0..1000 {
                let z = random_point(&f, &mut rng, 1.2);
                let d_out = rng.gen_range(2..7usize);
                let w = random_weight(&mut rng, d_out, 4);
                let b: Vec<f64> = (0..d_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let out = linear_point(&f, &w, &b, &z);
                let target = factor_for(c, d_out);
                assert!(target.constraint_violation(&out) <= 1e-6, "curvature {c}");
            }
        }
    }

    #[test]
    fn spherical_overflow_is_rescaled_onto_the_cap() {
        let f = factor_for(1.0, 2);
        let w = Tensor::from_rows(&[vec![100.0, 0.0], vec![0.0, 100.0]]);
        let z = f.exp_at_pole(&[0.7, 0.2]).unwrap();
        let out = glt_point(&f, &w, &z);
        assert!(f.constraint_violation(&out) <= 1e-6);
        let spatial: f64 = out[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((spatial - (1.0 - SPHERICAL_MARGIN)).abs() < 1e-9);
    }

    #[test]
    fn attention_weights_uniform_when_equidistant() {
        let w = attention_weights(&[2.0, 2.0, 2.0], 1.0, 0.3);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_ignore_gamma_shift() {
        let d = [0.5, 1.0, 3.0];
        let a = attention_weights(&d, 2.0, 0.0);
        let b = attention_weights(&d, 2.0, 5.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn large_tau_concentrates_on_self() {
        let d = [0.0, 1.0, 2.0]; // self at distance 0
        let w = attention_weights(&d, 50.0, 0.0);
        assert!(w[0] > 0.999999);
    }

    #[test]
    fn aggregate_singleton_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for c in TEST_CURVATURES {
            let f = factor_for(c, 3);
            let h = random_point(&f, &mut rng, 1.0);
            let out = aggregate_point(&f, &[h.clone()], &[1.0]).unwrap();
            for (a, b) in out.iter().zip(&h) {
                assert!((a - b).abs() <= 1e-9, "curvature {c}");
            }
        }
    }

    #[test]
    fn aggregate_of_identical_points_is_that_point() {
        let f = factor_for(-1.0, 3);
        let h = f.exp_at_pole(&[0.3, -0.2, 0.5]).unwrap();
        let out = aggregate_point(&f, &[h.clone(), h.clone()], &[0.3, 0.7]).unwrap();
        for (a, b) in out.iter().zip(&h) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_output_is_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = factor_for(-1.0, 3);
        for _ in 0..100 {
            let k = rng.gen_range(2..5usize);
            let pts: Vec<Vec<f64>> = (0..k).map(|_| random_point(&f, &mut rng, 1.0)).collect();
            let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            let out = aggregate_point(&f, &pts, &w).unwrap();
            assert!(f.constraint_violation(&out) <= 1e-9);
        }
    }

    #[test]
    fn spherical_cancellation_is_degenerate() {
        let f = factor_for(1.0, 2);
        let p = f.pole();
        let anti: Vec<f64> = p.iter().map(|v| -v).collect();
        let err = aggregate_point(&f, &[p, anti], &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, EncoderError::DegenerateAggregate(_)));
    }

    /// The tape-side rows must agree with the f64 single-point path.
    #[test]
    fn tape_linear_rows_match_point_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for c in [-1.5, 0.7] {
            let f = factor_for(c, 4);
            let w = random_weight(&mut rng, 5, 4);
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let pts: Vec<Vec<f64>> = (0..6).map(|_| random_point(&f, &mut rng, 0.8)).collect();

            let tape = Tape::new();
            let mag_leaf = tape.leaf(Tensor::scalar(f.magnitude_param()));
            let fv = FactorVars::new(&tape, f.sign(), mag_leaf);
            let z = tape.constant(Tensor::from_rows(&pts));
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(Tensor::row(b.clone()));
            let diag = EncoderDiag::default();
            let out = linear_rows(&tape, &fv, wv, bv, z, &diag);
            let out_val = tape.value(out);

            for (r, p) in pts.iter().enumerate() {
                let expect = linear_point(&f, &w, &b, p);
                for (cix, e) in expect.iter().enumerate() {
                    assert!((out_val.get(r, cix) - e).abs() < 1e-12, "curvature {c}");
                }
            }
        }
    }

    #[test]
    fn tape_distance_matches_manifold_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in TEST_CURVATURES {
            let f = factor_for(c, 3);
            let a: Vec<Vec<f64>> = (0..5).map(|_| random_point(&f, &mut rng, 0.6)).collect();
            let b: Vec<Vec<f64>> = (0..5).map(|_| random_point(&f, &mut rng, 0.6)).collect();
            let tape = Tape::new();
            let mag_leaf = tape.leaf(Tensor::scalar(f.magnitude_param()));
            let fv = FactorVars::new(&tape, f.sign(), mag_leaf);
            let av = tape.constant(Tensor::from_rows(&a));
            let bv = tape.constant(Tensor::from_rows(&b));
            let d = factor_distance_rows(&tape, &fv, av, bv);
            let dval = tape.value(d);
            for i in 0..5 {
                let expect = f.distance(&a[i], &b[i]).unwrap();
                assert!((dval.get(i, 0) - expect).abs() < 1e-9, "curvature {c}");
            }
        }
    }

    #[test]
    fn tape_exp_log_rows_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for c in TEST_CURVATURES {
            let f = factor_for(c, 3);
            let spread = if c > 0.0 { 0.5 } else { 1.5 };
            let v: Vec<Vec<f64>> =
                (0..6).map(|_| (0..3).map(|_| rng.gen_range(-spread..spread)).collect()).collect();
            let tape = Tape::new();
            let mag_leaf = tape.leaf(Tensor::scalar(f.magnitude_param()));
            let fv = FactorVars::new(&tape, f.sign(), mag_leaf);
            let vv = tape.constant(Tensor::from_rows(&v));
            let z = exp_at_pole_rows(&tape, &fv, vv);
            let back = log_at_pole_rows(&tape, &fv, z);
            let back_val = tape.value(back);
            for (r, row) in v.iter().enumerate() {
                for (cix, e) in row.iter().enumerate() {
                    assert!((back_val.get(r, cix) - e).abs() < 1e-6, "curvature {c}");
                }
            }
        }
    }

    fn tiny_setup(
        edges: &[(usize, usize)],
        feats: &[Vec<f64>],
    ) -> (Graph, ProductManifold) {
        let g = Graph::new(edges, Tensor::from_rows(feats), None).unwrap();
        let manifold = ProductManifold::new(
            FreeFactor::new(4),
            vec![factor_for(-1.0, 3), factor_for(1.0, 2)],
        );
        (g, manifold)
    }

    fn run_encode(g: &Graph, manifold: &ProductManifold, seed: u64) -> (EmbeddingSet, EncoderDiag) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EncoderModel::init(&mut store, &mut rng, manifold, g.num_features(), 8);
        let mag_refs: Vec<ParamRef> = manifold
            .restricted
            .iter()
            .enumerate()
            .map(|(m, f)| store.add(format!("mag{m}"), Tensor::scalar(f.magnitude_param())))
            .collect();
        let tape = Tape::new();
        let vars = store.register_all(&tape);
        let factor_vars: Vec<FactorVars> = manifold
            .restricted
            .iter()
            .zip(&mag_refs)
            .map(|(f, r)| FactorVars::new(&tape, f.sign(), vars[r.0]))
            .collect();
        let x = tape.constant(g.features().clone());
        let idx = NeighborIndex::new(g);
        let diag = EncoderDiag::default();
        let views = encode(&tape, &model, &vars, &factor_vars, x, &idx, &diag);
        (embedding_values(&tape, &views), diag)
    }

    #[test]
    fn encode_keeps_every_row_on_manifold() {
        let (g, manifold) = tiny_setup(
            &[(0, 1), (1, 2), (2, 3), (0, 3), (1, 3)],
            &(0..5).map(|i| vec![i as f64 * 0.3 - 0.7, 1.0, -0.5]).collect::<Vec<_>>(),
        );
        let (emb, _) = run_encode(&g, &manifold, 11);
        for (f, z) in manifold.restricted.iter().zip(&emb.restricted) {
            for r in 0..z.rows() {
                let row: Vec<f64> = z.row_slice(r).to_vec();
                assert!(f.constraint_violation(&row) <= 1e-6, "row {r}");
            }
        }
    }

    #[test]
    fn encode_zero_features_no_edges_gives_poles() {
        let (g, manifold) = tiny_setup(&[], &vec![vec![0.0, 0.0, 0.0]; 4]);
        let (emb, _) = run_encode(&g, &manifold, 12);
        for v in emb.free.data() {
            assert_eq!(*v, 0.0);
        }
        for (f, z) in manifold.restricted.iter().zip(&emb.restricted) {
            let pole = f.pole();
            for r in 0..z.rows() {
                for (c, expect) in pole.iter().enumerate() {
                    assert!((z.get(r, c) - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 10;
        let feats: Vec<Vec<f64>> =
            (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.gen_bool(0.35) {
                    edges.push((a, b));
                }
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let (g, manifold) = tiny_setup(&edges, &feats);
        let permuted_edges: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut permuted_feats = vec![vec![]; n];
        for (i, row) in feats.iter().enumerate() {
            permuted_feats[perm[i]] = row.clone();
        }
        let g2 = Graph::new(&permuted_edges, Tensor::from_rows(&permuted_feats), None).unwrap();

        let (emb1, _) = run_encode(&g, &manifold, 14);
        let (emb2, _) = run_encode(&g2, &manifold, 14);
        for (z1, z2) in std::iter::once((&emb1.free, &emb2.free))
            .chain(emb1.restricted.iter().zip(&emb2.restricted))
        {
            for i in 0..n {
                for c in 0..z1.cols() {
                    let diff = (z1.get(i, c) - z2.get(perm[i], c)).abs();
                    assert!(diff < 1e-9, "node {i} col {c}: {diff}");
                }
            }
        }
    }

    #[test]
    fn view_image_has_zero_t_component_and_log_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = factor_for(-1.0, 3);
        let d0 = 5;
        let pts: Vec<Vec<f64>> = (0..4).map(|_| random_point(&f, &mut rng, 0.8)).collect();
        let w = random_weight(&mut rng, d0 - 1, 3);

        let tape = Tape::new();
        let mag_leaf = tape.leaf(Tensor::scalar(f.magnitude_param()));
        let fv = FactorVars::new(&tape, f.sign(), mag_leaf);
        let z = tape.constant(Tensor::from_rows(&pts));
        let wv = tape.leaf(w.clone());
        let diag = EncoderDiag::default();
        let img = view_image_rows(&tape, &fv, wv, z, &diag);
        let img_val = tape.value(img);
        assert_eq!(img_val.cols(), d0);

        let target = factor_for(-1.0, d0 - 1);
        for (r, p) in pts.iter().enumerate() {
            assert_eq!(img_val.get(r, 0), 0.0, "t-component must be zero");
            let transformed = glt_point(&f, &w, p);
            let expect_len = target.distance(&target.pole(), &transformed).unwrap();
            let len: f64 = img_val.row_slice(r)[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((len - expect_len).abs() < 1e-6);
        }
        // the pole maps to the zero vector
        let pole_tape = Tape::new();
        let mag_leaf = pole_tape.leaf(Tensor::scalar(f.magnitude_param()));
        let fv = FactorVars::new(&pole_tape, f.sign(), mag_leaf);
        let pz = pole_tape.constant(Tensor::from_rows(&[f.pole()]));
        let wv = pole_tape.leaf(w.clone());
        let img = view_image_rows(&pole_tape, &fv, wv, pz, &diag);
        let v = pole_tape.value(img);
        assert!(v.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn curvature_mlp_zero_weights_output_bias() {
        let manifold = ProductManifold::new(
            FreeFactor::new(3),
            vec![factor_for(-1.0, 2), factor_for(1.0, 2)],
        );
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = EncoderModel::init(&mut store, &mut rng, &manifold, 2, 4);
        // zero both MLP weight matrices, set the final bias
        store.set(model.mlp.w1, Tensor::zeros(4, 3));
        store.set(model.mlp.w2, Tensor::zeros(1, 4));
        store.set(model.mlp.b2, Tensor::scalar(0.37));
        let mag_refs: Vec<ParamRef> = manifold
            .restricted
            .iter()
            .enumerate()
            .map(|(m, f)| store.add(format!("mag{m}"), Tensor::scalar(f.magnitude_param())))
            .collect();

        let tape = Tape::new();
        let vars = store.register_all(&tape);
        let factor_vars: Vec<FactorVars> = manifold
            .restricted
            .iter()
            .zip(&mag_refs)
            .map(|(f, r)| FactorVars::new(&tape, f.sign(), vars[r.0]))
            .collect();
        let z0 = tape.constant(Tensor::from_rows(&[vec![0.5, 1.0, 2.0], vec![-1.0, 0.0, 0.0]]));
        let est = estimate_node_curvature(&tape, &model.mlp, &vars, z0, &factor_vars);
        for v in tape.value(est).data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn free_block_identity_params_keep_isolated_node() {
        // node 3 is isolated; with identity linear params its row must pass
        // through the block unchanged, and aggregation of identical rows
        // returns the same row
        let g = Graph::new(
            &[(0, 1), (1, 2)],
            Tensor::from_rows(&vec![vec![0.3, -0.8, 0.5, 1.1]; 4]),
            None,
        )
        .unwrap();
        let idx = NeighborIndex::new(&g);
        let tape = Tape::new();
        let h0 = Tensor::from_rows(&[
            vec![0.2, -0.4, 0.9, 0.0],
            vec![0.2, -0.4, 0.9, 0.0],
            vec![0.2, -0.4, 0.9, 0.0],
            vec![-1.0, 2.0, 0.25, 0.5],
        ]);
        let h = tape.constant(h0.clone());
        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let out = free_block(
            &tape,
            &idx,
            h,
            tape.scalar_const(1.0),
            tape.constant(eye),
            tape.constant(Tensor::zeros(1, 3)),
            tape.scalar_const(1.3),
            tape.scalar_const(0.2),
        );
        let out_val = tape.value(out);
        // isolated node: singleton neighborhood, value preserved exactly
        for c in 0..4 {
            assert_eq!(out_val.get(3, c), h0.get(3, c));
        }
        // nodes 0..2 all share the same row, so any aggregation returns it
        for r in 0..3 {
            for c in 0..4 {
                assert!((out_val.get(r, c) - h0.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_on_tape() {
        let (g, manifold) = tiny_setup(
            &[(0, 1), (1, 2), (2, 3)],
            &(0..4).map(|i| vec![i as f64, -(i as f64), 0.5]).collect::<Vec<_>>(),
        );
        let idx = NeighborIndex::new(&g);
        let tape = Tape::new();
        let f = &manifold.restricted[0];
        let mag_leaf = tape.leaf(Tensor::scalar(f.magnitude_param()));
        let fv = FactorVars::new(&tape, f.sign(), mag_leaf);
        let pts: Vec<Vec<f64>> = (0..4)
            .map(|i| f.exp_at_pole(&[0.1 * i as f64, -0.2, 0.3]).unwrap())
            .collect();
        let h = tape.constant(Tensor::from_rows(&pts));
        let anchors = tape.gather_rows(h, idx.src.clone());
        let neighbors = tape.gather_rows(h, idx.dst.clone());
        let d = factor_distance_rows(&tape, &fv, neighbors, anchors);
        let tau = tape.scalar_const(1.7);
        let gamma = tape.scalar_const(0.4);
        let nu = attention_from_distances(&tape, &idx, d, tau, gamma);
        let nu_val = tape.value(nu);
        for w in idx.offsets.windows(2) {
            let sum: f64 = (w[0]..w[1]).map(|r| nu_val.get(r, 0)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
