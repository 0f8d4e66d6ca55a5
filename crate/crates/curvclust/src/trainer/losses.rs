//! Differentiable loss terms for cluster training.
//!
//! Soft assignments are row-softmaxed negative product distances to the
//! centroids. The Ricci loss rewards intra-cluster membership agreement on
//! positively curved edges; the curvature-consistency loss ties the MLP
//! curvature estimates to graph node curvature; the contrastive losses pair
//! each restricted view with the free view (nodes and centroids) under the
//! dual hard-sample reweighting `|pi' pi - Sim|^beta`.
//!
//! The reweighting factor is a coefficient, not a differentiated quantity:
//! by default the grids are computed from detached values and enter the tape
//! as constants (`reweight_grad` flips that for ablation). Logits are
//! stabilized by subtracting detached row/column maxima, which changes no
//! value and no gradient.

use std::rc::Rc;

use crate::diff::{Tape, Tensor, Var};
use crate::encoder::{self, FactorVars};

/// N x K soft memberships plus the product distances they came from.
pub struct Assignment {
    pub membership: Var,
    pub distances: Var,
}

/// `Pi = softmax_k(-d_P(z_i, phi_k))` over all factors.
pub fn soft_assign(
    tape: &Tape,
    factor_vars: &[FactorVars],
    free_view: Var,
    restricted_views: &[Var],
    centroid_free: Var,
    centroid_blocks: &[Var],
) -> Assignment {
    let mut total_sq = encoder::free_distance_sq_cross(tape, free_view, centroid_free);
    for ((fv, &z), &c) in factor_vars.iter().zip(restricted_views).zip(centroid_blocks) {
        let d = encoder::factor_distance_cross(tape, fv, z, c);
        total_sq = tape.add(total_sq, tape.mul(d, d));
    }
    let dp = tape.sqrt(tape.clamp_min(total_sq, 1e-24));
    let membership = tape.softmax_rows(tape.neg(dp));
    Assignment { membership, distances: dp }
}

/// Per-edge curvature data in tape-ready form.
pub struct EdgeData {
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    /// |E| x 1 edge curvature.
    pub ricci: Tensor,
}

/// `alpha0 * D_inter - D_intra` (Ricci density loss).
///
/// `D_intra = (1/|E|) sum_e Ric_e <pi_i, pi_j>` and `D_inter` sums the
/// off-diagonal membership products, computed as
/// `rowsum(pi_i) rowsum(pi_j) - <pi_i, pi_j>` so its value and gradient match
/// the explicit double loop exactly.
pub fn ricci_loss(tape: &Tape, membership: Var, edges: &EdgeData, k: usize, alpha0: f64) -> Var {
    let num_edges = edges.ricci.rows();
    if num_edges == 0 {
        return tape.scalar_const(0.0);
    }
    let pi_src = tape.gather_rows(membership, edges.src.clone());
    let pi_dst = tape.gather_rows(membership, edges.dst.clone());
    let agree = tape.sum_rows(tape.mul(pi_src, pi_dst));
    let ric = tape.constant(edges.ricci.clone());
    let d_intra = tape.mul_const(tape.sum_all(tape.mul(ric, agree)), 1.0 / num_edges as f64);
    let row_src = tape.sum_rows(pi_src);
    let row_dst = tape.sum_rows(pi_dst);
    let cross = tape.sub(tape.mul(row_src, row_dst), agree);
    let d_inter =
        tape.mul_const(tape.sum_all(tape.mul(ric, cross)), 1.0 / (num_edges as f64 * k as f64));
    tape.sub(tape.mul_const(d_inter, alpha0), d_intra)
}

/// Node curvature targets for the consistency loss.
pub struct NodeCurvatureData {
    /// Non-isolated node ids, ascending.
    pub nodes: Rc<Vec<usize>>,
    /// One target per entry of `nodes`.
    pub ricci: Tensor,
    /// Total node count N (the loss normalizer).
    pub num_nodes: usize,
}

/// `(1/N) sum_i |Ric(i) - chat_i|^2` over non-isolated nodes.
pub fn curvature_loss(tape: &Tape, estimates: Var, data: &NodeCurvatureData) -> Var {
    if data.nodes.is_empty() {
        return tape.scalar_const(0.0);
    }
    let sel = tape.gather_rows(estimates, data.nodes.clone());
    let target = tape.constant(data.ricci.clone());
    let diff = tape.sub(sel, target);
    tape.mul_const(tape.sum_all(tape.mul(diff, diff)), 1.0 / data.num_nodes as f64)
}

/// Bilinear critic grid `zhat S right'` (rows of `zhat` against rows of
/// `right`).
pub fn similarity_grid(tape: &Tape, zhat: Var, critic: Var, right: Var) -> Var {
    tape.matmul(tape.matmul(zhat, critic), tape.transpose(right))
}

/// Scalar dual weight `|agreement - sim|^beta`.
pub fn dual_weight(agreement: f64, sim: f64, beta: u32) -> f64 {
    (agreement - sim).abs().powi(beta as i32)
}

/// How the reweighting grid enters the loss: as a detached constant
/// (default) or as a tape subgraph (ablation).
pub enum WeightGrid {
    Detached(Tensor),
    OnTape(Var),
}

impl WeightGrid {
    fn apply(&self, tape: &Tape, sim: Var) -> Var {
        match self {
            WeightGrid::Detached(w) => {
                let w = tape.constant(w.clone());
                tape.mul(w, sim)
            }
            WeightGrid::OnTape(w) => tape.mul(*w, sim),
        }
    }
}

/// Node-to-node weights `|pi_i' pi_j - sim_ij|^beta` as a detached grid;
/// `agreement` is the N x N membership Gram matrix, computed once per
/// forward pass.
pub fn n2n_weights_detached(agreement: &Tensor, sim: &Tensor, beta: u32) -> Tensor {
    agreement.zip(sim, |a, s| (a - s).abs().powi(beta as i32))
}

/// Node-to-cluster weights `|pi_ik - sim_ik|^beta` as a detached grid.
pub fn n2c_weights_detached(membership: &Tensor, sim: &Tensor, beta: u32) -> Tensor {
    membership.zip(sim, |a, s| (a - s).abs().powi(beta as i32))
}

/// Same grids built on the tape, for the `reweight_grad` ablation.
pub fn n2n_weights_on_tape(tape: &Tape, membership: Var, sim: Var, beta: u32) -> Var {
    let agreement = tape.matmul(membership, tape.transpose(membership));
    tape.pow_const(tape.abs(tape.sub(agreement, sim)), beta as f64)
}

pub fn n2c_weights_on_tape(tape: &Tape, membership: Var, sim: Var, beta: u32) -> Var {
    tape.pow_const(tape.abs(tape.sub(membership, sim)), beta as f64)
}

/// Which way the InfoNCE denominator runs over the N x N grid.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ContrastDirection {
    /// Anchors are rows (restricted view), denominator over columns.
    RowAnchors,
    /// Anchors are columns (free view), denominator over rows.
    ColumnAnchors,
}

/// Reweighted logits `W (.) Sim`, shared by both contrast directions.
pub fn reweighted_logits(tape: &Tape, sim: Var, weights: &WeightGrid) -> Var {
    weights.apply(tape, sim)
}

/// Node-to-node contrast over prebuilt logits:
/// `-sum_i log softmax(L_ii | denominator)`. Positives sit on the diagonal;
/// `direction` picks the denominator axis.
pub fn n2n_loss(tape: &Tape, logits: Var, direction: ContrastDirection) -> Var {
    let (n, _) = tape.shape(logits);
    let idx: Rc<Vec<usize>> = Rc::new((0..n).collect());
    let diag = tape.gather_elems(logits, idx.clone(), idx);
    let lse = match direction {
        ContrastDirection::RowAnchors => {
            let m = tape.constant(tape.value(logits).max_rows());
            let e = tape.exp(tape.sub_col(logits, m));
            tape.add(tape.log(tape.sum_rows(e)), m)
        }
        ContrastDirection::ColumnAnchors => {
            let m = tape.constant(tape.value(logits).max_cols());
            let e = tape.exp(tape.sub_row(logits, m));
            let lse_row = tape.add(tape.log(tape.sum_cols(e)), m);
            tape.transpose(lse_row)
        }
    };
    tape.sub(tape.sum_all(lse), tape.sum_all(diag))
}

/// Node-to-cluster contrast over prebuilt N x K logits; the positive for
/// node i is cluster `positives[i]`, the denominator runs over all K
/// clusters.
pub fn n2c_loss(tape: &Tape, logits: Var, positives: &Rc<Vec<usize>>) -> Var {
    let (n, _) = tape.shape(logits);
    let rows: Rc<Vec<usize>> = Rc::new((0..n).collect());
    let pos = tape.gather_elems(logits, rows, positives.clone());
    let m = tape.constant(tape.value(logits).max_rows());
    let e = tape.exp(tape.sub_col(logits, m));
    let lse = tape.add(tape.log(tape.sum_rows(e)), m);
    tape.sub(tape.sum_all(lse), tape.sum_all(pos))
}

/// Positive cluster per node: row argmax of the membership, lowest index on
/// ties.
pub fn positive_clusters(membership: &Tensor) -> Vec<usize> {
    (0..membership.rows()).map(|r| membership.argmax_row(r)).collect()
}

/// `J = L_Ric + alpha1 L_Curv + alpha2 L_RGC`.
pub fn total_loss(tape: &Tape, l_ric: Var, l_curv: Var, l_rgc: Var, alpha1: f64, alpha2: f64) -> Var {
    let weighted = tape.add(tape.mul_const(l_curv, alpha1), tape.mul_const(l_rgc, alpha2));
    tape.add(l_ric, weighted)
}
