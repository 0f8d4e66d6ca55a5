//! Shared oracles for the integration suites.
//!
//! Everything here is deliberately written as the dumbest possible
//! computation: exact integer min-cost flow for transport, explicit
//! double/triple loops for the losses, full finite differences for
//! gradients. None of it shares code with the implementation paths it
//! checks.

#![allow(dead_code)]

use curvclust::diff::Tensor;
use curvclust::graph::Graph;

// ---------------------------------------------------------------------------
// exact transport oracle (integer successive-shortest-paths min-cost flow)
// ---------------------------------------------------------------------------

/// Exact minimum transport cost between integer supplies/demands under
/// integer costs, by successive shortest paths with Bellman-Ford. All
/// arithmetic is integral, so the optimum is exact.
pub fn integer_min_cost_transport(supply: &[i64], demand: &[i64], cost: &[Vec<i64>]) -> i64 {
    let p = supply.len();
    let q = demand.len();
    assert_eq!(supply.iter().sum::<i64>(), demand.iter().sum::<i64>(), "unbalanced");
    // nodes: 0 = source, 1..=p supplies, p+1..=p+q demands, p+q+1 = sink
    let n = p + q + 2;
    let source = 0;
    let sink = p + q + 1;
    #[derive(Clone)]
    struct Arc {
        to: usize,
        cap: i64,
        cost: i64,
        flow: i64,
    }
    let mut arcs: Vec<Arc> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let push = |arcs: &mut Vec<Arc>, adj: &mut Vec<Vec<usize>>, a: usize, b: usize, cap: i64, cost: i64| {
        adj[a].push(arcs.len());
        arcs.push(Arc { to: b, cap, cost, flow: 0 });
        adj[b].push(arcs.len());
        arcs.push(Arc { to: a, cap: 0, cost: -cost, flow: 0 });
    };
    for (i, &s) in supply.iter().enumerate() {
        push(&mut arcs, &mut adj, source, 1 + i, s, 0);
    }
    for (j, &d) in demand.iter().enumerate() {
        push(&mut arcs, &mut adj, 1 + p + j, sink, d, 0);
    }
    for (i, row) in cost.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            push(&mut arcs, &mut adj, 1 + i, 1 + p + j, i64::MAX / 4, c);
        }
    }

    let total: i64 = supply.iter().sum();
    let mut shipped = 0;
    let mut total_cost = 0;
    while shipped < total {
        // Bellman-Ford over the residual graph
        let mut dist = vec![i64::MAX / 2; n];
        let mut pre: Vec<Option<usize>> = vec![None; n];
        dist[source] = 0;
        for _ in 0..n {
            let mut changed = false;
            for (u, arc_ids) in adj.iter().enumerate() {
                if dist[u] >= i64::MAX / 2 {
                    continue;
                }
                for &aid in arc_ids {
                    let arc = &arcs[aid];
                    if arc.cap - arc.flow > 0 && dist[u] + arc.cost < dist[arc.to] {
                        dist[arc.to] = dist[u] + arc.cost;
                        pre[arc.to] = Some(aid);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        assert!(pre[sink].is_some(), "flow network is infeasible");
        // bottleneck along the path
        let mut bottleneck = i64::MAX;
        let mut at = sink;
        while let Some(aid) = pre[at] {
            bottleneck = bottleneck.min(arcs[aid].cap - arcs[aid].flow);
            at = arcs[aid ^ 1].to;
        }
        let mut at = sink;
        while let Some(aid) = pre[at] {
            arcs[aid].flow += bottleneck;
            arcs[aid ^ 1].flow -= bottleneck;
            total_cost += bottleneck * arcs[aid].cost;
            at = arcs[aid ^ 1].to;
        }
        shipped += bottleneck;
    }
    total_cost
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// Exact edge Ricci curvature by integer-arithmetic optimal transport, for
/// `lambda = 1/2`. The neighbor masses `1/(2 deg)` are scaled by
/// `2 lcm(deg_i, deg_j)` into integers; hop distances are integers; the
/// optimum is exact rational `cost / scale`.
pub fn exact_edge_ricci_half(g: &Graph, i: usize, j: usize) -> f64 {
    let deg_i = g.degree(i) as u64;
    let deg_j = g.degree(j) as u64;
    assert!(deg_i > 0 && deg_j > 0);
    let scale = 2 * lcm(deg_i, deg_j);

    let build = |center: usize, deg: u64| -> (Vec<usize>, Vec<i64>) {
        let mut support = vec![center];
        support.extend_from_slice(g.neighbors(center));
        let mut mass = vec![(scale / 2) as i64];
        mass.extend(std::iter::repeat((scale / (2 * deg)) as i64).take(deg as usize));
        (support, mass)
    };
    let (supp_i, mass_i) = build(i, deg_i);
    let (supp_j, mass_j) = build(j, deg_j);

    let mut cost = Vec::with_capacity(supp_i.len());
    for &a in &supp_i {
        let row: Vec<i64> = g
            .bounded_hop_distances(a, &supp_j, g.num_nodes())
            .into_iter()
            .map(|d| d.expect("supports of an edge are connected") as i64)
            .collect();
        cost.push(row);
    }
    let w_scaled = integer_min_cost_transport(&mass_i, &mass_j, &cost);
    1.0 - w_scaled as f64 / scale as f64
}

// ---------------------------------------------------------------------------
// naive loss oracles (plain loops over f64 slices)
// ---------------------------------------------------------------------------

/// Eq-by-eq Ricci loss: explicit sums over edges and cluster pairs.
pub fn naive_ricci_loss(
    edges: &[(usize, usize)],
    ric: &[f64],
    pi: &Tensor,
    k: usize,
    alpha0: f64,
) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let e = edges.len() as f64;
    let mut d_intra = 0.0;
    let mut d_inter = 0.0;
    for (&(i, j), &r) in edges.iter().zip(ric) {
        for k1 in 0..k {
            for k2 in 0..k {
                let prod = pi.get(i, k1) * pi.get(j, k2);
                if k1 == k2 {
                    d_intra += r * prod;
                } else {
                    d_inter += r * prod;
                }
            }
        }
    }
    alpha0 * d_inter / (e * k as f64) - d_intra / e
}

pub fn naive_curvature_loss(node_ric: &[(usize, f64)], estimates: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for &(node, r) in node_ric {
        let d = r - estimates[node];
        total += d * d;
    }
    total / n as f64
}

pub fn naive_similarity(zhat: &[f64], s: &Tensor, zfree: &[f64]) -> f64 {
    let d = zhat.len();
    let mut out = 0.0;
    for a in 0..d {
        for b in 0..d {
            out += zhat[a] * s.get(a, b) * zfree[b];
        }
    }
    out
}

pub fn naive_dual_weight(agreement: f64, sim: f64, beta: u32) -> f64 {
    (agreement - sim).abs().powi(beta as i32)
}

/// Node-to-node contrast, forward direction: anchors are the restricted
/// rows, denominator over free rows.
pub fn naive_n2n(zhat: &Tensor, s: &Tensor, zfree: &Tensor, pi: &Tensor, beta: u32) -> f64 {
    let n = zhat.rows();
    let mut loss = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        let mut num = 0.0;
        for j in 0..n {
            let sim = naive_similarity(zhat.row_slice(i), s, zfree.row_slice(j));
            let agree: f64 = (0..pi.cols()).map(|c| pi.get(i, c) * pi.get(j, c)).sum();
            let w = naive_dual_weight(agree, sim, beta);
            let term = (w * sim).exp();
            denom += term;
            if i == j {
                num = term;
            }
        }
        loss -= (num / denom).ln();
    }
    loss
}

/// Node-to-node contrast, reversed direction: anchors are the free rows,
/// denominator over restricted rows (same images, same critic).
pub fn naive_n2n_reversed(zhat: &Tensor, s: &Tensor, zfree: &Tensor, pi: &Tensor, beta: u32) -> f64 {
    let n = zhat.rows();
    let mut loss = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        let mut num = 0.0;
        for j in 0..n {
            let sim = naive_similarity(zhat.row_slice(j), s, zfree.row_slice(i));
            let agree: f64 = (0..pi.cols()).map(|c| pi.get(j, c) * pi.get(i, c)).sum();
            let w = naive_dual_weight(agree, sim, beta);
            let term = (w * sim).exp();
            denom += term;
            if i == j {
                num = term;
            }
        }
        loss -= (num / denom).ln();
    }
    loss
}

/// Node-to-cluster contrast: anchors are node rows, denominator over K
/// centroid rows; the positive is `argmax_k pi_ik`.
pub fn naive_n2c(nodes: &Tensor, s: &Tensor, centroids: &Tensor, pi: &Tensor, beta: u32, swap: bool) -> f64 {
    let n = nodes.rows();
    let k = centroids.rows();
    let mut loss = 0.0;
    for i in 0..n {
        let mut pos_k = 0;
        for c in 0..pi.cols() {
            if pi.get(i, c) > pi.get(i, pos_k) {
                pos_k = c;
            }
        }
        let mut denom = 0.0;
        let mut num = 0.0;
        for kk in 0..k {
            // `swap` flips which side of the bilinear critic holds the
            // restricted image: false = imaged node vs free centroid,
            // true = imaged centroid vs free node
            let sim = if swap {
                naive_similarity(centroids.row_slice(kk), s, nodes.row_slice(i))
            } else {
                naive_similarity(nodes.row_slice(i), s, centroids.row_slice(kk))
            };
            let w = naive_dual_weight(pi.get(i, kk), sim, beta);
            let term = (w * sim).exp();
            denom += term;
            if kk == pos_k {
                num = term;
            }
        }
        loss -= (num / denom).ln();
    }
    loss
}

// ---------------------------------------------------------------------------
// misc helpers
// ---------------------------------------------------------------------------

pub fn random_connected_graph(rng: &mut impl rand::Rng, n: usize, extra_edge_prob: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        edges.push((u, v));
    }
    for a in 0..n {
        for b in (a + 1)..n {
            if rng.gen_bool(extra_edge_prob) {
                edges.push((a, b));
            }
        }
    }
    edges
}

pub fn feature_tensor(rng: &mut impl rand::Rng, n: usize, f: usize) -> Tensor {
    Tensor::new(n, f, (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect())
}
