//! Exact solver for the small balanced transportation problem
//!
//!   minimize    sum_ij cost[i][j] * x[i][j]
//!   subject to  sum_j x[i][j] = supply[i],  sum_i x[i][j] = demand[j],  x >= 0.
//!
//! Classic primal transportation simplex (northwest-corner start, u-v duals,
//! cycle pivots). Pivot selection is most-negative reduced cost with
//! lowest-index tie-breaks, falling back to Bland's rule if an unusually
//! degenerate instance stalls, so the solve is deterministic and terminates.
//! Problem sizes here are tiny (supports are 1-hop neighborhoods), where an
//! exact basis method is both fast and reproducible.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport is infeasible: no finite-cost route into column {column}")]
    Infeasible { column: usize },
    #[error("supply and demand totals differ beyond tolerance: {supply} vs {demand}")]
    Unbalanced { supply: f64, demand: f64 },
    #[error("simplex failed to converge after {0} pivots")]
    Stalled(usize),
}

const BALANCE_TOL: f64 = 1e-9;
const REDUCED_COST_TOL: f64 = 1e-12;

/// Minimum transport cost between `supply` and `demand` under `cost`.
/// Entries of `cost` may be `f64::INFINITY` for unusable routes.
pub fn min_cost_transport(
    supply: &[f64],
    demand: &[f64],
    cost: &[Vec<f64>],
) -> Result<f64, TransportError> {
    let p = supply.len();
    let q = demand.len();
    assert!(p > 0 && q > 0, "empty transport problem");
    assert_eq!(cost.len(), p, "cost row count mismatch");
    for row in cost {
        assert_eq!(row.len(), q, "cost column count mismatch");
    }

    let total_supply: f64 = supply.iter().sum();
    let total_demand: f64 = demand.iter().sum();
    if (total_supply - total_demand).abs() > BALANCE_TOL {
        return Err(TransportError::Unbalanced { supply: total_supply, demand: total_demand });
    }
    for (j, &d) in demand.iter().enumerate() {
        if d > 0.0 && (0..p).all(|i| !cost[i][j].is_finite() || supply[i] == 0.0) {
            // a column with demand has no finite-cost source at all
            if (0..p).all(|i| !cost[i][j].is_finite()) {
                return Err(TransportError::Infeasible { column: j });
            }
        }
    }

    // rounding drift between the two totals is absorbed by the last demand
    let mut b: Vec<f64> = demand.to_vec();
    *b.last_mut().unwrap() += total_supply - total_demand;
    let a: Vec<f64> = supply.to_vec();

    let mut state = Simplex::northwest_corner(&a, &b, cost);
    state.solve()?;

    // flow on an infinite arc means the finite arcs cannot carry the demand
    let mut value = 0.0;
    for i in 0..p {
        for j in 0..q {
            let x = state.flow[i * q + j];
            if x > 1e-12 {
                if !cost[i][j].is_finite() {
                    return Err(TransportError::Infeasible { column: j });
                }
                value += x * cost[i][j];
            }
        }
    }
    Ok(value)
}

struct Simplex<'a> {
    p: usize,
    q: usize,
    cost: &'a [Vec<f64>],
    flow: Vec<f64>,
    basis: Vec<bool>,
}

impl<'a> Simplex<'a> {
    fn northwest_corner(a: &[f64], b: &[f64], cost: &'a [Vec<f64>]) -> Self {
        let (p, q) = (a.len(), b.len());
        let mut flow = vec![0.0; p * q];
        let mut basis = vec![false; p * q];
        let mut remaining_a = a.to_vec();
        let mut remaining_b = b.to_vec();
        let (mut i, mut j) = (0, 0);
        // exactly p + q - 1 basic cells, including degenerate zeros
        loop {
            let take = remaining_a[i].min(remaining_b[j]).max(0.0);
            flow[i * q + j] = take;
            basis[i * q + j] = true;
            remaining_a[i] -= take;
            remaining_b[j] -= take;
            if i == p - 1 && j == q - 1 {
                break;
            }
            // exactly one advance per cell keeps p + q - 1 basic cells
            let move_down = if j == q - 1 {
                true
            } else if i == p - 1 {
                false
            } else {
                remaining_a[i] <= remaining_b[j]
            };
            if move_down {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { p, q, cost, flow, basis }
    }

    fn solve(&mut self) -> Result<(), TransportError> {
        // infinite costs would break dual arithmetic; treat them as a large
        // finite penalty (the caller re-checks infinite arcs on the result)
        let finite_max = self
            .cost
            .iter()
            .flatten()
            .filter(|c| c.is_finite())
            .fold(0.0f64, |m, &c| m.max(c.abs()));
        let big = (finite_max + 1.0) * 1e6;
        let c = |i: usize, j: usize| -> f64 {
            let v = self.cost[i][j];
            if v.is_finite() {
                v
            } else {
                big
            }
        };

        let max_pivots = 1000 * (self.p + self.q).max(8);
        for pivot in 0..max_pivots {
            let (u, v) = self.duals(&c);
            let use_bland = pivot > max_pivots / 2;
            let mut entering: Option<(usize, usize, f64)> = None;
            'scan: for i in 0..self.p {
                for j in 0..self.q {
                    if self.basis[i * self.q + j] {
                        continue;
                    }
                    let rc = c(i, j) - u[i] - v[j];
                    if rc < -REDUCED_COST_TOL {
                        if use_bland {
                            entering = Some((i, j, rc));
                            break 'scan;
                        }
                        match entering {
                            Some((_, _, best)) if rc >= best => {}
                            _ => entering = Some((i, j, rc)),
                        }
                    }
                }
            }
            let Some((ei, ej, _)) = entering else {
                return Ok(());
            };
            self.pivot(ei, ej);
        }
        Err(TransportError::Stalled(max_pivots))
    }

    /// Solves u_i + v_j = c_ij over the basis tree; u[0] anchored at 0.
    fn duals(&self, c: &impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![f64::NAN; self.p];
        let mut v = vec![f64::NAN; self.q];
        u[0] = 0.0;
        let mut queue = std::collections::VecDeque::from([0usize]); // rows 0..p, cols p..p+q
        while let Some(node) = queue.pop_front() {
            if node < self.p {
                let i = node;
                for j in 0..self.q {
                    if self.basis[i * self.q + j] && v[j].is_nan() {
                        v[j] = c(i, j) - u[i];
                        queue.push_back(self.p + j);
                    }
                }
            } else {
                let j = node - self.p;
                for i in 0..self.p {
                    if self.basis[i * self.q + j] && u[i].is_nan() {
                        u[i] = c(i, j) - v[j];
                        queue.push_back(i);
                    }
                }
            }
        }
        (u, v)
    }

    /// Adds (ei, ej) to the basis, walks the unique alternating cycle, and
    /// removes the binding leaving cell.
    fn pivot(&mut self, ei: usize, ej: usize) {
        let path = self.tree_path(ei, ej);
        // path runs col(ej) -> ... -> row(ei) through basis cells; the cycle
        // alternates starting with +theta on the entering cell
        let mut cells = Vec::with_capacity(path.len() + 1);
        cells.push((ei, ej));
        for w in path.windows(2) {
            let (x, y) = (w[0], w[1]);
            let (i, j) = if x < self.p { (x, y - self.p) } else { (y, x - self.p) };
            cells.push((i, j));
        }
        // theta = min flow over odd (minus) positions; first minimum leaves
        let mut theta = f64::INFINITY;
        let mut leave_at = 1;
        for (pos, &(i, j)) in cells.iter().enumerate().skip(1).step_by(2) {
            let f = self.flow[i * self.q + j];
            if f < theta - 1e-15 {
                theta = f;
                leave_at = pos;
            }
        }
        for (pos, &(i, j)) in cells.iter().enumerate() {
            let idx = i * self.q + j;
            if pos % 2 == 0 {
                self.flow[idx] += theta;
            } else {
                self.flow[idx] -= theta;
                if self.flow[idx] < 0.0 {
                    self.flow[idx] = 0.0; // clip rounding residue
                }
            }
        }
        let (li, lj) = cells[leave_at];
        self.basis[li * self.q + lj] = false;
        self.basis[ei * self.q + ej] = true;
        self.flow[li * self.q + lj] = 0.0;
    }

    /// Path from col node `p + ej` to row node `ei` through the basis tree,
    /// as a node list (rows are 0..p, cols are p..p+q).
    fn tree_path(&self, ei: usize, ej: usize) -> Vec<usize> {
        let n = self.p + self.q;
        let mut parent = vec![usize::MAX; n];
        let start = self.p + ej;
        let mut queue = std::collections::VecDeque::from([start]);
        parent[start] = start;
        while let Some(node) = queue.pop_front() {
            if node == ei {
                break;
            }
            if node < self.p {
                let i = node;
                for j in 0..self.q {
                    let next = self.p + j;
                    if self.basis[i * self.q + j] && parent[next] == usize::MAX {
                        parent[next] = node;
                        queue.push_back(next);
                    }
                }
            } else {
                let j = node - self.p;
                for i in 0..self.p {
                    if self.basis[i * self.q + j] && parent[i] == usize::MAX {
                        parent[i] = node;
                        queue.push_back(i);
                    }
                }
            }
        }
        debug_assert!(parent[ei] != usize::MAX, "basis is not a spanning tree");
        let mut path = vec![ei];
        let mut at = ei;
        while at != start {
            at = parent[at];
            path.push(at);
        }
        path.reverse();
        path
    }
}
