//! Clustering quality scores.
//!
//! NMI normalizes mutual information by the arithmetic mean of the two
//! entropies; ARI is the pair-counting adjusted Rand index; ACC matches
//! predicted clusters to classes with an optimal bijection (exhaustive
//! permutations up to 8 clusters, Hungarian assignment above). Density and
//! entropy characterize cluster structure without and with ground truth
//! respectively; entropy uses the natural logarithm.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::Graph;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// Hard clustering read off a soft membership matrix by row argmax.
#[derive(Debug, Clone)]
pub struct ClusteringResult {
    pub hard_labels: Vec<usize>,
    pub k: usize,
}

impl ClusteringResult {
    pub fn new(hard_labels: Vec<usize>, k: usize) -> Self {
        debug_assert!(hard_labels.iter().all(|&l| l < k));
        Self { hard_labels, k }
    }
}

fn contingency(pred: &[usize], truth: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>, Vec<usize>) {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..kt).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    (table, rows, cols)
}

fn entropy_of_counts(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information in [0, 1]; degenerate single-cluster
/// partitions score 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::TooFewPoints { needed: 1, got: 0 });
    }
    let n = pred.len() as f64;
    let (table, rows, cols) = contingency(pred, truth);
    let hp = entropy_of_counts(&rows, n);
    let ht = entropy_of_counts(&cols, n);
    let denom = 0.5 * (hp + ht);
    if denom == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = rows[i] as f64 / n;
            let qj = cols[j] as f64 / n;
            mi += pij * (pij / (pi * qj)).ln();
        }
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn choose2(x: usize) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index in [-1, 1].
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(MetricsError::TooFewPoints { needed: 2, got: pred.len() });
    }
    let (table, rows, cols) = contingency(pred, truth);
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(pred.len());
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        // both partitions trivial in the same way: identical by construction
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Clustering accuracy under the best cluster-to-class bijection.
/// Exact for any k (exhaustive for k <= 8, Hungarian assignment above);
/// intended for k_pred, k_truth <= 20.
pub fn acc(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::TooFewPoints { needed: 1, got: 0 });
    }
    let (table, _, _) = contingency(pred, truth);
    let k = table.len().max(table.first().map_or(0, Vec::len));
    // square profit matrix, zero-padded where one side has fewer ids
    let mut profit = vec![vec![0.0f64; k]; k];
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            profit[i][j] = c as f64;
        }
    }
    let best = if k <= 8 { best_permutation_profit(&profit) } else { hungarian_max_profit(&profit) };
    Ok(best / pred.len() as f64)
}

/// Total profit of the best assignment by explicit permutation enumeration.
fn best_permutation_profit(profit: &[Vec<f64>]) -> f64 {
    let k = profit.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = f64::NEG_INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| profit[i][j]).sum();
        if total > best {
            best = total;
        }
    });
    best
}

fn permute(items: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == items.len() {
        visit(items);
        return;
    }
    for i in at..items.len() {
        items.swap(at, i);
        permute(items, at + 1, visit);
        items.swap(at, i);
    }
}

/// O(k^3) Hungarian algorithm (potential method), maximizing total profit on
/// a square matrix. Rows and columns are 1-based internally; index 0 is the
/// virtual column that seeds each augmenting phase.
pub(crate) fn hungarian_max_profit(profit: &[Vec<f64>]) -> f64 {
    let n = profit.len();
    if n == 0 {
        return 0.0;
    }
    let max_entry = profit.iter().flatten().cloned().fold(0.0f64, f64::max);
    let cost = |i: usize, j: usize| max_entry - profit[i - 1][j - 1];

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to each column
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        if p[j] > 0 {
            total += profit[p[j] - 1][j - 1];
        }
    }
    total
}

/// Expected intra-cluster edge density `E_k / (V_k (V_k - 1))`, averaged over
/// clusters with at least two nodes. `None` when every cluster is a
/// singleton.
pub fn cluster_density(g: &Graph, hard_labels: &[usize]) -> Option<f64> {
    assert_eq!(hard_labels.len(), g.num_nodes(), "label count must match node count");
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in hard_labels {
        *sizes.entry(l).or_insert(0) += 1;
    }
    let mut intra_edges: BTreeMap<usize, usize> = BTreeMap::new();
    for &(a, b) in g.edges() {
        if hard_labels[a] == hard_labels[b] {
            *intra_edges.entry(hard_labels[a]).or_insert(0) += 1;
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&label, &v) in &sizes {
        if v < 2 {
            continue;
        }
        let e = intra_edges.get(&label).copied().unwrap_or(0);
        sum += e as f64 / (v as f64 * (v as f64 - 1.0));
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// Mean, over clusters, of the class entropy inside the cluster
/// (natural log). Pure clusters score 0.
pub fn cluster_entropy(hard_labels: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(hard_labels.len(), truth.len(), "label count mismatch");
    let mut per_cluster: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&l, &t) in hard_labels.iter().zip(truth) {
        *per_cluster.entry(l).or_default().entry(t).or_insert(0) += 1;
    }
    if per_cluster.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for counts in per_cluster.values() {
        let size: usize = counts.values().sum();
        let h: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / size as f64;
                -p * p.ln()
            })
            .sum();
        total += h;
    }
    total / per_cluster.len() as f64
}
