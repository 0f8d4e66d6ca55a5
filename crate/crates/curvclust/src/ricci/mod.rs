//! Ollivier-Ricci curvature of every edge and node.
//!
//! The curvature of an edge (i, j) is `1 - W(m_i, m_j) / d_G(i, j)` where
//! `m_i` puts mass `lambda` on i and spreads `1 - lambda` uniformly over its
//! neighbors, `W` is the exact Wasserstein distance under hop-count ground
//! cost, and `d_G` is the hop distance (1 for an edge). Node curvature is the
//! mean over incident edges.
//!
//! Curvatures depend only on topology and `lambda`, so the full table is
//! computed once (edges in parallel, each an independent tiny transport
//! problem) and cached on disk keyed by a graph hash.

mod transport;

pub use transport::{min_cost_transport, TransportError};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::Graph;

#[derive(Debug, Error)]
pub enum RicciError {
    #[error("lambda must lie in [0, 1), got {0}")]
    BadLambda(f64),
    #[error("node {0} has no neighbors, its mass distribution is undefined")]
    EmptyNeighborhood(usize),
    #[error("({0}, {1}) is not an edge of the graph")]
    NotAnEdge(usize, usize),
    #[error("supports are not connected: {0}")]
    Transport(#[from] TransportError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Probability mass on a node's closed 1-hop neighborhood.
#[derive(Debug, Clone)]
pub struct MassDistribution {
    /// Center node first, then its neighbors in ascending order.
    pub support: Vec<usize>,
    /// Mass aligned with `support`; sums to 1.
    pub mass: Vec<f64>,
}

/// Edge and node curvatures for one graph at one `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct RicciTable {
    /// Keyed by (min, max) endpoint; every graph edge is present.
    pub edge_ricci: BTreeMap<(usize, usize), f64>,
    /// Isolated nodes are omitted.
    pub node_ricci: BTreeMap<usize, f64>,
    pub lambda: f64,
}

/// Mass `lambda` at `i`, `(1 - lambda) / degree` on each neighbor.
pub fn mass_distribution(g: &Graph, i: usize, lambda: f64) -> Result<MassDistribution, RicciError> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(RicciError::BadLambda(lambda));
    }
    let neighbors = g.neighbors(i);
    if neighbors.is_empty() {
        return Err(RicciError::EmptyNeighborhood(i));
    }
    let share = (1.0 - lambda) / neighbors.len() as f64;
    let mut support = Vec::with_capacity(neighbors.len() + 1);
    let mut mass = Vec::with_capacity(neighbors.len() + 1);
    support.push(i);
    mass.push(lambda);
    for &n in neighbors {
        support.push(n);
        mass.push(share);
    }
    Ok(MassDistribution { support, mass })
}

/// Exact Wasserstein distance between two neighborhood distributions under
/// hop-count ground cost. Ground distances come from per-source BFS that
/// stops as soon as the opposite support is covered.
pub fn wasserstein(g: &Graph, a: &MassDistribution, b: &MassDistribution) -> Result<f64, RicciError> {
    let mut cost = Vec::with_capacity(a.support.len());
    for &src in &a.support {
        let dists = g.bounded_hop_distances(src, &b.support, g.num_nodes());
        cost.push(dists.into_iter().map(|d| d.map_or(f64::INFINITY, |h| h as f64)).collect());
    }
    Ok(min_cost_transport(&a.mass, &b.mass, &cost)?)
}

/// Ollivier-Ricci curvature of the edge (i, j).
pub fn edge_ricci(g: &Graph, i: usize, j: usize, lambda: f64) -> Result<f64, RicciError> {
    let key = (i.min(j), i.max(j));
    if !g.edges().binary_search(&key).is_ok() {
        return Err(RicciError::NotAnEdge(i, j));
    }
    let mi = mass_distribution(g, i, lambda)?;
    let mj = mass_distribution(g, j, lambda)?;
    let w = wasserstein(g, &mi, &mj)?;
    Ok(1.0 - w) // d_G(i, j) = 1 for an edge
}

/// Curvature of every edge, node curvatures by incident-edge mean.
pub fn compute_ricci_table(g: &Graph, lambda: f64) -> Result<RicciTable, RicciError> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(RicciError::BadLambda(lambda));
    }
    let per_edge: Result<Vec<f64>, RicciError> = g
        .edges()
        .par_iter()
        .map(|&(i, j)| edge_ricci(g, i, j, lambda))
        .collect();
    let per_edge = per_edge?;

    let mut edge_ricci = BTreeMap::new();
    let mut sums = vec![0.0; g.num_nodes()];
    for (&(i, j), &r) in g.edges().iter().zip(per_edge.iter()) {
        edge_ricci.insert((i, j), r);
        sums[i] += r;
        sums[j] += r;
    }
    let mut node_ricci = BTreeMap::new();
    for node in 0..g.num_nodes() {
        let deg = g.degree(node);
        if deg > 0 {
            node_ricci.insert(node, sums[node] / deg as f64);
        }
    }
    Ok(RicciTable { edge_ricci, node_ricci, lambda })
}

impl RicciTable {
    pub fn edge(&self, i: usize, j: usize) -> Option<f64> {
        self.edge_ricci.get(&(i.min(j), i.max(j))).copied()
    }

    pub fn node(&self, i: usize) -> Option<f64> {
        self.node_ricci.get(&i).copied()
    }

    pub fn mean_edge_ricci(&self) -> f64 {
        if self.edge_ricci.is_empty() {
            return 0.0;
        }
        self.edge_ricci.values().sum::<f64>() / self.edge_ricci.len() as f64
    }

    /// `src,dst,ricci` rows for every edge.
    pub fn edge_csv(&self) -> String {
        let mut out = String::from("src,dst,ricci\n");
        for (&(i, j), &r) in &self.edge_ricci {
            let _ = writeln!(out, "{i},{j},{r}");
        }
        out
    }

    /// `node,ricci` rows for every non-isolated node.
    pub fn node_csv(&self) -> String {
        let mut out = String::from("node,ricci\n");
        for (&n, &r) in &self.node_ricci {
            let _ = writeln!(out, "{n},{r}");
        }
        out
    }
}

const CACHE_MAGIC: &[u8; 4] = b"CRIC";
const CACHE_VERSION: u32 = 1;

/// Hash of the topology a cached table is valid for.
pub fn graph_topology_hash(g: &Graph) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((g.num_nodes() as u64).to_le_bytes());
    for &(a, b) in g.edges() {
        hasher.update((a as u64).to_le_bytes());
        hasher.update((b as u64).to_le_bytes());
    }
    hasher.finalize().into()
}

/// Writes the binary cache; byte-identical for identical inputs.
pub fn save_cache(table: &RicciTable, g: &Graph, path: &Path) -> Result<(), RicciError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&graph_topology_hash(g));
    buf.extend_from_slice(&table.lambda.to_le_bytes());
    buf.extend_from_slice(&(table.edge_ricci.len() as u64).to_le_bytes());
    for (&(i, j), &r) in &table.edge_ricci {
        buf.extend_from_slice(&(i as u64).to_le_bytes());
        buf.extend_from_slice(&(j as u64).to_le_bytes());
        buf.extend_from_slice(&r.to_le_bytes());
    }
    buf.extend_from_slice(&(table.node_ricci.len() as u64).to_le_bytes());
    for (&n, &r) in &table.node_ricci {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&r.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|source| RicciError::Io { path: path.display().to_string(), source })
}

/// Loads a cache if it exists and matches (graph hash, lambda); any mismatch
/// or corruption reads as `None` so the caller recomputes.
pub fn load_cache(g: &Graph, lambda: f64, path: &Path) -> Option<RicciTable> {
    let mut buf = Vec::new();
    fs::File::open(path).ok()?.read_to_end(&mut buf).ok()?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Option<&[u8]> {
        let s = buf.get(*at..*at + n)?;
        *at += n;
        Some(s)
    };
    if take(&mut at, 4)? != CACHE_MAGIC {
        return None;
    }
    if u32::from_le_bytes(take(&mut at, 4)?.try_into().ok()?) != CACHE_VERSION {
        return None;
    }
    if take(&mut at, 32)? != graph_topology_hash(g) {
        return None;
    }
    let cached_lambda = f64::from_le_bytes(take(&mut at, 8)?.try_into().ok()?);
    if cached_lambda.to_bits() != lambda.to_bits() {
        return None;
    }
    let n_edges = u64::from_le_bytes(take(&mut at, 8)?.try_into().ok()?) as usize;
    let mut edge_ricci = BTreeMap::new();
    for _ in 0..n_edges {
        let i = u64::from_le_bytes(take(&mut at, 8)?.try_into().ok()?) as usize;
        let j = u64::from_le_bytes(take(&mut at, 8)?.try_into().ok()?) as usize;
        let r = f64::from_le_bytes(take(&mut at, 8)?.try_into().ok()?);
        edge_ricci.insert((i, j), r);
    }
    let n_nodes = u64::from_le_bytes(take(&mut at, 8)?.try_into().ok()?) as usize;
    let mut node_ricci = BTreeMap::new();
    for _ in 0..n_nodes {
        let n = u64::from_le_bytes(take(&mut at, 8)?.try_into().ok()?) as usize;
        let r = f64::from_le_bytes(take(&mut at, 8)?.try_into().ok()?);
        node_ricci.insert(n, r);
    }
    if at != buf.len() {
        return None;
    }
    Some(RicciTable { edge_ricci, node_ricci, lambda: cached_lambda })
}
