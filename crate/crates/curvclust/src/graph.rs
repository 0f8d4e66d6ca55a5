//! Attributed-graph loading and validation.
//!
//! Graphs are undirected and unweighted. Directed input edges are
//! symmetrized; duplicate and reversed pairs collapse to one undirected edge;
//! self-loops are dropped. Node count comes from the feature file, so
//! isolated nodes are representable. A loaded [`Graph`] is immutable and safe
//! to share across threads.
//!
//! On-disk formats (all indices zero-based):
//! * `edges.tsv` — `src<TAB>dst` integer pairs, one per line;
//! * `features.csv` — N rows of F comma-separated reals;
//! * `labels.csv` — one integer class id per line (optional, evaluation only).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::diff::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("edge ({src}, {dst}) references a node >= {num_nodes}")]
    EndpointOutOfRange { src: usize, dst: usize, num_nodes: usize },
    #[error("{what} has {got} rows but the graph has {expected} nodes")]
    RowCountMismatch { what: &'static str, got: usize, expected: usize },
    #[error("node {0} is out of range")]
    NodeOutOfRange(usize),
}

/// Hop distance result; disconnected pairs are `Unreachable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopDistance {
    Hops(usize),
    Unreachable,
}

impl HopDistance {
    pub fn as_option(self) -> Option<usize> {
        match self {
            HopDistance::Hops(h) => Some(h),
            HopDistance::Unreachable => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    /// Undirected edges, stored once with src < dst, sorted.
    edges: Vec<(usize, usize)>,
    /// N x F dense features.
    features: Tensor,
    labels: Option<Vec<usize>>,
    /// Sorted neighbor list per node.
    adjacency: Vec<Vec<usize>>,
    degrees: Vec<usize>,
}

impl Graph {
    /// Builds a validated graph from raw parts. `num_nodes` is taken from the
    /// feature row count.
    pub fn new(
        raw_edges: &[(usize, usize)],
        features: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self, GraphError> {
        let num_nodes = features.rows();
        let mut set = BTreeSet::new();
        for &(src, dst) in raw_edges {
            if src >= num_nodes || dst >= num_nodes {
                return Err(GraphError::EndpointOutOfRange { src, dst, num_nodes });
            }
            if src == dst {
                continue; // self-loops carry no neighborhood information
            }
            set.insert((src.min(dst), src.max(dst)));
        }
        if let Some(l) = &labels {
            if l.len() != num_nodes {
                return Err(GraphError::RowCountMismatch {
                    what: "label file",
                    got: l.len(),
                    expected: num_nodes,
                });
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let degrees = adjacency.iter().map(Vec::len).collect();
        Ok(Self { num_nodes, edges, features, labels, adjacency, degrees })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Scales every feature row to sum to 1 (rows summing to 0 are left
    /// untouched).
    pub fn normalize_feature_rows(&mut self) {
        let cols = self.features.cols();
        for r in 0..self.num_nodes {
            let sum: f64 = self.features.row_slice(r).iter().sum();
            if sum != 0.0 {
                for c in 0..cols {
                    let v = self.features.get(r, c);
                    self.features.set(r, c, v / sum);
                }
            }
        }
    }

    /// BFS hop count between two nodes.
    pub fn shortest_hop_distance(&self, i: usize, j: usize) -> Result<HopDistance, GraphError> {
        if i >= self.num_nodes {
            return Err(GraphError::NodeOutOfRange(i));
        }
        if j >= self.num_nodes {
            return Err(GraphError::NodeOutOfRange(j));
        }
        if i == j {
            return Ok(HopDistance::Hops(0));
        }
        let mut dist = vec![usize::MAX; self.num_nodes];
        let mut queue = std::collections::VecDeque::new();
        dist[i] = 0;
        queue.push_back(i);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    if v == j {
                        return Ok(HopDistance::Hops(dist[v]));
                    }
                    queue.push_back(v);
                }
            }
        }
        Ok(HopDistance::Unreachable)
    }

    /// BFS distances from `start` to every node in `targets`, never expanding
    /// beyond `max_depth`. Unreached targets stay `None`.
    pub fn bounded_hop_distances(
        &self,
        start: usize,
        targets: &[usize],
        max_depth: usize,
    ) -> Vec<Option<usize>> {
        let mut remaining: BTreeSet<usize> = targets.iter().copied().collect();
        let mut out = vec![None; targets.len()];
        let mut dist = vec![usize::MAX; self.num_nodes];
        let mut queue = std::collections::VecDeque::new();
        dist[start] = 0;
        queue.push_back(start);
        if remaining.remove(&start) {
            for (slot, &t) in out.iter_mut().zip(targets) {
                if t == start {
                    *slot = Some(0);
                }
            }
        }
        while let Some(u) = queue.pop_front() {
            if remaining.is_empty() {
                break;
            }
            if dist[u] >= max_depth {
                continue;
            }
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    if remaining.remove(&v) {
                        for (slot, &t) in out.iter_mut().zip(targets) {
                            if t == v {
                                *slot = Some(dist[v]);
                            }
                        }
                    }
                    queue.push_back(v);
                }
            }
        }
        out
    }

    /// Writes the graph back to the trio of files it is loaded from.
    pub fn save(
        &self,
        edge_path: &Path,
        feature_path: &Path,
        label_path: Option<&Path>,
    ) -> Result<(), GraphError> {
        let mut edges = String::new();
        for &(a, b) in &self.edges {
            let _ = writeln!(edges, "{a}\t{b}");
        }
        write_file(edge_path, &edges)?;

        let mut feat = String::new();
        for r in 0..self.num_nodes {
            let row: Vec<String> = self.features.row_slice(r).iter().map(|v| format_real(*v)).collect();
            let _ = writeln!(feat, "{}", row.join(","));
        }
        write_file(feature_path, &feat)?;

        if let (Some(path), Some(labels)) = (label_path, &self.labels) {
            let mut text = String::new();
            for l in labels {
                let _ = writeln!(text, "{l}");
            }
            write_file(path, &text)?;
        }
        Ok(())
    }
}

fn format_real(v: f64) -> String {
    // shortest round-trip representation keeps save/load idempotent
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), GraphError> {
    fs::write(path, contents).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

fn read_file(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

/// Loads and validates a graph from `edges.tsv` + `features.csv`
/// (+ optional `labels.csv`).
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: Option<&Path>,
) -> Result<Graph, GraphError> {
    let features = parse_features(feature_path)?;
    let edges = parse_edges(edge_path)?;
    let labels = label_path.map(parse_labels).transpose()?;
    Graph::new(&edges, features, labels)
}

fn parse_edges(path: &Path) -> Result<Vec<(usize, usize)>, GraphError> {
    let text = read_file(path)?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |tok: Option<&str>| -> Result<usize, GraphError> {
            tok.ok_or(())
                .and_then(|t| t.trim().parse::<usize>().map_err(|_| ()))
                .map_err(|_| GraphError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("expected `src<TAB>dst` integer pair, got {line:?}"),
                })
        };
        let src = parse(parts.next())?;
        let dst = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(GraphError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("trailing fields in {line:?}"),
            });
        }
        edges.push((src, dst));
    }
    Ok(edges)
}

fn parse_features(path: &Path) -> Result<Tensor, GraphError> {
    let text = read_file(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| GraphError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: format!("bad real value: {e}"),
        })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(GraphError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("expected {w} columns, got {}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GraphError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "feature file is empty".into(),
        });
    }
    Ok(Tensor::from_rows(&rows))
}

fn parse_labels(path: &Path) -> Result<Vec<usize>, GraphError> {
    let text = read_file(path)?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<usize>().map_err(|e| GraphError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: format!("bad class id: {e}"),
        })?;
        labels.push(v);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn feature_tensor(n: usize) -> Tensor {
        Tensor::from_rows(&(0..n).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>())
    }

    #[test]
    fn reversed_duplicates_collapse() {
        let g = Graph::new(&[(0, 1), (1, 0), (1, 2)], feature_tensor(3), None).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.degrees(), &[1, 2, 1]);
    }

    #[test]
    fn empty_edge_file_gives_isolated_nodes() {
        let g = Graph::new(&[], feature_tensor(4), None).unwrap();
        assert_eq!(g.num_nodes(), 4);
        assert_eq!(g.num_edges(), 0);
        assert!(g.degrees().iter().all(|&d| d == 0));
    }

    #[test]
    fn out_of_range_endpoint_is_rejected() {
        let err = Graph::new(&[(0, 5)], feature_tensor(3), None).unwrap_err();
        assert!(matches!(err, GraphError::EndpointOutOfRange { dst: 5, .. }));
    }

    #[test]
    fn self_loops_are_dropped() {
        let g = Graph::new(&[(1, 1), (0, 1)], feature_tensor(2), None).unwrap();
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn label_length_mismatch_is_rejected() {
        let err = Graph::new(&[], feature_tensor(3), Some(vec![0, 1])).unwrap_err();
        assert!(matches!(err, GraphError::RowCountMismatch { .. }));
    }

    #[test]
    fn hop_distance_path_graph() {
        let g = Graph::new(&[(0, 1), (1, 2)], feature_tensor(3), None).unwrap();
        assert_eq!(g.shortest_hop_distance(0, 2).unwrap(), HopDistance::Hops(2));
        assert_eq!(g.shortest_hop_distance(1, 1).unwrap(), HopDistance::Hops(0));
    }

    #[test]
    fn hop_distance_disconnected() {
        let g = Graph::new(&[(0, 1), (2, 3)], feature_tensor(4), None).unwrap();
        assert_eq!(g.shortest_hop_distance(0, 3).unwrap(), HopDistance::Unreachable);
    }

    #[test]
    fn load_rejects_malformed_edge_line() {
        let dir = tempfile::tempdir().unwrap();
        let edges = dir.path().join("edges.tsv");
        let feats = dir.path().join("features.csv");
        std::fs::File::create(&edges).unwrap().write_all(b"0\tx\n").unwrap();
        std::fs::File::create(&feats).unwrap().write_all(b"1.0,2.0\n").unwrap();
        let err = load_graph(&edges, &feats, None).unwrap_err();
        match err {
            GraphError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn save_load_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let g = Graph::new(
            &[(0, 2), (2, 1), (0, 1)],
            Tensor::from_rows(&[vec![0.25, -1.5], vec![3.0, 0.125], vec![1e-3, 7.0]]),
            Some(vec![0, 1, 0]),
        )
        .unwrap();
        let (e, f, l) = (
            dir.path().join("edges.tsv"),
            dir.path().join("features.csv"),
            dir.path().join("labels.csv"),
        );
        g.save(&e, &f, Some(&l)).unwrap();
        let g2 = load_graph(&e, &f, Some(&l)).unwrap();
        assert_eq!(g.edges(), g2.edges());
        assert_eq!(g.features(), g2.features());
        assert_eq!(g.labels(), g2.labels());
        assert_eq!(g.degrees(), g2.degrees());
    }

    proptest! {
        #[test]
        fn hop_distance_is_symmetric_and_triangular(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..10usize);
            let mut edges = Vec::new();
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.gen_bool(0.4) {
                        edges.push((a, b));
                    }
                }
            }
            let g = Graph::new(&edges, feature_tensor(n), None).unwrap();
            for _ in 0..10 {
                let (i, j, k) = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n));
                let dij = g.shortest_hop_distance(i, j).unwrap();
                let dji = g.shortest_hop_distance(j, i).unwrap();
                prop_assert_eq!(dij, dji);
                if let (HopDistance::Hops(a), HopDistance::Hops(b), HopDistance::Hops(c)) = (
                    dij,
                    g.shortest_hop_distance(j, k).unwrap(),
                    g.shortest_hop_distance(i, k).unwrap(),
                ) {
                    prop_assert!(c <= a + b);
                }
            }
        }
    }
}
