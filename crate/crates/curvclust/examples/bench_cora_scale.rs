//! Cora-scale dry run on a synthetic surrogate: 2708 nodes, 7 blocks,
//! ~5300 edges, 1433-dim sparse binary features. Measures curvature-table
//! time and per-epoch cost under the documented Cora defaults.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use curvclust::config::TrainConfig;
use curvclust::diff::Tensor;
use curvclust::graph::Graph;
use curvclust::metrics::nmi;
use curvclust::ricci::compute_ricci_table;
use curvclust::trainer::Trainer;

fn surrogate(seed: u64) -> Graph {
    let sizes = [351usize, 217, 418, 818, 426, 298, 180];
    let n: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    for (k, &s) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat(k).take(s));
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let p = if labels[a] == labels[b] { 0.0065 } else { 0.00033 };
            if rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    // bag-of-words-ish: 9 class words from a 60-word class pool, 9 global
    let f = 1433;
    let mut rows = vec![vec![0.0f64; f]; n];
    for (i, &lab) in labels.iter().enumerate() {
        for _ in 0..9 {
            let w = lab * 60 + rng.gen_range(0..60);
            rows[i][w] = 1.0;
        }
        for _ in 0..9 {
            let w = 7 * 60 + rng.gen_range(0..f - 7 * 60);
            rows[i][w] = 1.0;
        }
    }
    Graph::new(&edges, Tensor::from_rows(&rows), Some(labels)).unwrap()
}

fn main() {
    let g = surrogate(1);
    println!("surrogate: {} nodes, {} edges", g.num_nodes(), g.num_edges());
    let truth = g.labels().unwrap().to_vec();

    let t0 = Instant::now();
    let table = compute_ricci_table(&g, 0.5).unwrap();
    println!("ricci table: {:.1}s (mean edge ric {:.3})", t0.elapsed().as_secs_f64(), table.mean_edge_ricci());

    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut cfg = TrainConfig::with_required(7, 0.01, epochs);
    cfg.seed = 0;
    let t1 = Instant::now();
    let mut trainer = Trainer::new(g, Some(&table), cfg).unwrap();
    println!("trainer init (incl. first encode): {:.1}s", t1.elapsed().as_secs_f64());

    let t2 = Instant::now();
    let out = trainer.train().unwrap();
    let per_epoch = t2.elapsed().as_secs_f64() / epochs as f64;
    println!("{epochs} epochs: {:.1}s total, {per_epoch:.2}s/epoch", t2.elapsed().as_secs_f64());
    let last = out.records.last().unwrap();
    println!("J: {:.1} -> {:.1}; nmi {:.3}", out.records[0].j, last.j, last.nmi.unwrap());

    let state = trainer.evaluate();
    let hard: Vec<usize> = (0..state.membership.rows()).map(|r| state.membership.argmax_row(r)).collect();
    println!("eval nmi: {:.3}", nmi(&hard, &truth).unwrap());
}
