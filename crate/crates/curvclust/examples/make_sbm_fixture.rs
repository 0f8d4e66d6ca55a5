//! Writes a three-block SBM fixture (edges.tsv / features.csv / labels.csv)
//! into a directory, ready for the CLI.
//!
//! Run: cargo run --release --example make_sbm_fixture -- <out_dir> [seed]

use std::path::Path;

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "fixture".into());
    let seed: u64 = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(42);
    let dir = Path::new(&out);
    std::fs::create_dir_all(dir).expect("create output directory");

    let g = curvclust::synth::three_block_fixture(seed);
    g.save(
        &dir.join("edges.tsv"),
        &dir.join("features.csv"),
        Some(&dir.join("labels.csv")),
    )
    .expect("write fixture files");
    println!(
        "wrote {} nodes / {} edges to {}",
        g.num_nodes(),
        g.num_edges(),
        dir.display()
    );
}
