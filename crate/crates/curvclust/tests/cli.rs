//! End-to-end checks of the command-line surface: flags, files, exit codes.

mod common;

use std::path::{Path, PathBuf};
use std::process::Output;

use curvclust::graph::Graph;
use curvclust::synth::{sbm_graph, SbmSpec};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_curvclust")
}

fn run(args: &[&str]) -> Output {
    std::process::Command::new(bin()).args(args).output().expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

struct Fixture {
    _dir: tempfile::TempDir,
    edges: PathBuf,
    features: PathBuf,
    labels: PathBuf,
    config: PathBuf,
    base: PathBuf,
}

fn write_fixture(g: &Graph, config: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().to_path_buf();
    let edges = base.join("edges.tsv");
    let features = base.join("features.csv");
    let labels = base.join("labels.csv");
    g.save(&edges, &features, Some(&labels)).unwrap();
    let config_path = base.join("config.txt");
    std::fs::write(&config_path, config).unwrap();
    Fixture { _dir: dir, edges, features, labels, config: config_path, base }
}

fn small_sbm() -> Graph {
    sbm_graph(
        &SbmSpec { block_sizes: vec![8, 8], p_in: 0.6, p_out: 0.05, feature_dim: 4, feature_shift: 1.5 },
        5,
    )
}

const SMALL_CONFIG: &str =
    "k = 2\nlr = 0.02\nepochs = 4\nm_factors = 2\ndims = 3, 2\nsigns = -1, 1\nd0 = 4\nseed = 3\n";

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ricci_on_triangle_writes_three_equal_rows() {
    let g = Graph::new(
        &[(0, 1), (1, 2), (0, 2)],
        curvclust::diff::Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]),
        None,
    )
    .unwrap();
    let fx = write_fixture(&g, SMALL_CONFIG);
    let out_prefix = fx.base.join("tri");
    let out = run(&[
        "ricci",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--out",
        path_str(&out_prefix),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(fx.base.join("tri.edge_ricci.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "src,dst,ricci");
    assert_eq!(rows.len(), 4, "header plus one row per triangle edge");
    let vals: Vec<&str> = rows[1..].iter().map(|r| r.rsplit(',').next().unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[0] == w[1]), "triangle edges share one curvature");

    // rerun writes byte-identical CSVs
    let out_prefix2 = fx.base.join("tri2");
    let out2 = run(&[
        "ricci",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--out",
        path_str(&out_prefix2),
    ]);
    assert_eq!(exit_code(&out2), 0);
    let a = std::fs::read(fx.base.join("tri.edge_ricci.csv")).unwrap();
    let b = std::fs::read(fx.base.join("tri2.edge_ricci.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_input_file_exits_2() {
    let out = run(&[
        "ricci",
        "--edges",
        "/nonexistent/edges.tsv",
        "--features",
        "/nonexistent/features.csv",
        "--out",
        "/tmp/never",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn train_writes_outputs_and_eval_reproduces_summary() {
    let fx = write_fixture(&small_sbm(), SMALL_CONFIG);
    let prefix = fx.base.join("run");
    let out = run(&[
        "train",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--labels",
        path_str(&fx.labels),
        "--config",
        path_str(&fx.config),
        "--out",
        path_str(&prefix),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary = String::from_utf8(out.stdout).unwrap();
    let summary_line = summary.lines().last().unwrap().to_string();
    assert!(summary_line.starts_with("ACC="), "summary line: {summary_line}");

    for suffix in [".ckpt", ".metrics.csv", ".curves.csv", ".ricci.cache"] {
        assert!(fx.base.join(format!("run{suffix}")).exists(), "missing run{suffix}");
    }
    let metrics = std::fs::read_to_string(fx.base.join("run.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4, "header plus one row per epoch");

    // eval recomputes exactly the same final metrics
    let eval_out = run(&[
        "eval",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--labels",
        path_str(&fx.labels),
        "--config",
        path_str(&fx.config),
        "--checkpoint",
        path_str(&fx.base.join("run.ckpt")),
    ]);
    assert_eq!(exit_code(&eval_out), 0, "stderr: {}", String::from_utf8_lossy(&eval_out.stderr));
    let eval_text = String::from_utf8(eval_out.stdout).unwrap();
    let eval_summary = eval_text.lines().find(|l| l.starts_with("ACC=")).unwrap();
    assert_eq!(eval_summary, summary_line, "eval must reproduce the training summary");
    assert!(eval_text.lines().any(|l| l.starts_with("density=")));
}

#[test]
fn eval_without_labels_prints_density_only() {
    let fx = write_fixture(&small_sbm(), SMALL_CONFIG);
    let prefix = fx.base.join("run");
    let out = run(&[
        "train",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--config",
        path_str(&fx.config),
        "--out",
        path_str(&prefix),
    ]);
    assert_eq!(exit_code(&out), 0);
    let eval_out = run(&[
        "eval",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--config",
        path_str(&fx.config),
        "--checkpoint",
        path_str(&fx.base.join("run.ckpt")),
    ]);
    assert_eq!(exit_code(&eval_out), 0);
    let text = String::from_utf8(eval_out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("density=")));
    assert!(!text.contains("ACC="), "label metrics must be omitted without labels");
}

#[test]
fn epochs_zero_writes_single_initial_row() {
    let config = SMALL_CONFIG.replace("epochs = 4", "epochs = 0");
    let fx = write_fixture(&small_sbm(), &config);
    let prefix = fx.base.join("run");
    let out = run(&[
        "train",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--labels",
        path_str(&fx.labels),
        "--config",
        path_str(&fx.config),
        "--out",
        path_str(&prefix),
    ]);
    assert_eq!(exit_code(&out), 0);
    let metrics = std::fs::read_to_string(fx.base.join("run.metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows.len(), 2, "header plus the initial row only");
    assert!(rows[1].starts_with("0,"), "initial row carries epoch 0");
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let fx = write_fixture(&small_sbm(), SMALL_CONFIG);
    let prefix = fx.base.join("run");
    let out = run(&[
        "train",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--config",
        path_str(&fx.config),
        "--out",
        path_str(&prefix),
    ]);
    assert_eq!(exit_code(&out), 0);
    let ckpt = fx.base.join("run.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let len = bytes.len();
    bytes.truncate(len - 9);
    std::fs::write(&ckpt, &bytes).unwrap();
    let eval_out = run(&[
        "eval",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--config",
        path_str(&fx.config),
        "--checkpoint",
        path_str(&ckpt),
    ]);
    assert_eq!(exit_code(&eval_out), 4);
}

#[test]
fn checkpoint_signature_mismatch_exits_4() {
    let fx = write_fixture(&small_sbm(), SMALL_CONFIG);
    let prefix = fx.base.join("run");
    let out = run(&[
        "train",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--config",
        path_str(&fx.config),
        "--out",
        path_str(&prefix),
    ]);
    assert_eq!(exit_code(&out), 0);
    // evaluate under a config with a different manifold signature
    let other_config = fx.base.join("other.txt");
    std::fs::write(&other_config, SMALL_CONFIG.replace("d0 = 4", "d0 = 6")).unwrap();
    let eval_out = run(&[
        "eval",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--config",
        path_str(&other_config),
        "--checkpoint",
        path_str(&fx.base.join("run.ckpt")),
    ]);
    assert_eq!(exit_code(&eval_out), 4);
    assert!(String::from_utf8_lossy(&eval_out.stderr).contains("signature"));
}

#[test]
fn divergence_exits_3_with_checkpoint() {
    // an absurd learning rate overflows the contrast exponentials quickly
    let config = SMALL_CONFIG.replace("lr = 0.02", "lr = 1e12").replace("epochs = 4", "epochs = 30");
    let fx = write_fixture(&small_sbm(), &config);
    let prefix = fx.base.join("run");
    let out = run(&[
        "train",
        "--edges",
        path_str(&fx.edges),
        "--features",
        path_str(&fx.features),
        "--config",
        path_str(&fx.config),
        "--out",
        path_str(&prefix),
    ]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(fx.base.join("run.ckpt").exists(), "the last finite checkpoint must be written");
    assert!(fx.base.join("run.metrics.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let fx = write_fixture(&small_sbm(), SMALL_CONFIG);
    let run_with = |prefix: &Path, seed: Option<&str>| {
        let mut args = vec![
            "train".to_string(),
            "--edges".into(),
            path_str(&fx.edges).into(),
            "--features".into(),
            path_str(&fx.features).into(),
            "--config".into(),
            path_str(&fx.config).into(),
            "--out".into(),
            path_str(prefix).into(),
        ];
        if let Some(s) = seed {
            args.push("--seed".into());
            args.push(s.into());
        }
        let out = std::process::Command::new(bin()).args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
    };
    let a = fx.base.join("a");
    let b = fx.base.join("b");
    let c = fx.base.join("c");
    run_with(&a, None); // config seed 3
    run_with(&b, Some("3")); // explicit same seed
    run_with(&c, Some("4")); // different seed
    let read = |p: &Path| std::fs::read(p.with_file_name(format!("{}.metrics.csv", p.file_name().unwrap().to_str().unwrap()))).unwrap();
    assert_eq!(read(&a), read(&b), "seed 3 via flag must match config seed 3");
    assert_ne!(read(&a), read(&c), "different seeds must differ");
}
