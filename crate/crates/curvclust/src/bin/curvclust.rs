//! Command-line pipeline: precompute curvatures, train, evaluate.
//!
//! Exit codes: 0 ok, 2 input error, 3 divergence, 4 checkpoint error.
//! All outputs are plain CSV so downstream plotting stays scriptable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use curvclust::config::{ConfigError, TrainConfig};
use curvclust::graph::{load_graph, Graph, GraphError};
use curvclust::metrics;
use curvclust::ricci::{self, RicciError, RicciTable};
use curvclust::trainer::checkpoint::CheckpointError;
use curvclust::trainer::{EpochRecord, TrainError, Trainer};

const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Parser)]
#[command(name = "curvclust", version, about = "Attributed-graph clustering in a heterogeneous curvature space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute Ollivier-Ricci curvature for every edge and node.
    Ricci {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Mass kept on the center node, in [0, 1).
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        /// Output prefix: writes <out>.cache, <out>.edge_ricci.csv,
        /// <out>.node_ricci.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train centroids end-to-end; writes checkpoint and per-epoch CSVs.
    Train {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Output prefix: writes <out>.ckpt, <out>.metrics.csv,
        /// <out>.curves.csv and reuses/builds <out>.ricci.cache.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute assignments and metrics from a checkpoint, no training.
    Eval {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

enum CliError {
    Input(String),
    Diverged(String),
    Checkpoint(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Diverged(m) | CliError::Checkpoint(m) => m,
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<RicciError> for CliError {
    fn from(e: RicciError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::KTooLarge { .. } | TrainError::MissingRicciTable => CliError::Input(e.to_string()),
            TrainError::Diff(_) | TrainError::Retraction(_) => CliError::Diverged(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ricci { edges, features, labels, lambda, out } => {
            cmd_ricci(&edges, &features, labels.as_deref(), lambda, &out)
        }
        Command::Train { edges, features, labels, config, out, seed } => {
            cmd_train(&edges, &features, labels.as_deref(), &config, &out, seed)
        }
        Command::Eval { edges, features, labels, config, checkpoint } => {
            cmd_eval(&edges, &features, labels.as_deref(), &config, &checkpoint)
        }
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn write_text(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn cmd_ricci(
    edges: &Path,
    features: &Path,
    labels: Option<&Path>,
    lambda: f64,
    out: &Path,
) -> Result<(), CliError> {
    let graph = load_graph(edges, features, labels)?;
    let table = ricci::compute_ricci_table(&graph, lambda)?;
    ricci::save_cache(&table, &graph, &with_suffix(out, ".cache"))?;
    write_text(&with_suffix(out, ".edge_ricci.csv"), &table.edge_csv())?;
    write_text(&with_suffix(out, ".node_ricci.csv"), &table.node_csv())?;

    let values: Vec<f64> = table.edge_ricci.values().copied().collect();
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("edges={}", values.len());
    if values.is_empty() {
        println!("mean=NA min=NA max=NA");
    } else {
        println!("mean={} min={min} max={max}", table.mean_edge_ricci());
    }
    Ok(())
}

/// Reuses a matching curvature cache next to the outputs, else recomputes
/// and stores it.
fn ricci_table_cached(graph: &Graph, lambda: f64, cache_path: &Path) -> Result<RicciTable, CliError> {
    if let Some(table) = ricci::load_cache(graph, lambda, cache_path) {
        return Ok(table);
    }
    let table = ricci::compute_ricci_table(graph, lambda)?;
    ricci::save_cache(&table, graph, cache_path)?;
    Ok(table)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,J,L_ric,L_curv,L_rgc,nmi,ari,acc\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.j,
            r.l_ric,
            r.l_curv,
            r.l_rgc,
            opt(r.nmi),
            opt(r.ari),
            opt(r.acc)
        );
    }
    out
}

fn curves_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,density,entropy\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.epoch, opt(r.density), opt(r.entropy));
    }
    out
}

struct FinalScores {
    nmi: Option<f64>,
    ari: Option<f64>,
    acc: Option<f64>,
    density: Option<f64>,
    entropy: Option<f64>,
}

fn score_final(trainer: &Trainer) -> FinalScores {
    let state = trainer.evaluate();
    let hard: Vec<usize> =
        (0..state.membership.rows()).map(|r| state.membership.argmax_row(r)).collect();
    let graph = trainer.graph();
    let density = metrics::cluster_density(graph, &hard);
    match graph.labels() {
        Some(truth) => FinalScores {
            nmi: metrics::nmi(&hard, truth).ok(),
            ari: metrics::ari(&hard, truth).ok(),
            acc: metrics::acc(&hard, truth).ok(),
            density,
            entropy: Some(metrics::cluster_entropy(&hard, truth)),
        },
        None => FinalScores { nmi: None, ari: None, acc: None, density, entropy: None },
    }
}

fn na(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

fn cmd_train(
    edges: &Path,
    features: &Path,
    labels: Option<&Path>,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let mut graph = load_graph(edges, features, labels)?;
    if cfg.normalize_features {
        graph.normalize_feature_rows();
    }
    let table = ricci_table_cached(&graph, cfg.lambda, &with_suffix(out, ".ricci.cache"))?;
    let mut trainer = Trainer::new(graph, Some(&table), cfg).map_err(CliError::from)?;
    let outcome = trainer.train().map_err(CliError::from)?;

    write_text(&with_suffix(out, ".metrics.csv"), &metrics_csv(&outcome.records))?;
    write_text(&with_suffix(out, ".curves.csv"), &curves_csv(&outcome.records))?;
    trainer.save_checkpoint(&with_suffix(out, ".ckpt"))?;

    if let Some(epoch) = outcome.diverged_at {
        return Err(CliError::Diverged(format!(
            "J became non-finite at epoch {epoch}; last finite checkpoint written to {}",
            with_suffix(out, ".ckpt").display()
        )));
    }
    let scores = score_final(&trainer);
    println!("ACC={},NMI={},ARI={}", na(scores.acc), na(scores.nmi), na(scores.ari));
    Ok(())
}

fn cmd_eval(
    edges: &Path,
    features: &Path,
    labels: Option<&Path>,
    config: &Path,
    checkpoint: &Path,
) -> Result<(), CliError> {
    let cfg = TrainConfig::from_file(config)?;
    let mut graph = load_graph(edges, features, labels)?;
    if cfg.normalize_features {
        graph.normalize_feature_rows();
    }
    let mut trainer = Trainer::new(graph, None, cfg).map_err(CliError::from)?;
    trainer.load_checkpoint(checkpoint)?;
    let scores = score_final(&trainer);
    println!("density={}", na(scores.density));
    if scores.nmi.is_some() {
        println!("entropy={}", na(scores.entropy));
        println!("ACC={},NMI={},ARI={}", na(scores.acc), na(scores.nmi), na(scores.ari));
    }
    Ok(())
}
