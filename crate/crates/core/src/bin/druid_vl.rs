//! Command-line front end: seeded experiment runs, comparison suites,
//! graph generation/export, and a synthetic-dataset generator.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use druid_vl::data::{synthesize_logistic_with, write_libsvm};
use druid_vl::experiment::{compare_suite, run_experiment, ExperimentConfig};
use druid_vl::graph::generate_erdos_renyi;
use druid_vl::protocol::{derive_stream, stream_id};

#[derive(Parser)]
#[command(
    name = "druid-vl",
    about = "Distributed asynchronous ADMM with variable local work loads",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: `repeats` seeded runs, per-round CSVs, summary.
    Run(RunArgs),
    /// Run several configuration files against one dataset and emit a
    /// comparison table (rounds/communication/flops to target).
    Compare(CompareArgs),
    /// Generate a connected Erdős–Rényi graph and export its edge list.
    Graph(GraphArgs),
    /// Write a synthetic logistic-regression dataset in LIBSVM format
    /// (a stand-in when the benchmark dataset is not available).
    Synth(SynthArgs),
}

/// Flags mirror the configuration keys; command-line values override the
/// configuration file.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Plain-text key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// LIBSVM dataset path.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Feature dimension d.
    #[arg(long)]
    dim: Option<usize>,
    /// Number of agents.
    #[arg(long)]
    agents: Option<usize>,
    /// Erdős–Rényi edge probability.
    #[arg(long)]
    er_p: Option<f64>,
    /// Fixed edge list CSV (src,dst); overrides random generation.
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Master seed; run k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Global round budget T.
    #[arg(long)]
    rounds: Option<usize>,
    /// druid-vl | druid-newton | druid-gd | exact-admm.
    #[arg(long)]
    algorithm: Option<String>,
    /// equal:K | uniform:LO,HI | extreme:LO,HI | list:E1,E2,...
    #[arg(long)]
    e_profile: Option<String>,
    /// Participation probability applied to every agent.
    #[arg(long)]
    p_min: Option<f64>,
    /// Explicit per-agent participation probabilities.
    #[arg(long)]
    p_list: Option<String>,
    #[arg(long)]
    mu_z: Option<f64>,
    #[arg(long)]
    mu_theta: Option<f64>,
    /// L1 regularization weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Optional L2 weight making local losses strongly convex.
    #[arg(long)]
    ridge: Option<f64>,
    /// Fixed perturbation weight for every agent.
    #[arg(long)]
    eps: Option<f64>,
    /// Tuned perturbation weights: "ebar,Ebar,c,zeta".
    #[arg(long)]
    tune_eps: Option<String>,
    /// Gradient mini-batch size |b_g|.
    #[arg(long)]
    bg: Option<usize>,
    /// Hessian mini-batch size |b_H|.
    #[arg(long)]
    bh: Option<usize>,
    /// Target relative error.
    #[arg(long)]
    target: Option<f64>,
    /// Seeded repeats to average over.
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Step size for druid-gd (default: inverse smoothness bound).
    #[arg(long)]
    gd_step: Option<f64>,
    /// Gradient-norm tolerance of the exact sub-problem solver.
    #[arg(long)]
    exact_tol: Option<f64>,
    /// "shuffled" (default) or "contiguous" sample partition.
    #[arg(long)]
    partition: Option<String>,
    /// Count one vector per neighbor instead of one per broadcast.
    #[arg(long)]
    comm_per_edge: bool,
    /// Record wall-clock milliseconds (breaks byte-reproducibility).
    #[arg(long)]
    wall_clock: bool,
    /// Stop a run early once the relative error falls below this.
    #[arg(long)]
    stop_below: Option<f64>,
    /// Record the theory-monitor norm (synchronous runs only).
    #[arg(long)]
    lyapunov: bool,
    /// Subgradient tolerance for the centralized reference solve.
    #[arg(long)]
    xstar_tol: Option<f64>,
    /// Row label in comparison tables.
    #[arg(long)]
    label: Option<String>,
    /// Index of the agent holding the regularizer.
    #[arg(long)]
    q: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CompareArgs {
    /// Configuration files, one per compared setup.
    #[arg(long = "config", required = true, num_args = 1..)]
    configs: Vec<PathBuf>,
    /// Output directory for per-config runs and comparison.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides applied to every configuration (dataset, target, ...).
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    agents: usize,
    #[arg(long, default_value_t = 0.2)]
    er_p: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Destination CSV (src,dst).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4000)]
    samples: usize,
    #[arg(long, default_value_t = 22)]
    dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Half-width of the empty margin band around the separator.
    #[arg(long, default_value_t = 0.3)]
    gap: f64,
    /// Bias shifting the class balance.
    #[arg(long, default_value_t = 0.25)]
    bias: f64,
    /// Latent feature rank (capped at the dimension).
    #[arg(long, default_value_t = 5)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
}

fn build_config(ov: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new("", 0);
    if let Some(path) = &ov.config {
        cfg.apply_file(path)
            .with_context(|| format!("loading {}", path.display()))?;
    }
    let pairs: Vec<(&str, Option<String>)> = vec![
        ("dataset", ov.dataset.as_ref().map(|p| p.display().to_string())),
        ("dim", ov.dim.map(|v| v.to_string())),
        ("agents", ov.agents.map(|v| v.to_string())),
        ("er_p", ov.er_p.map(|v| v.to_string())),
        ("edges", ov.edges.as_ref().map(|p| p.display().to_string())),
        ("seed", ov.seed.map(|v| v.to_string())),
        ("rounds", ov.rounds.map(|v| v.to_string())),
        ("algorithm", ov.algorithm.clone()),
        ("e_profile", ov.e_profile.clone()),
        ("p_min", ov.p_min.map(|v| v.to_string())),
        ("p_list", ov.p_list.clone()),
        ("mu_z", ov.mu_z.map(|v| v.to_string())),
        ("mu_theta", ov.mu_theta.map(|v| v.to_string())),
        ("gamma", ov.gamma.map(|v| v.to_string())),
        ("ridge", ov.ridge.map(|v| v.to_string())),
        ("eps", ov.eps.map(|v| v.to_string())),
        ("tune_eps", ov.tune_eps.clone()),
        ("bg", ov.bg.map(|v| v.to_string())),
        ("bh", ov.bh.map(|v| v.to_string())),
        ("target", ov.target.map(|v| v.to_string())),
        ("repeats", ov.repeats.map(|v| v.to_string())),
        ("out_dir", ov.out_dir.as_ref().map(|p| p.display().to_string())),
        ("gd_step", ov.gd_step.map(|v| v.to_string())),
        ("exact_tol", ov.exact_tol.map(|v| v.to_string())),
        ("partition", ov.partition.clone()),
        ("comm_per_edge", ov.comm_per_edge.then(|| "true".to_string())),
        ("wall_clock", ov.wall_clock.then(|| "true".to_string())),
        ("stop_below", ov.stop_below.map(|v| v.to_string())),
        ("lyapunov", ov.lyapunov.then(|| "true".to_string())),
        ("xstar_tol", ov.xstar_tol.map(|v| v.to_string())),
        ("label", ov.label.clone()),
        ("q", ov.q.map(|v| v.to_string())),
    ];
    for (key, value) in pairs {
        if let Some(v) = value {
            cfg.apply(key, &v)?;
        }
    }

    if cfg.dataset.as_os_str().is_empty() {
        bail!("--dataset (or a config file setting it) is required");
    }
    if cfg.dim == 0 {
        bail!("--dim (or a config file setting it) is required");
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = build_config(&args.overrides)?;
            let summary = run_experiment(&cfg)?;
            let reached = summary.reached();
            let (rounds_mean, _) = summary.rounds_stats();
            println!(
                "{}: {}/{} runs reached {:.1e}; mean rounds {}",
                summary.label,
                reached,
                summary.runs.len(),
                cfg.target,
                if rounds_mean.is_nan() {
                    "-".to_string()
                } else {
                    format!("{rounds_mean:.1}")
                }
            );
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Compare(args) => {
            let mut cfgs = Vec::with_capacity(args.configs.len());
            for path in &args.configs {
                let mut ov = args.overrides.clone();
                ov.config = Some(path.clone());
                ov.out_dir = None; // per-config directories live under the suite root
                cfgs.push(build_config(&ov)?);
            }
            let rows = compare_suite(&cfgs, &args.out_dir)?;
            for row in rows {
                println!("{row}");
            }
            println!("comparison written to {}", args.out_dir.join("comparison.csv").display());
        }
        Command::Graph(args) => {
            let mut rng = derive_stream(args.seed, stream_id::GRAPH);
            let topo = generate_erdos_renyi(args.agents, args.er_p, &mut rng)?;
            topo.write_edge_csv(&args.out)?;
            println!(
                "wrote {} edges on {} nodes to {}",
                topo.edge_count(),
                topo.n(),
                args.out.display()
            );
        }
        Command::Synth(args) => {
            let samples =
                synthesize_logistic_with(args.samples, args.dim, args.seed, args.gap, args.bias, args.rank);
            write_libsvm(&args.out, &samples)?;
            println!(
                "wrote {} samples of dimension {} to {}",
                args.samples,
                args.dim,
                args.out.display()
            );
        }
    }
    Ok(())
}
