//! Experiment harness: configuration (key-value files plus overrides),
//! seeded repeat runs, per-round CSVs, summaries, and comparison tables.

use nalgebra::DVector;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{parse_libsvm, partition, PartitionStrategy, Sample};
use crate::error::{Error, Result};
use crate::graph::{generate_erdos_renyi, Topology};
use crate::metrics::{rounds_to_error, write_csv, RoundRecord};
use crate::objective::LossConfig;
use crate::oracle::{
    cached_solve_centralized, kkt_fixed_point, lyapunov_norm, relative_error, LyapunovWeighting,
};
use crate::protocol::{
    derive_stream, init_run, run_matrix_reference, run_round, stacked_x, stream_id, tune_epsilons,
    HyperParams, RunStreams,
};
use crate::solver::SolverKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    DruidVl,
    DruidNewton,
    DruidGd,
    ExactAdmm,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "druid-vl" => Ok(Algorithm::DruidVl),
            "druid-newton" => Ok(Algorithm::DruidNewton),
            "druid-gd" => Ok(Algorithm::DruidGd),
            "exact-admm" => Ok(Algorithm::ExactAdmm),
            other => Err(Error::InvalidArgument(format!(
                "unknown algorithm {other:?} (expected druid-vl, druid-newton, druid-gd, exact-admm)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::DruidVl => "druid-vl",
            Algorithm::DruidNewton => "druid-newton",
            Algorithm::DruidGd => "druid-gd",
            Algorithm::ExactAdmm => "exact-admm",
        }
    }
}

/// Work-load assignment across agents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EProfile {
    Equal(usize),
    /// Independent uniform draws from `lo..=hi` on the work-profile stream.
    Uniform(usize, usize),
    /// `floor(n/2)` agents get `lo`, the rest `hi`.
    Extreme(usize, usize),
    Explicit(Vec<usize>),
}

impl EProfile {
    pub fn parse(s: &str) -> Result<Self> {
        let err = || {
            Error::InvalidArgument(format!(
                "bad e-profile {s:?} (expected equal:K, uniform:LO,HI, extreme:LO,HI or list:E1,E2,...)"
            ))
        };
        let (kind, rest) = s.split_once(':').ok_or_else(err)?;
        let ints = |rest: &str| -> Result<Vec<usize>> {
            rest.split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| err()))
                .collect()
        };
        match kind {
            "equal" => Ok(EProfile::Equal(rest.trim().parse().map_err(|_| err())?)),
            "uniform" | "extreme" => {
                let v = ints(rest)?;
                if v.len() != 2 || v[0] > v[1] || v[0] == 0 {
                    return Err(err());
                }
                if kind == "uniform" {
                    Ok(EProfile::Uniform(v[0], v[1]))
                } else {
                    Ok(EProfile::Extreme(v[0], v[1]))
                }
            }
            "list" => Ok(EProfile::Explicit(ints(rest)?)),
            _ => Err(err()),
        }
    }

    /// Realize per-agent work loads for one run.
    pub fn realize(&self, n: usize, run_seed: u64) -> Result<Vec<usize>> {
        match self {
            EProfile::Equal(k) => Ok(vec![*k; n]),
            EProfile::Uniform(lo, hi) => {
                let mut rng = derive_stream(run_seed, stream_id::WORK_PROFILE);
                use rand::Rng;
                Ok((0..n).map(|_| rng.random_range(*lo..=*hi)).collect())
            }
            EProfile::Extreme(lo, hi) => {
                let half = n / 2;
                Ok((0..n).map(|i| if i < half { *lo } else { *hi }).collect())
            }
            EProfile::Explicit(v) => {
                if v.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "explicit e-profile has {} entries for {n} agents",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

impl fmt::Display for EProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EProfile::Equal(k) => write!(f, "equal:{k}"),
            EProfile::Uniform(a, b) => write!(f, "uniform:{a},{b}"),
            EProfile::Extreme(a, b) => write!(f, "extreme:{a},{b}"),
            EProfile::Explicit(v) => {
                let items: Vec<String> = v.iter().map(usize::to_string).collect();
                write!(f, "list:{}", items.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PProfile {
    Scalar(f64),
    Explicit(Vec<f64>),
}

impl PProfile {
    pub fn realize(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            PProfile::Scalar(p) => Ok(vec![*p; n]),
            PProfile::Explicit(v) => {
                if v.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "explicit p-profile has {} entries for {n} agents",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

impl fmt::Display for PProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PProfile::Scalar(p) => write!(f, "{p}"),
            PProfile::Explicit(v) => {
                let items: Vec<String> = v.iter().map(f64::to_string).collect();
                write!(f, "{}", items.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EpsMode {
    Fixed(f64),
    Tuned {
        eps_bar: f64,
        e_bar: usize,
        c: f64,
        zeta: f64,
    },
}

impl EpsMode {
    pub fn realize(&self, inner_iters: &[usize]) -> Result<Vec<f64>> {
        match self {
            EpsMode::Fixed(v) => Ok(vec![*v; inner_iters.len()]),
            EpsMode::Tuned {
                eps_bar,
                e_bar,
                c,
                zeta,
            } => tune_epsilons(inner_iters, *eps_bar, *e_bar, *c, *zeta),
        }
    }
}

impl fmt::Display for EpsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpsMode::Fixed(v) => write!(f, "fixed:{v}"),
            EpsMode::Tuned {
                eps_bar,
                e_bar,
                c,
                zeta,
            } => write!(f, "tuned:{eps_bar},{e_bar},{c},{zeta}"),
        }
    }
}

/// Full description of one experiment. Defaults follow the benchmark
/// configuration: 10 agents on an ER(0.2) graph, gamma = 2e-6,
/// mu_theta = 2 mu_z = 1e-4, eps = 1e-4, batches of 100, E = 10.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub dim: usize,
    pub agents: usize,
    pub er_p: f64,
    pub edges: Option<PathBuf>,
    pub seed: u64,
    pub rounds: usize,
    pub algorithm: Algorithm,
    pub e_profile: EProfile,
    pub p_profile: PProfile,
    pub mu_z: f64,
    pub mu_theta: f64,
    pub gamma: f64,
    pub ridge: f64,
    pub eps_mode: EpsMode,
    pub grad_batch: usize,
    pub hess_batch: usize,
    pub target: f64,
    pub repeats: usize,
    pub out_dir: PathBuf,
    pub gd_step: Option<f64>,
    pub exact_tol: f64,
    pub partition_contiguous: bool,
    pub comm_per_edge: bool,
    pub measure_wall: bool,
    pub stop_below: Option<f64>,
    pub record_lyapunov: bool,
    pub xstar_tol: f64,
    pub label: Option<String>,
    pub regularizer_agent: usize,
}

impl ExperimentConfig {
    pub fn new<P: Into<PathBuf>>(dataset: P, dim: usize) -> Self {
        ExperimentConfig {
            dataset: dataset.into(),
            dim,
            agents: 10,
            er_p: 0.2,
            edges: None,
            seed: 1,
            rounds: 1000,
            algorithm: Algorithm::DruidVl,
            e_profile: EProfile::Equal(10),
            p_profile: PProfile::Scalar(1.0),
            mu_z: 5e-5,
            mu_theta: 1e-4,
            gamma: 2e-6,
            ridge: 0.0,
            eps_mode: EpsMode::Fixed(1e-4),
            grad_batch: 100,
            hess_batch: 100,
            target: 1e-2,
            repeats: 1,
            out_dir: PathBuf::from("out"),
            gd_step: None,
            exact_tol: 1e-5,
            partition_contiguous: false,
            comm_per_edge: false,
            measure_wall: false,
            stop_below: None,
            record_lyapunov: false,
            xstar_tol: 1e-10,
            label: None,
            regularizer_agent: 0,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            format!("{}_{}_p{}", self.algorithm.name(), self.e_profile, self.p_profile)
        })
    }

    /// Apply one documented `key=value` pair.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::InvalidArgument(format!("bad value {value:?} for {what}"));
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "dim" => self.dim = value.parse().map_err(|_| bad(key))?,
            "agents" => self.agents = value.parse().map_err(|_| bad(key))?,
            "er_p" => self.er_p = value.parse().map_err(|_| bad(key))?,
            "edges" => self.edges = Some(PathBuf::from(value)),
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "rounds" => self.rounds = value.parse().map_err(|_| bad(key))?,
            "algorithm" => self.algorithm = Algorithm::parse(value)?,
            "e_profile" => self.e_profile = EProfile::parse(value)?,
            "p_min" => {
                self.p_profile = PProfile::Scalar(value.parse().map_err(|_| bad(key))?);
            }
            "p_list" => {
                let v: std::result::Result<Vec<f64>, _> =
                    value.split(',').map(|t| t.trim().parse()).collect();
                self.p_profile = PProfile::Explicit(v.map_err(|_| bad(key))?);
            }
            "mu_z" => self.mu_z = value.parse().map_err(|_| bad(key))?,
            "mu_theta" => self.mu_theta = value.parse().map_err(|_| bad(key))?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad(key))?,
            "ridge" => self.ridge = value.parse().map_err(|_| bad(key))?,
            "eps" => self.eps_mode = EpsMode::Fixed(value.parse().map_err(|_| bad(key))?),
            "tune_eps" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(bad("tune_eps (expected ebar,Ebar,c,zeta)"));
                }
                self.eps_mode = EpsMode::Tuned {
                    eps_bar: parts[0].parse().map_err(|_| bad(key))?,
                    e_bar: parts[1].parse().map_err(|_| bad(key))?,
                    c: parts[2].parse().map_err(|_| bad(key))?,
                    zeta: parts[3].parse().map_err(|_| bad(key))?,
                };
            }
            "bg" => self.grad_batch = value.parse().map_err(|_| bad(key))?,
            "bh" => self.hess_batch = value.parse().map_err(|_| bad(key))?,
            "target" => self.target = value.parse().map_err(|_| bad(key))?,
            "repeats" => self.repeats = value.parse().map_err(|_| bad(key))?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "gd_step" => self.gd_step = Some(value.parse().map_err(|_| bad(key))?),
            "exact_tol" => self.exact_tol = value.parse().map_err(|_| bad(key))?,
            "partition" => {
                self.partition_contiguous = match value {
                    "contiguous" => true,
                    "shuffled" => false,
                    _ => return Err(bad(key)),
                };
            }
            "comm_per_edge" => self.comm_per_edge = value.parse().map_err(|_| bad(key))?,
            "wall_clock" => self.measure_wall = value.parse().map_err(|_| bad(key))?,
            "stop_below" => self.stop_below = Some(value.parse().map_err(|_| bad(key))?),
            "lyapunov" => self.record_lyapunov = value.parse().map_err(|_| bad(key))?,
            "xstar_tol" => self.xstar_tol = value.parse().map_err(|_| bad(key))?,
            "label" => self.label = Some(value.to_string()),
            "q" => self.regularizer_agent = value.parse().map_err(|_| bad(key))?,
            other => {
                return Err(Error::InvalidArgument(format!("unknown configuration key {other:?}")));
            }
        }
        Ok(())
    }

    /// Load `key=value` lines (UTF-8, `#` comments) on top of this config.
    pub fn apply_file<P: AsRef<Path>>(&mut self, path: P) -> Result<()> {
        let name = path.as_ref().display().to_string();
        let text = fs::read_to_string(&path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: name.clone(),
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.apply(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: name.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn solver_kind(&self, smoothness_hint: f64) -> SolverKind {
        match self.algorithm {
            Algorithm::DruidVl => SolverKind::StochasticNewton,
            Algorithm::DruidNewton => SolverKind::DeterministicNewton,
            Algorithm::DruidGd => SolverKind::GradientDescent {
                step: self.gd_step.unwrap_or(1.0 / smoothness_hint),
            },
            Algorithm::ExactAdmm => SolverKind::Exact { tol: self.exact_tol },
        }
    }
}

/// Outputs of a single seeded run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub records: Vec<RoundRecord>,
    pub rounds_to_target: Option<usize>,
    pub comm_to_target: Option<f64>,
    pub flops_to_target: Option<f64>,
    pub final_relative_error: f64,
}

/// Execute run `run_idx` of the experiment against pre-parsed samples.
pub fn run_single(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    run_idx: usize,
) -> Result<RunArtifacts> {
    let run_seed = cfg.seed.wrapping_add(run_idx as u64);
    let n = cfg.agents;

    let topo = match &cfg.edges {
        Some(path) => {
            let topo = Topology::read_edge_csv(path, n)?;
            if !crate::graph::is_connected(&topo) {
                return Err(Error::InvalidArgument(format!(
                    "edge list {} is not connected",
                    path.display()
                )));
            }
            topo
        }
        None => {
            let mut rng = derive_stream(run_seed, stream_id::GRAPH);
            generate_erdos_renyi(n, cfg.er_p, &mut rng)?
        }
    };

    let strategy = if cfg.partition_contiguous {
        PartitionStrategy::Contiguous
    } else {
        PartitionStrategy::Shuffled(run_seed)
    };
    let shards = partition(samples.to_vec(), n, strategy)?;

    let inner_iters = cfg.e_profile.realize(n, run_seed)?;
    let eps = cfg.eps_mode.realize(&inner_iters)?;
    let participation = cfg.p_profile.realize(n)?;
    let hp = HyperParams {
        mu_z: cfg.mu_z,
        mu_theta: cfg.mu_theta,
        gamma: cfg.gamma,
        ridge: cfg.ridge,
        eps,
        inner_iters,
        participation,
        grad_batch: cfg.grad_batch,
        hess_batch: cfg.hess_batch,
        q: cfg.regularizer_agent,
        master_seed: run_seed,
        rounds: cfg.rounds,
    };
    hp.validate(n)?;

    // Reference minimizer of the objective the protocol optimizes
    // (sum_i f_i + gamma ||.||_1, i.e. the mean form at weight gamma / n).
    let cache_dir = cfg.out_dir.join("xstar_cache");
    let loss_cfg = LossConfig::new(cfg.gamma / n as f64, cfg.ridge)?;
    let x_star = cached_solve_centralized(&shards, &loss_cfg, cfg.xstar_tol, Some(&cache_dir))?;

    let smoothness_hint = {
        let m_f = cfg.ridge
            + 0.25
                * samples
                    .iter()
                    .map(|s| s.features.norm_squared())
                    .fold(0.0, f64::max);
        let max_eps = hp.eps.iter().copied().fold(0.0, f64::max);
        m_f + cfg.mu_z * topo.max_degree() as f64 + cfg.mu_theta + max_eps
    };
    let kind = cfg.solver_kind(smoothness_hint);

    // Optional theory monitor: replay the same seeds through the stacked
    // runner against the protocol's fixed point. Synchronous only.
    let lyapunov_track: Option<(Vec<f64>,)> = if cfg.record_lyapunov {
        if hp.p_min() < 1.0 {
            return Err(Error::InvalidArgument(
                "lyapunov recording requires full participation (p_min = 1)".into(),
            ));
        }
        let fixed = kkt_fixed_point(&topo, &shards, &hp, cfg.xstar_tol)?;
        let mut streams = RunStreams::new(run_seed, n);
        let traj =
            run_matrix_reference(&topo, &shards, &hp, None, cfg.rounds, &kind, &mut streams)?;
        let values: Vec<f64> = traj
            .iter()
            .map(|state| lyapunov_norm(state, &fixed, &hp, LyapunovWeighting::PerAgent))
            .collect();
        Some((values,))
    } else {
        None
    };

    let (mut agents, mut reg) = init_run(&topo, shards, &hp, None)?;
    let mut streams = RunStreams::new(run_seed, n);
    let x0 = stacked_x(&agents);

    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.rounds + 1);
    let mut comm_cum = 0usize;
    let mut flops_cum = 0.0;
    let initial_error = relative_error(&x0, &x0, &x_star)?;
    records.push(RoundRecord {
        round: 0,
        active: Vec::new(),
        relative_error: initial_error,
        comm_vectors: 0,
        comm_cum_per_agent: 0.0,
        flops: 0.0,
        wall_ms: cfg.measure_wall.then(|| 0.0),
        lyapunov: lyapunov_track.as_ref().map(|(v,)| v[0]),
    });

    for t in 0..cfg.rounds {
        let outcome = run_round(&mut agents, &mut reg, &topo, &hp, &kind, &mut streams, t)?;
        let comm = if cfg.comm_per_edge {
            outcome.comm_edge_vectors
        } else {
            outcome.comm_broadcast_vectors
        };
        comm_cum += comm;
        flops_cum += outcome.agent_flops.iter().sum::<f64>();
        let rel = relative_error(&stacked_x(&agents), &x0, &x_star)?;
        records.push(RoundRecord {
            round: t + 1,
            active: outcome.active,
            relative_error: rel,
            comm_vectors: comm,
            comm_cum_per_agent: comm_cum as f64 / n as f64,
            flops: flops_cum,
            wall_ms: cfg.measure_wall.then(|| started.elapsed().as_secs_f64() * 1e3),
            lyapunov: lyapunov_track.as_ref().map(|(v,)| v[t + 1]),
        });
        if cfg.stop_below.is_some_and(|s| rel <= s) {
            break;
        }
    }

    let crossing = rounds_to_error(&records, cfg.target);
    let at = |t: usize| &records[t];
    Ok(RunArtifacts {
        rounds_to_target: crossing,
        comm_to_target: crossing.map(|t| at(t).comm_cum_per_agent),
        flops_to_target: crossing.map(|t| at(t).flops),
        final_relative_error: records.last().unwrap().relative_error,
        records,
    })
}

/// Aggregate of one experiment across its seeded repeats.
#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub label: String,
    pub runs: Vec<RunArtifacts>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

impl ExperimentSummary {
    pub fn reached(&self) -> usize {
        self.runs.iter().filter(|r| r.rounds_to_target.is_some()).count()
    }

    pub fn rounds_stats(&self) -> (f64, f64) {
        mean_std(
            &self
                .runs
                .iter()
                .filter_map(|r| r.rounds_to_target.map(|t| t as f64))
                .collect::<Vec<_>>(),
        )
    }

    pub fn comm_stats(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().filter_map(|r| r.comm_to_target).collect::<Vec<_>>())
    }

    pub fn flops_stats(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().filter_map(|r| r.flops_to_target).collect::<Vec<_>>())
    }
}

fn fmt_stat(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Run all repeats, writing `run_<k>.csv` per run plus `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    if cfg.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let samples = parse_libsvm(&cfg.dataset, cfg.dim)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut runs = Vec::with_capacity(cfg.repeats);
    for k in 0..cfg.repeats {
        let artifacts = run_single(cfg, &samples, k)?;
        write_csv(cfg.out_dir.join(format!("run_{k}.csv")), &artifacts.records)?;
        runs.push(artifacts);
    }
    let summary = ExperimentSummary {
        label: cfg.label(),
        runs,
    };

    let mut text = String::from("metric,mean,stddev,count_reached,runs\n");
    let reached = summary.reached();
    let total = summary.runs.len();
    let (rm, rs) = summary.rounds_stats();
    let (cm, cs) = summary.comm_stats();
    let (fm, fs_) = summary.flops_stats();
    text.push_str(&format!(
        "rounds_to_target,{},{},{reached},{total}\n",
        fmt_stat(rm),
        fmt_stat(rs)
    ));
    text.push_str(&format!(
        "comm_per_agent_to_target,{},{},{reached},{total}\n",
        fmt_stat(cm),
        fmt_stat(cs)
    ));
    text.push_str(&format!(
        "flops_to_target,{},{},{reached},{total}\n",
        fmt_stat(fm),
        fmt_stat(fs_)
    ));
    let (em, es) = mean_std(
        &summary
            .runs
            .iter()
            .map(|r| r.final_relative_error)
            .collect::<Vec<_>>(),
    );
    text.push_str(&format!(
        "final_relative_error,{},{},{total},{total}\n",
        fmt_stat(em),
        fmt_stat(es)
    ));
    fs::write(cfg.out_dir.join("summary.csv"), text)?;
    Ok(summary)
}

pub const COMPARISON_HEADER: &str = "label,algorithm,e_profile,p_profile,eps_mode,runs,reached,\
rounds_mean,rounds_std,comm_mean,comm_std,flops_mean,flops_std";

/// Run several configurations sharing one dataset and target; emit one
/// comparison row per configuration.
pub fn compare_suite(cfgs: &[ExperimentConfig], out_dir: &Path) -> Result<Vec<String>> {
    if cfgs.is_empty() {
        return Err(Error::InvalidArgument("no configurations to compare".into()));
    }
    for cfg in &cfgs[1..] {
        if cfg.dataset != cfgs[0].dataset || cfg.dim != cfgs[0].dim {
            return Err(Error::InvalidArgument(
                "comparison configurations must share one dataset".into(),
            ));
        }
        if cfg.target != cfgs[0].target {
            return Err(Error::InvalidArgument(
                "comparison configurations must share one target error".into(),
            ));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let mut local = cfg.clone();
        local.out_dir = out_dir.join(local.label());
        let summary = run_experiment(&local)?;
        let (rm, rs) = summary.rounds_stats();
        let (cm, cs) = summary.comm_stats();
        let (fm, fs_) = summary.flops_stats();
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            summary.label,
            cfg.algorithm.name(),
            cfg.e_profile,
            cfg.p_profile,
            cfg.eps_mode,
            summary.runs.len(),
            summary.reached(),
            fmt_stat(rm),
            fmt_stat(rs),
            fmt_stat(cm),
            fmt_stat(cs),
            fmt_stat(fm),
            fmt_stat(fs_),
        ));
    }
    let mut text = String::from(COMPARISON_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(out_dir.join("comparison.csv"), text)?;
    Ok(rows)
}

/// Stacked initial iterate helper for callers that start away from zero.
pub fn replicate_block(block: &DVector<f64>, n: usize) -> DVector<f64> {
    let d = block.len();
    let mut out = DVector::zeros(n * d);
    for i in 0..n {
        out.rows_mut(i * d, d).copy_from(block);
    }
    out
}
