//! Per-round accounting: relative error, communication, a deterministic
//! flop-cost model, and optional wall-clock.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::solver::SolverKind;

/// One row of run output.
#[derive(Clone, Debug)]
pub struct RoundRecord {
    pub round: usize,
    pub active: Vec<usize>,
    pub relative_error: f64,
    /// d-vectors broadcast this round.
    pub comm_vectors: usize,
    /// Average cumulative vectors broadcast per agent.
    pub comm_cum_per_agent: f64,
    /// Cumulative cost-model units.
    pub flops: f64,
    pub wall_ms: Option<f64>,
    pub lyapunov: Option<f64>,
}

/// Cost of evaluating a mini-batch gradient of size `batch`.
pub fn gradient_step_flops(d: usize, batch: usize) -> f64 {
    2.0 * batch as f64 * d as f64
}

fn hessian_assembly_flops(d: usize, batch: usize) -> f64 {
    batch as f64 * (d * d) as f64
}

fn spd_solve_flops(d: usize) -> f64 {
    let d = d as f64;
    d * d * d / 3.0 + 2.0 * d * d
}

/// Cost of one Newton inner iteration: gradient + Hessian assembly + solve.
pub fn newton_iteration_flops(d: usize, grad_batch: usize, hess_batch: usize) -> f64 {
    gradient_step_flops(d, grad_batch) + hessian_assembly_flops(d, hess_batch) + spd_solve_flops(d)
}

/// Deterministic per-agent cost of one local update under the given solver.
/// Comparisons across algorithms all use these same constants.
pub fn flop_cost(
    kind: &SolverKind,
    d: usize,
    grad_batch: usize,
    hess_batch: usize,
    inner_iterations: usize,
) -> f64 {
    match kind {
        SolverKind::StochasticNewton | SolverKind::DeterministicNewton | SolverKind::Exact { .. } => {
            inner_iterations as f64 * newton_iteration_flops(d, grad_batch, hess_batch)
        }
        SolverKind::GradientDescent { .. } => gradient_step_flops(d, grad_batch),
    }
}

/// First round index whose relative error is at or below `target`.
pub fn rounds_to_error(trajectory: &[RoundRecord], target: f64) -> Option<usize> {
    trajectory
        .iter()
        .find(|r| r.relative_error <= target)
        .map(|r| r.round)
}

pub const CSV_HEADER: &str = "t,active_count,rel_err,comm_vectors,comm_cum_per_agent,flops,wall_ms,lyapunov";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(rec: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        rec.round,
        rec.active.len(),
        rec.relative_error,
        rec.comm_vectors,
        rec.comm_cum_per_agent,
        rec.flops,
        fmt_opt(rec.wall_ms),
        fmt_opt(rec.lyapunov),
    )
}

/// Write one run's trajectory as CSV with the fixed column order.
pub fn write_csv<P: AsRef<Path>>(path: P, records: &[RoundRecord]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for rec in records {
        text.push_str(&csv_row(rec));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
