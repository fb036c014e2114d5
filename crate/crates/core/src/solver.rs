//! Per-agent primal update: a variable number of stochastic Newton steps,
//! plus the deterministic single-step Newton, gradient-descent, and
//! exact-subproblem variants used as baselines.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

use crate::data::sample_batch;
use crate::error::{Error, Result};
use crate::metrics::{gradient_step_flops, newton_iteration_flops};
use crate::objective::{local_sto_gradient, local_subsampled_hessian};
use crate::protocol::{AgentState, HyperParams, RegularizerState};

/// Inner-iteration cap for the exact sub-problem mode.
pub const EXACT_ITERATION_CAP: usize = 200;

/// Relative residual the SPD solve must reach.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

/// Which local solver an experiment runs.
#[derive(Clone, Debug, PartialEq)]
pub enum SolverKind {
    /// `E_i` Newton steps on mini-batch gradients and sub-sampled Hessians;
    /// batch sizes come from the hyperparameters, work loads from the agent.
    StochasticNewton,
    /// One full-batch Newton step.
    DeterministicNewton,
    /// One full-batch gradient step of the given size.
    GradientDescent { step: f64 },
    /// Full-batch Newton iterated until the local gradient norm falls below
    /// `tol`, capped at `EXACT_ITERATION_CAP` iterations.
    Exact { tol: f64 },
}

/// Solve `H dir = g` for symmetric positive definite `H` by Cholesky
/// factorization, refining once if the residual is above tolerance.
pub fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = h.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let mut dir = chol.solve(g);
    let target = SOLVE_RESIDUAL_TOL * g.norm();
    let residual = g - h * &dir;
    if residual.norm() > target {
        dir += chol.solve(&residual);
        let residual = g - h * &dir;
        if residual.norm() > target {
            return Err(Error::NotPositiveDefinite);
        }
    }
    Ok(dir)
}

/// Result of one local primal update.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub x_new: DVector<f64>,
    /// Cost-model units spent.
    pub flops: f64,
    /// Newton/gradient steps actually taken.
    pub inner_iterations: usize,
    /// Exact mode ran out of iterations before reaching its tolerance.
    pub hit_cap: bool,
}

fn full_batch(agent: &AgentState) -> Vec<usize> {
    (0..agent.shard.len()).collect()
}

fn draw<R: Rng>(agent: &AgentState, size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if size == agent.shard.len() {
        // Full batch: fixed order, no stream consumption, so full-batch
        // stochastic runs coincide exactly with the deterministic solver.
        Ok(full_batch(agent))
    } else {
        sample_batch(&agent.shard, size, rng)
    }
}

/// Run the agent's primal update from its round anchor. The agent state is
/// read-only; the caller commits `x_new` at the broadcast barrier.
pub fn run_local<R: Rng>(
    agent: &AgentState,
    reg: Option<&RegularizerState>,
    kind: &SolverKind,
    hp: &HyperParams,
    rng: &mut R,
) -> Result<LocalOutcome> {
    let d = agent.x.len();
    let wrap = |e: Error, inner: usize| match e {
        Error::NotPositiveDefinite => Error::LocalSolve {
            agent: agent.index,
            inner,
        },
        other => other,
    };
    match kind {
        SolverKind::StochasticNewton => {
            let mut x = agent.x.clone();
            let mut flops = 0.0;
            for e in 1..=agent.inner_iters {
                let bg = draw(agent, hp.grad_batch, rng)?;
                let bh = draw(agent, hp.hess_batch, rng)?;
                let g = local_sto_gradient(agent, reg, &x, &bg, hp)?;
                let h = local_subsampled_hessian(agent, &x, &bh, hp);
                let dir = newton_direction(&h, &g).map_err(|err| wrap(err, e))?;
                x -= dir;
                flops += newton_iteration_flops(d, bg.len(), bh.len());
            }
            Ok(LocalOutcome {
                x_new: x,
                flops,
                inner_iterations: agent.inner_iters,
                hit_cap: false,
            })
        }
        SolverKind::DeterministicNewton => {
            let batch = full_batch(agent);
            let g = local_sto_gradient(agent, reg, &agent.x, &batch, hp)?;
            let h = local_subsampled_hessian(agent, &agent.x, &batch, hp);
            let dir = newton_direction(&h, &g).map_err(|err| wrap(err, 1))?;
            Ok(LocalOutcome {
                x_new: &agent.x - dir,
                flops: newton_iteration_flops(d, batch.len(), batch.len()),
                inner_iterations: 1,
                hit_cap: false,
            })
        }
        SolverKind::GradientDescent { step } => {
            let batch = full_batch(agent);
            let g = local_sto_gradient(agent, reg, &agent.x, &batch, hp)?;
            Ok(LocalOutcome {
                x_new: &agent.x - g * *step,
                flops: gradient_step_flops(d, batch.len()),
                inner_iterations: 1,
                hit_cap: false,
            })
        }
        SolverKind::Exact { tol } => {
            let batch = full_batch(agent);
            let mut x = agent.x.clone();
            let mut flops = 0.0;
            let mut steps = 0;
            let mut hit_cap = false;
            loop {
                let g = local_sto_gradient(agent, reg, &x, &batch, hp)?;
                if g.norm() <= *tol {
                    break;
                }
                if steps == EXACT_ITERATION_CAP {
                    hit_cap = true;
                    break;
                }
                let h = local_subsampled_hessian(agent, &x, &batch, hp);
                let dir = newton_direction(&h, &g).map_err(|err| wrap(err, steps + 1))?;
                x -= dir;
                steps += 1;
                flops += newton_iteration_flops(d, batch.len(), batch.len());
            }
            Ok(LocalOutcome {
                x_new: x,
                flops,
                inner_iterations: steps,
                hit_cap,
            })
        }
    }
}

/// Probe the per-step contraction of the full-batch Newton inner loop
/// toward the sub-problem fixed point, from the agent's current anchor.
/// Returns the worst squared per-step ratio over `steps` iterations, or
/// `None` when the anchor already sits at the fixed point. Reporting only.
pub fn estimate_contraction(
    agent: &AgentState,
    reg: Option<&RegularizerState>,
    hp: &HyperParams,
    steps: usize,
) -> Result<Option<f64>> {
    let batch = full_batch(agent);
    // Full-batch modes never touch the stream; any rng works here.
    let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let exact = run_local(agent, reg, &SolverKind::Exact { tol: 1e-12 }, hp, &mut unused)?;
    let target = exact.x_new;
    let mut x = agent.x.clone();
    let mut dist = (&x - &target).norm_squared();
    if dist <= 1e-28 {
        return Ok(None);
    }
    let mut worst: Option<f64> = None;
    for e in 1..=steps {
        let g = local_sto_gradient(agent, reg, &x, &batch, hp)?;
        let h = local_subsampled_hessian(agent, &x, &batch, hp);
        let dir = newton_direction(&h, &g).map_err(|err| match err {
            Error::NotPositiveDefinite => Error::LocalSolve {
                agent: agent.index,
                inner: e,
            },
            other => other,
        })?;
        x -= dir;
        let next = (&x - &target).norm_squared();
        if dist > 1e-28 {
            let ratio = next / dist;
            worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
        }
        dist = next;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_logistic, AgentShard};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    #[test]
    fn newton_direction_identity_and_scaling() {
        let g = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let dir = newton_direction(&DMatrix::identity(3, 3), &g).unwrap();
        assert_abs_diff_eq!(dir, g, epsilon = 1e-15);
        let dir = newton_direction(&(DMatrix::identity(3, 3) * 4.0), &g).unwrap();
        assert_abs_diff_eq!(dir, g / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn newton_direction_residuals_stay_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let h = random_spd(6, &mut rng);
            let g = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let dir = newton_direction(&h, &g).unwrap();
            assert!((&g - &h * dir).norm() <= SOLVE_RESIDUAL_TOL * g.norm());
        }
    }

    #[test]
    fn newton_direction_rejects_indefinite() {
        let mut h = DMatrix::identity(2, 2);
        h[(1, 1)] = -1.0;
        assert!(matches!(
            newton_direction(&h, &DVector::from_vec(vec![1.0, 1.0])),
            Err(Error::NotPositiveDefinite)
        ));
    }

    fn test_agent(seed: u64, d: usize, count: usize, inner_iters: usize) -> AgentState {
        let samples = synthesize_logistic(count, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let x = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
        AgentState {
            index: 0,
            x,
            phi: DVector::from_fn(d, |_, _| rng.random_range(-0.01..0.01)),
            neighbors: vec![1],
            neighbor_cache: BTreeMap::from([(
                1usize,
                DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5)),
            )]),
            shard: AgentShard {
                agent: 0,
                samples,
            },
            eps: 1e-4,
            inner_iters,
            participation: 1.0,
        }
    }

    #[test]
    fn full_batch_single_step_equals_deterministic() {
        let agent = test_agent(3, 4, 30, 1);
        let mut hp = HyperParams::uniform(2);
        hp.q = 1;
        hp.grad_batch = 30;
        hp.hess_batch = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sto = run_local(&agent, None, &SolverKind::StochasticNewton, &hp, &mut rng).unwrap();
        let det =
            run_local(&agent, None, &SolverKind::DeterministicNewton, &hp, &mut rng).unwrap();
        assert_eq!(sto.x_new, det.x_new);
        assert_eq!(sto.flops, det.flops);
    }

    #[test]
    fn more_inner_steps_approach_the_exact_minimizer() {
        let mut hp = HyperParams::uniform(2);
        hp.q = 1;
        hp.grad_batch = 40;
        hp.hess_batch = 40;
        let exact = {
            let agent = test_agent(5, 3, 40, 1);
            run_local(
                &agent,
                None,
                &SolverKind::Exact { tol: 1e-13 },
                &hp,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap()
            .x_new
        };
        let mut last = f64::INFINITY;
        for e in [1usize, 2, 4, 8] {
            let agent = test_agent(5, 3, 40, e);
            let out = run_local(
                &agent,
                None,
                &SolverKind::StochasticNewton,
                &hp,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            let dist = (&out.x_new - &exact).norm();
            assert!(
                dist <= last + 1e-15,
                "distance grew from {last} to {dist} at E={e}"
            );
            last = dist;
        }
        assert!(last <= 1e-10, "E=8 should essentially reach the fixed point");
    }

    #[test]
    fn benchmark_configuration_runs() {
        let agent = test_agent(7, 22, 400, 10);
        let mut hp = HyperParams::uniform(2);
        hp.q = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = run_local(&agent, None, &SolverKind::StochasticNewton, &hp, &mut rng).unwrap();
        assert!(out.x_new.iter().all(|v| v.is_finite()));
        assert_eq!(out.inner_iterations, 10);
    }

    #[test]
    fn exact_mode_meets_its_certificate() {
        let agent = test_agent(13, 4, 50, 1);
        let mut hp = HyperParams::uniform(2);
        hp.q = 1;
        hp.grad_batch = 50;
        hp.hess_batch = 50;
        let tol = 1e-9;
        let out = run_local(
            &agent,
            None,
            &SolverKind::Exact { tol },
            &hp,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(!out.hit_cap);
        let batch: Vec<usize> = (0..50).collect();
        let g = local_sto_gradient(&agent, None, &out.x_new, &batch, &hp).unwrap();
        assert!(g.norm() <= tol);
    }

    #[test]
    fn exact_mode_flags_the_iteration_cap() {
        let agent = test_agent(17, 4, 50, 1);
        let mut hp = HyperParams::uniform(2);
        hp.q = 1;
        let out = run_local(
            &agent,
            None,
            &SolverKind::Exact { tol: 0.0 },
            &hp,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(out.hit_cap);
        assert_eq!(out.inner_iterations, EXACT_ITERATION_CAP);
    }

    #[test]
    fn local_model_descends_under_full_batch_newton() {
        // Value of the anchored local model whose gradient the solver uses.
        let model_value = |agent: &AgentState, hp: &HyperParams, x: &DVector<f64>| -> f64 {
            let batch: Vec<usize> = (0..agent.shard.len()).collect();
            let (loss, _) =
                crate::objective::batch_value_grad(&agent.shard.samples, &batch, x, hp.ridge);
            let mut linear = agent.phi.clone();
            for &j in &agent.neighbors {
                linear.axpy(hp.mu_z / 2.0, &agent.x, 1.0);
                linear.axpy(-hp.mu_z / 2.0, &agent.neighbor_cache[&j], 1.0);
            }
            loss + linear.dot(x) + 0.5 * agent.eps * (x - &agent.x).norm_squared()
        };
        let mut hp = HyperParams::uniform(2);
        hp.q = 1;
        hp.grad_batch = 60;
        hp.hess_batch = 60;
        for seed in 20..30 {
            let agent = test_agent(seed, 4, 60, 6);
            let batch: Vec<usize> = (0..60).collect();
            let mut x = agent.x.clone();
            let mut value = model_value(&agent, &hp, &x);
            for _ in 0..6 {
                let g = local_sto_gradient(&agent, None, &x, &batch, &hp).unwrap();
                let h = local_subsampled_hessian(&agent, &x, &batch, &hp);
                x -= newton_direction(&h, &g).unwrap();
                let next = model_value(&agent, &hp, &x);
                assert!(
                    next <= value + 1e-12,
                    "local model increased from {value} to {next} (seed {seed})"
                );
                value = next;
            }
        }
    }

// temporary probe appended to solver tests

    #[test]
    fn probe_inner_iterates() {
        use crate::data::{partition, synthesize_logistic, PartitionStrategy};
        let samples = synthesize_logistic(4000, 22, 7);
        let shards = partition(samples, 10, PartitionStrategy::Shuffled(1)).unwrap();
        let mut hp = HyperParams::uniform(10);
        hp.q = 9;
        let agent = AgentState {
            index: 0,
            x: DVector::zeros(22),
            phi: DVector::zeros(22),
            neighbors: vec![1, 2],
            neighbor_cache: BTreeMap::from([
                (1usize, DVector::zeros(22)),
                (2usize, DVector::zeros(22)),
            ]),
            shard: shards[0].clone(),
            eps: 1e-4,
            inner_iters: 10,
            participation: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut x = agent.x.clone();
        for e in 1..=10 {
            let bg = crate::data::sample_batch(&agent.shard, 100, &mut rng).unwrap();
            let bh = crate::data::sample_batch(&agent.shard, 100, &mut rng).unwrap();
            let g = local_sto_gradient(&agent, None, &x, &bg, &hp).unwrap();
            let h = local_subsampled_hessian(&agent, &x, &bh, &hp);
            let eigs = h.clone().symmetric_eigen().eigenvalues;
            let min_eig = eigs.iter().copied().fold(f64::INFINITY, f64::min);
            let dir = newton_direction(&h, &g).unwrap();
            x -= &dir;
            println!(
                "e={e} |g|={:.4} min_eig(H)={:.6} |step|={:.3} |x|={:.3}",
                g.norm(), min_eig, dir.norm(), x.norm()
            );
        }
    }


    #[test]
    fn probe_round_growth() {
        use crate::data::{partition, synthesize_logistic, PartitionStrategy};
        use crate::graph::generate_erdos_renyi;
        use crate::protocol::{derive_stream, init_run, run_round, stream_id, RunStreams};
        let samples = synthesize_logistic(4000, 22, 7);
        let shards = partition(samples, 10, PartitionStrategy::Shuffled(1)).unwrap();
        let mut rng = derive_stream(1, stream_id::GRAPH);
        let topo = generate_erdos_renyi(10, 0.2, &mut rng).unwrap();
        let hp = HyperParams::uniform(10);
        let (mut agents, mut reg) = init_run(&topo, shards, &hp, None).unwrap();
        let mut streams = RunStreams::new(1, 10);
        for t in 0..60 {
            run_round(&mut agents, &mut reg, &topo, &hp, &SolverKind::StochasticNewton, &mut streams, t).unwrap();
            let max_x = agents.iter().map(|a| a.x.amax()).fold(0.0, f64::max);
            let max_phi = agents.iter().map(|a| a.phi.amax()).fold(0.0, f64::max);
            if t % 5 == 0 || t > 54 {
                println!("t={t} max|x|={max_x:.4e} max|phi|={max_phi:.4e} |lambda|={:.4e} |theta|={:.4e}",
                    reg.lambda.amax(), reg.theta.amax());
            }
        }
    }

    #[test]
    fn contraction_probe_reports_a_ratio_below_one() {
        let agent = test_agent(31, 4, 60, 1);
        let mut hp = HyperParams::uniform(2);
        hp.q = 1;
        hp.grad_batch = 60;
        hp.hess_batch = 60;
        let c = estimate_contraction(&agent, None, &hp, 4).unwrap().unwrap();
        assert!(c > 0.0 && c < 1.0, "contraction estimate {c}");
    }
}
