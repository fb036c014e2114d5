//! Round orchestration over the simulated network, plus the stacked
//! matrix-form reference runner used as an equivalence oracle.
//!
//! A global round is barrier-synchronized: every active agent runs its local
//! solver against the previous round's state, then all results are committed
//! and broadcast at once, then dual updates run. Merge order is fixed by
//! agent index so sequential execution is the behavioral contract.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::data::AgentShard;
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::objective::{batch_gradient, batch_hessian, prox_l1};
use crate::solver::{run_local, SolverKind};

/// Stream identifiers for the master-seed expansion. One master seed fans
/// out into disjoint ChaCha streams; mini-batch streams are separate from
/// the participation stream so the two processes stay independent.
pub mod stream_id {
    pub const GRAPH: u64 = 0;
    pub const PARTITION: u64 = 1;
    pub const PARTICIPATION: u64 = 2;
    pub const WORK_PROFILE: u64 = 3;
    /// Agent `i` samples mini-batches from stream `AGENT_BATCH_BASE + i`.
    pub const AGENT_BATCH_BASE: u64 = 8;
}

/// Expand a master seed into the named counter stream.
pub fn derive_stream(master_seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(id);
    rng
}

/// The RNG streams a run owns.
pub struct RunStreams {
    pub participation: ChaCha8Rng,
    pub batch: Vec<ChaCha8Rng>,
}

impl RunStreams {
    pub fn new(master_seed: u64, n: usize) -> Self {
        RunStreams {
            participation: derive_stream(master_seed, stream_id::PARTICIPATION),
            batch: (0..n)
                .map(|i| derive_stream(master_seed, stream_id::AGENT_BATCH_BASE + i as u64))
                .collect(),
        }
    }
}

/// Scalar knobs shared by every module.
#[derive(Clone, Debug)]
pub struct HyperParams {
    pub mu_z: f64,
    pub mu_theta: f64,
    /// L1 weight of the regularizer.
    pub gamma: f64,
    /// Optional per-sample L2 weight added to every local loss.
    pub ridge: f64,
    /// Per-agent proximal-perturbation weights.
    pub eps: Vec<f64>,
    /// Per-agent local work loads E_i.
    pub inner_iters: Vec<usize>,
    /// Per-agent participation probabilities.
    pub participation: Vec<f64>,
    pub grad_batch: usize,
    pub hess_batch: usize,
    /// Agent that owns the regularizer state.
    pub q: usize,
    pub master_seed: u64,
    pub rounds: usize,
}

impl HyperParams {
    /// Benchmark defaults: mu_theta = 2 mu_z = 1e-4, gamma = 2e-6,
    /// |b_g| = |b_H| = 100, E_i = 10, full participation.
    pub fn uniform(n: usize) -> Self {
        HyperParams {
            mu_z: 5e-5,
            mu_theta: 1e-4,
            gamma: 2e-6,
            ridge: 0.0,
            eps: vec![1e-4; n],
            inner_iters: vec![10; n],
            participation: vec![1.0; n],
            grad_batch: 100,
            hess_batch: 100,
            q: 0,
            master_seed: 1,
            rounds: 1000,
        }
    }

    pub fn p_min(&self) -> f64 {
        self.participation.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.mu_z <= 0.0 || self.mu_theta <= 0.0 {
            return fail(format!("penalty weights must be positive, got mu_z={} mu_theta={}", self.mu_z, self.mu_theta));
        }
        if self.gamma < 0.0 || self.ridge < 0.0 {
            return fail("gamma and ridge must be nonnegative".into());
        }
        if self.eps.len() != n || self.inner_iters.len() != n || self.participation.len() != n {
            return fail(format!("per-agent vectors must have length {n}"));
        }
        if self.eps.iter().any(|&e| e <= 0.0) {
            return fail("every eps_i must be positive".into());
        }
        if self.inner_iters.iter().any(|&e| e == 0) {
            return fail("every work load E_i must be at least 1".into());
        }
        if self.participation.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return fail("participation probabilities must lie in (0, 1]".into());
        }
        if self.grad_batch == 0 || self.hess_batch == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        if self.q >= n {
            return fail(format!("regularizer agent {} out of range for n={n}", self.q));
        }
        Ok(())
    }
}

/// Per-agent runtime state.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub index: usize,
    /// Primal iterate x_i (the current round anchor).
    pub x: DVector<f64>,
    /// Dual iterate phi_i.
    pub phi: DVector<f64>,
    /// Sorted neighbor list N_i.
    pub neighbors: Vec<usize>,
    /// Last value broadcast by each neighbor. Keys are exactly N_i.
    pub neighbor_cache: BTreeMap<usize, DVector<f64>>,
    pub shard: AgentShard,
    pub eps: f64,
    pub inner_iters: usize,
    pub participation: f64,
}

/// State kept by the single agent that owns the regularizer.
#[derive(Clone, Debug)]
pub struct RegularizerState {
    pub q: usize,
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu_theta: f64,
}

/// Initialize agents and the regularizer from an optional stacked start.
/// Duals start at zero and theta at the regularizer agent's block, which
/// realizes the zero-sum dual-pair initialization in distributed form.
pub fn init_run(
    topo: &Topology,
    shards: Vec<AgentShard>,
    hp: &HyperParams,
    x0: Option<&DVector<f64>>,
) -> Result<(Vec<AgentState>, RegularizerState)> {
    let n = topo.n();
    hp.validate(n)?;
    if shards.len() != n {
        return Err(Error::InvalidArgument(format!(
            "got {} shards for {n} agents",
            shards.len()
        )));
    }
    let d = shards
        .first()
        .and_then(|s| s.samples.first())
        .map(|s| s.features.len())
        .ok_or_else(|| Error::InvalidArgument("agent 0 has an empty shard".into()))?;
    for shard in &shards {
        if shard.is_empty() {
            return Err(Error::InvalidArgument(format!("agent {} has an empty shard", shard.agent)));
        }
        if shard.samples.iter().any(|s| s.features.len() != d) {
            return Err(Error::InvalidArgument("inconsistent feature dimensions".into()));
        }
    }
    if let Some(x0) = x0 {
        if x0.len() != n * d {
            return Err(Error::InvalidArgument(format!(
                "x0 has length {}, expected {}",
                x0.len(),
                n * d
            )));
        }
    }
    let block = |i: usize| -> DVector<f64> {
        match x0 {
            Some(x0) => x0.rows(i * d, d).into_owned(),
            None => DVector::zeros(d),
        }
    };
    let mut agents = Vec::with_capacity(n);
    for (i, shard) in shards.into_iter().enumerate() {
        let mut neighbor_cache = BTreeMap::new();
        for &j in topo.neighbors(i) {
            neighbor_cache.insert(j, block(j));
        }
        agents.push(AgentState {
            index: i,
            x: block(i),
            phi: DVector::zeros(d),
            neighbors: topo.neighbors(i).to_vec(),
            neighbor_cache,
            shard,
            eps: hp.eps[i],
            inner_iters: hp.inner_iters[i],
            participation: hp.participation[i],
        });
    }
    let reg = RegularizerState {
        q: hp.q,
        theta: block(hp.q),
        lambda: DVector::zeros(d),
        mu_theta: hp.mu_theta,
    };
    Ok((agents, reg))
}

/// Stack the agents' primal iterates into one vector.
pub fn stacked_x(agents: &[AgentState]) -> DVector<f64> {
    let d = agents[0].x.len();
    let mut out = DVector::zeros(agents.len() * d);
    for (i, a) in agents.iter().enumerate() {
        out.rows_mut(i * d, d).copy_from(&a.x);
    }
    out
}

pub fn stacked_phi(agents: &[AgentState]) -> DVector<f64> {
    let d = agents[0].phi.len();
    let mut out = DVector::zeros(agents.len() * d);
    for (i, a) in agents.iter().enumerate() {
        out.rows_mut(i * d, d).copy_from(&a.phi);
    }
    out
}

/// Independent Bernoulli(p_i) participation draw, one per agent per round.
pub fn sample_active<R: Rng>(hp: &HyperParams, rng: &mut R) -> Vec<usize> {
    hp.participation
        .iter()
        .enumerate()
        .filter(|&(_, &p)| rng.random::<f64>() < p)
        .map(|(i, _)| i)
        .collect()
}

/// What one round produced, before metrics enrichment.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub active: Vec<usize>,
    /// Cost-model units spent by each agent this round (zero if inactive).
    pub agent_flops: Vec<f64>,
    /// One d-vector per active agent (broadcast medium accounting).
    pub comm_broadcast_vectors: usize,
    /// Per-edge accounting alternative: one vector per active agent per neighbor.
    pub comm_edge_vectors: usize,
    /// Agents whose exact-mode inner loop hit the iteration cap.
    pub exact_cap_hits: usize,
}

/// Execute one global round: participation draw, local solves from the
/// round anchors, broadcast barrier, dual updates, and the regularizer
/// update when its owner is active. Inactive agents keep their state; their
/// neighbors use the cached (last broadcast) value in dual updates.
pub fn run_round(
    agents: &mut [AgentState],
    reg: &mut RegularizerState,
    topo: &Topology,
    hp: &HyperParams,
    kind: &SolverKind,
    streams: &mut RunStreams,
    round: usize,
) -> Result<RoundOutcome> {
    let n = agents.len();
    let active = sample_active(hp, &mut streams.participation);
    let mut agent_flops = vec![0.0; n];
    let mut exact_cap_hits = 0;

    // Primal phase: every active agent solves from the same round anchors.
    let mut updates = Vec::with_capacity(active.len());
    for &i in &active {
        let reg_opt = (i == reg.q).then_some(&*reg);
        let outcome = run_local(&agents[i], reg_opt, kind, hp, &mut streams.batch[i])
            .map_err(|e| e.at_round(round))?;
        updates.push((i, outcome));
    }

    // Commit at the barrier.
    for (i, outcome) in updates {
        agents[i].x = outcome.x_new;
        agent_flops[i] = outcome.flops;
        exact_cap_hits += usize::from(outcome.hit_cap);
    }

    // Broadcast: each active agent's new iterate lands in its neighbors' caches.
    let payloads: Vec<(usize, DVector<f64>)> =
        active.iter().map(|&i| (i, agents[i].x.clone())).collect();
    for (i, x) in payloads {
        for &j in topo.neighbors(i) {
            agents[j].neighbor_cache.insert(i, x.clone());
        }
    }

    // Dual phase for active agents.
    for &i in &active {
        let agent = &agents[i];
        let mut acc = DVector::zeros(agent.x.len());
        for &j in topo.neighbors(i) {
            let cached = agent
                .neighbor_cache
                .get(&j)
                .ok_or(Error::MissingNeighbor { agent: i, neighbor: j })
                .map_err(|e| e.at_round(round))?;
            acc += &agent.x - cached;
        }
        acc *= hp.mu_z / 2.0;
        agents[i].phi += acc;
    }

    // Regularizer updates run only when their owner participated.
    if active.contains(&reg.q) {
        let xq = &agents[reg.q].x;
        let u = xq + &reg.lambda / hp.mu_theta;
        let theta_new = prox_l1(&u, hp.gamma / hp.mu_theta).map_err(|e| e.at_round(round))?;
        reg.lambda += (xq - &theta_new) * hp.mu_theta;
        reg.theta = theta_new;
    }

    let comm_edge_vectors = active.iter().map(|&i| topo.degree(i)).sum();
    Ok(RoundOutcome {
        comm_broadcast_vectors: active.len(),
        comm_edge_vectors,
        active,
        agent_flops,
        exact_cap_hits,
    })
}

/// Snapshot of the stacked-form run.
#[derive(Clone, Debug)]
pub struct MatrixState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub alpha: DVector<f64>,
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl MatrixState {
    /// Dual vector in agent coordinates, derived from the edge dual.
    pub fn phi(&self, topo: &Topology) -> DVector<f64> {
        let d = self.theta.len();
        apply_hat(&topo.signed_incidence().transpose(), &self.alpha, d)
    }
}

/// Apply an `r x c` node/edge-level matrix to a stacked vector of `c`
/// d-dimensional blocks. This is the implicit Kronecker block extension.
pub fn apply_hat(hat: &DMatrix<f64>, v: &DVector<f64>, d: usize) -> DVector<f64> {
    let (r, c) = hat.shape();
    debug_assert_eq!(v.len(), c * d);
    let mut out = DVector::zeros(r * d);
    for k in 0..r {
        let mut block = out.rows_mut(k * d, d);
        for j in 0..c {
            let w = hat[(k, j)];
            if w != 0.0 {
                block.axpy(w, &v.rows(j * d, d), 1.0);
            }
        }
    }
    out
}

/// Surrogate tuning rule for the per-agent perturbation weights:
/// `eps_i = eps_bar * c^(E_i - E_bar) * (1 - (1+zeta) c^E_bar) / (1 - (1+zeta) c^E_i)`.
pub fn tune_epsilons(
    inner_iters: &[usize],
    eps_bar: f64,
    e_bar: usize,
    c: f64,
    zeta: f64,
) -> Result<Vec<f64>> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidArgument(format!("contraction c must lie in (0,1), got {c}")));
    }
    if eps_bar <= 0.0 || zeta <= 0.0 || e_bar == 0 {
        return Err(Error::InvalidArgument(
            "tuning needs eps_bar > 0, zeta > 0 and E_bar >= 1".into(),
        ));
    }
    let denom_at = |e: usize| 1.0 - (1.0 + zeta) * c.powi(e as i32);
    let ref_num = denom_at(e_bar);
    if ref_num <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "(1+zeta) c^E_bar >= 1 (E_bar={e_bar}); decrease zeta or increase the work load"
        )));
    }
    inner_iters
        .iter()
        .map(|&e| {
            let denom = denom_at(e);
            if denom <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "(1+zeta) c^E_i >= 1 for E_i={e}; decrease zeta or increase the work load"
                )));
            }
            Ok(eps_bar * c.powi(e as i32 - e_bar as i32) * ref_num / denom)
        })
        .collect()
}

fn block_norm(v: &DVector<f64>, i: usize, d: usize) -> f64 {
    v.rows(i * d, d).norm()
}

/// Run the stacked matrix-form updates for `rounds` global rounds and return
/// the trajectory (including the initial state). All agents participate;
/// mini-batch draws use the same per-agent streams as the distributed
/// runner, so shared-seed stochastic runs are comparable. The zero-sum dual
/// pair and the edge-average identity are re-derived and checked each round.
pub fn run_matrix_reference(
    topo: &Topology,
    shards: &[AgentShard],
    hp: &HyperParams,
    x0: Option<&DVector<f64>>,
    rounds: usize,
    kind: &SolverKind,
    streams: &mut RunStreams,
) -> Result<Vec<MatrixState>> {
    let n = topo.n();
    hp.validate(n)?;
    if shards.len() != n {
        return Err(Error::InvalidArgument(format!("got {} shards for {n} agents", shards.len())));
    }
    let d = shards[0]
        .samples
        .first()
        .map(|s| s.features.len())
        .ok_or_else(|| Error::InvalidArgument("agent 0 has an empty shard".into()))?;
    let nd = n * d;

    let e_s = topo.signed_incidence();
    let e_u = topo.unsigned_incidence();
    let a_src = topo.source_matrix();
    let a_dst = topo.destination_matrix();
    let l_s = topo.signed_laplacian();
    let deg = topo.degree_matrix();

    let mut x = match x0 {
        Some(x0) => {
            if x0.len() != nd {
                return Err(Error::InvalidArgument(format!(
                    "x0 has length {}, expected {nd}",
                    x0.len()
                )));
            }
            x0.clone()
        }
        None => DVector::zeros(nd),
    };
    let mut z = apply_hat(&e_u, &x, d) * 0.5;
    let mut alpha = DVector::zeros(topo.edge_count() * d);
    let mut beta = DVector::zeros(topo.edge_count() * d);
    let mut theta = x.rows(hp.q * d, d).into_owned();
    let mut lambda = DVector::zeros(d);

    let mut trajectory = Vec::with_capacity(rounds + 1);
    trajectory.push(MatrixState {
        x: x.clone(),
        z: z.clone(),
        alpha: alpha.clone(),
        theta: theta.clone(),
        lambda: lambda.clone(),
    });

    let full_batches: Vec<Vec<usize>> = shards.iter().map(|s| (0..s.len()).collect()).collect();

    for round in 0..rounds {
        let phi = apply_hat(&e_s.transpose(), &alpha, d);
        // Coupling terms frozen at the round anchor.
        let mut anchor = apply_hat(&l_s, &x, d) * (0.5 * hp.mu_z);
        anchor += &phi;
        {
            let mut qb = anchor.rows_mut(hp.q * d, d);
            qb += &lambda;
            qb.axpy(hp.mu_theta, &x.rows(hp.q * d, d), 1.0);
            qb.axpy(-hp.mu_theta, &theta, 1.0);
        }

        // bracket(x_e) = stacked loss gradient + anchor + eps-weighted pullback
        let bracket_at = |xe: &DVector<f64>,
                          batches: &[Option<&[usize]>]|
         -> DVector<f64> {
            let mut g = anchor.clone();
            for i in 0..n {
                let Some(batch) = batches[i] else { continue };
                let gi = batch_gradient(&shards[i].samples, batch, &xe.rows(i * d, d).into_owned(), hp.ridge);
                let mut block = g.rows_mut(i * d, d);
                block += &gi;
                block.axpy(hp.eps[i], &xe.rows(i * d, d), 1.0);
                block.axpy(-hp.eps[i], &x.rows(i * d, d), 1.0);
            }
            g
        };

        let solve_masked = |xe: &DVector<f64>,
                            bracket: &DVector<f64>,
                            hess_batches: &[Option<&[usize]>]|
         -> Result<DVector<f64>> {
            let mut hess = DMatrix::zeros(nd, nd);
            for i in 0..n {
                let mut block = hess.view_mut((i * d, i * d), (d, d));
                match hess_batches[i] {
                    Some(batch) => {
                        let hi = batch_hessian(&shards[i].samples, batch, &xe.rows(i * d, d).into_owned(), hp.ridge);
                        block.copy_from(&hi);
                        let shift = hp.mu_z * deg[(i, i)]
                            + if i == hp.q { hp.mu_theta } else { 0.0 }
                            + hp.eps[i];
                        for k in 0..d {
                            block[(k, k)] += shift;
                        }
                    }
                    None => {
                        for k in 0..d {
                            block[(k, k)] = 1.0;
                        }
                    }
                }
            }
            let chol = hess
                .cholesky()
                .ok_or(Error::NotPositiveDefinite)
                .map_err(|e| e.at_round(round))?;
            Ok(chol.solve(bracket))
        };

        let mut xe = x.clone();
        match kind {
            SolverKind::StochasticNewton | SolverKind::DeterministicNewton => {
                // Pre-draw every agent's batches in agent order so the
                // per-stream sequences match the distributed runner.
                let schedule: Vec<usize> = match kind {
                    SolverKind::StochasticNewton => hp.inner_iters.clone(),
                    _ => vec![1; n],
                };
                let mut drawn: Vec<Vec<(Vec<usize>, Vec<usize>)>> = Vec::with_capacity(n);
                for i in 0..n {
                    let mut per_agent = Vec::with_capacity(schedule[i]);
                    for _ in 0..schedule[i] {
                        let (bg, bh) = match kind {
                            SolverKind::StochasticNewton => (
                                draw_batch(&shards[i], hp.grad_batch, &mut streams.batch[i])?,
                                draw_batch(&shards[i], hp.hess_batch, &mut streams.batch[i])?,
                            ),
                            _ => (full_batches[i].clone(), full_batches[i].clone()),
                        };
                        per_agent.push((bg, bh));
                    }
                    drawn.push(per_agent);
                }
                let e_max = schedule.iter().copied().max().unwrap_or(1);
                for e in 1..=e_max {
                    let grad_batches: Vec<Option<&[usize]>> = (0..n)
                        .map(|i| (e <= schedule[i]).then(|| drawn[i][e - 1].0.as_slice()))
                        .collect();
                    let hess_batches: Vec<Option<&[usize]>> = (0..n)
                        .map(|i| (e <= schedule[i]).then(|| drawn[i][e - 1].1.as_slice()))
                        .collect();
                    let mut bracket = bracket_at(&xe, &grad_batches);
                    for i in 0..n {
                        if grad_batches[i].is_none() {
                            bracket.rows_mut(i * d, d).fill(0.0);
                        }
                    }
                    let dir = solve_masked(&xe, &bracket, &hess_batches)?;
                    xe -= dir;
                }
            }
            SolverKind::GradientDescent { step } => {
                let batches: Vec<Option<&[usize]>> =
                    (0..n).map(|i| Some(full_batches[i].as_slice())).collect();
                let bracket = bracket_at(&xe, &batches);
                xe.axpy(-step, &bracket, 1.0);
            }
            SolverKind::Exact { tol } => {
                let mut frozen = vec![false; n];
                for _ in 0..=crate::solver::EXACT_ITERATION_CAP {
                    let batches: Vec<Option<&[usize]>> = (0..n)
                        .map(|i| (!frozen[i]).then(|| full_batches[i].as_slice()))
                        .collect();
                    let mut bracket = bracket_at(&xe, &batches);
                    for i in 0..n {
                        if frozen[i] {
                            bracket.rows_mut(i * d, d).fill(0.0);
                        } else if block_norm(&bracket, i, d) <= *tol {
                            frozen[i] = true;
                            bracket.rows_mut(i * d, d).fill(0.0);
                        }
                    }
                    if frozen.iter().all(|&f| f) {
                        break;
                    }
                    let hess_batches: Vec<Option<&[usize]>> = (0..n)
                        .map(|i| (!frozen[i]).then(|| full_batches[i].as_slice()))
                        .collect();
                    let dir = solve_masked(&xe, &bracket, &hess_batches)?;
                    xe -= dir;
                }
            }
        }
        x = xe;

        // Regularizer, edge average, dual pair, and the scalar dual.
        let xq = x.rows(hp.q * d, d).into_owned();
        theta = prox_l1(&(&xq + &lambda / hp.mu_theta), hp.gamma / hp.mu_theta)
            .map_err(|e| e.at_round(round))?;
        let src_x = apply_hat(&a_src, &x, d);
        let dst_x = apply_hat(&a_dst, &x, d);
        z = (&src_x + &dst_x) * 0.5 + (&alpha + &beta) / (2.0 * hp.mu_z);
        let scale = 1.0f64.max(x.amax());
        let z_residual = (&z - apply_hat(&e_u, &x, d) * 0.5).amax();
        if z_residual > 1e-8 * scale {
            return Err(Error::InvariantViolation {
                round,
                what: "z - (1/2) E_u x".into(),
                value: z_residual,
            });
        }
        alpha += (&src_x - &z) * hp.mu_z;
        beta += (&dst_x - &z) * hp.mu_z;
        let pair_residual = (&alpha + &beta).amax();
        if pair_residual > 1e-8 * scale {
            return Err(Error::InvariantViolation {
                round,
                what: "alpha + beta".into(),
                value: pair_residual,
            });
        }
        lambda += (&xq - &theta) * hp.mu_theta;

        trajectory.push(MatrixState {
            x: x.clone(),
            z: z.clone(),
            alpha: alpha.clone(),
            theta: theta.clone(),
            lambda: lambda.clone(),
        });
    }
    Ok(trajectory)
}

fn draw_batch<R: Rng>(shard: &AgentShard, size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if size == shard.len() {
        Ok((0..size).collect())
    } else {
        crate::data::sample_batch(shard, size, rng)
    }
}
