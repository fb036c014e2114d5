//! Theoretical convergence-rate calculator: the inexactness weights tau_i,
//! the rate gain eta, the optimized perturbation weights, and the per-round
//! contraction factor, all evaluated from empirical or user-supplied
//! constants.

use crate::data::AgentShard;
use crate::error::{Error, Result};
use crate::graph::{spectral_constants, Topology};
use crate::objective::batch_hessian;
use crate::protocol::{init_run, run_round, HyperParams, RunStreams};
use crate::solver::{estimate_contraction, SolverKind};

/// Everything the rate formulas consume. Strong convexity and smoothness
/// refer to the mini-batch losses; contraction entries are the per-agent
/// per-step estimates of the local Newton loop.
#[derive(Clone, Debug)]
pub struct RateConstants {
    pub strong_convexity: f64,
    pub smoothness: f64,
    pub contraction: Vec<f64>,
    pub xi: Vec<f64>,
    pub zeta: f64,
    pub mu_z: f64,
    pub mu_theta: f64,
    pub eps: Vec<f64>,
    pub inner_iters: Vec<usize>,
    pub sigma_plus_min: f64,
    pub sigma_lu_max: f64,
    pub max_degree: usize,
}

impl RateConstants {
    pub fn n(&self) -> usize {
        self.contraction.len()
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.n();
        if n == 0
            || self.xi.len() != n
            || self.eps.len() != n
            || self.inner_iters.len() != n
        {
            return Err(Error::InvalidArgument(
                "per-agent rate vectors must share one nonzero length".into(),
            ));
        }
        if !(self.strong_convexity > 0.0 && self.smoothness >= self.strong_convexity) {
            return Err(Error::RateCondition(format!(
                "need 0 < m_f <= M_f, got m_f={} M_f={}",
                self.strong_convexity, self.smoothness
            )));
        }
        for (i, &c) in self.contraction.iter().enumerate() {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::RateCondition(format!(
                    "contraction c_{i}={c} must lie in (0,1)"
                )));
            }
            let ceiling = 1.0 / c - 1.0;
            if !(self.xi[i] > 0.0 && self.xi[i] < ceiling) {
                return Err(Error::RateCondition(format!(
                    "xi_{i}={} must lie in (0, 1/c_{i} - 1) = (0, {ceiling})",
                    self.xi[i]
                )));
            }
        }
        Ok(())
    }

    /// Lower admissible bound for zeta: (m_f + M_f) / (2 m_f M_f).
    pub fn zeta_floor(&self) -> f64 {
        (self.strong_convexity + self.smoothness)
            / (2.0 * self.strong_convexity * self.smoothness)
    }
}

/// Gradient-Lipschitz bound of the perturbed local objectives:
/// `M = M_f + mu_z max_i |N_i| + mu_theta + max_i eps_i`.
pub fn lipschitz_bound(rc: &RateConstants) -> f64 {
    rc.smoothness
        + rc.mu_z * rc.max_degree as f64
        + rc.mu_theta
        + rc.eps.iter().copied().fold(0.0, f64::max)
}

/// Inexactness weight of one agent:
/// `tau = (1 + 1/xi) M^2 c^E / (1 - (1 + xi) c^E)`.
pub fn tau(c: f64, inner_iters: usize, xi: f64, m: f64) -> Result<f64> {
    let decay = c.powi(inner_iters as i32);
    let denom = 1.0 - (1.0 + xi) * decay;
    if denom <= 0.0 {
        return Err(Error::RateCondition(format!(
            "(1 + xi) c^E = {} >= 1 (c={c}, E={inner_iters}, xi={xi})",
            (1.0 + xi) * decay
        )));
    }
    Ok((1.0 + 1.0 / xi) * m * m * decay / denom)
}

pub fn taus(rc: &RateConstants) -> Result<Vec<f64>> {
    rc.check_shape()?;
    let m = lipschitz_bound(rc);
    (0..rc.n())
        .map(|i| tau(rc.contraction[i], rc.inner_iters[i], rc.xi[i], m))
        .collect()
}

fn warn_on_penalty_ratio(rc: &RateConstants) {
    if (rc.mu_z - 2.0 * rc.mu_theta).abs() > 1e-12 * rc.mu_theta.max(rc.mu_z) {
        log::warn!(
            "rate analysis assumes mu_z = 2 mu_theta; got mu_z={} mu_theta={}",
            rc.mu_z,
            rc.mu_theta
        );
    }
}

fn shared_terms(rc: &RateConstants) -> [f64; 3] {
    let msum = rc.strong_convexity + rc.smoothness;
    let t2_factor = 2.0 * rc.strong_convexity * rc.smoothness / msum - 1.0 / rc.zeta;
    let max_eps = rc.eps.iter().copied().fold(0.0, f64::max);
    [
        t2_factor / (max_eps + rc.mu_theta * (rc.sigma_lu_max + 2.0)),
        0.4 * rc.mu_theta * rc.sigma_plus_min / msum,
        rc.sigma_plus_min / (5.0 * rc.sigma_lu_max.max(1.0)),
    ]
}

/// Rate gain under explicit perturbation weights: the minimum of the five
/// admissibility terms, capped at 1/2. Errors name the violated condition.
pub fn eta(rc: &RateConstants) -> Result<f64> {
    rc.check_shape()?;
    warn_on_penalty_ratio(rc);
    let t = taus(rc)?;
    let floor = rc.zeta_floor();
    if rc.zeta <= floor {
        return Err(Error::RateCondition(format!(
            "zeta={} must exceed (m_f + M_f) / (2 m_f M_f) = {floor}",
            rc.zeta
        )));
    }
    let mut first = f64::INFINITY;
    for i in 0..rc.n() {
        if rc.eps[i] <= rc.zeta * t[i] {
            return Err(Error::RateCondition(format!(
                "eps_{i}={} must exceed zeta tau_{i} = {}",
                rc.eps[i],
                rc.zeta * t[i]
            )));
        }
        if rc.eps[i] <= t[i] * floor {
            return Err(Error::RateCondition(format!(
                "eps_{i}={} must exceed tau_{i} (m_f + M_f) / (2 m_f M_f) = {}",
                rc.eps[i],
                t[i] * floor
            )));
        }
        let term =
            rc.mu_theta * rc.sigma_plus_min * (rc.eps[i] - rc.zeta * t[i])
                / (5.0 * (t[i] + rc.eps[i] * rc.eps[i]));
        first = first.min(term);
    }
    let [t2, t3, t4] = shared_terms(rc);
    Ok(first.min(t2).min(t3).min(t4).min(0.5))
}

/// Optimal perturbation weight for one agent given its inexactness weight:
/// `eps = zeta tau + sqrt(zeta^2 tau^2 + tau)`.
pub fn epsilon_star(tau_i: f64, zeta: f64) -> f64 {
    zeta * tau_i + (zeta * zeta * tau_i * tau_i + tau_i).sqrt()
}

/// Rate gain when every eps_i is set by `epsilon_star`; the first term takes
/// its closed form and `rc.eps` is only used in the second term.
pub fn eta_tuned(rc: &RateConstants) -> Result<f64> {
    rc.check_shape()?;
    warn_on_penalty_ratio(rc);
    let t = taus(rc)?;
    let floor = rc.zeta_floor();
    if rc.zeta <= floor {
        return Err(Error::RateCondition(format!(
            "zeta={} must exceed (m_f + M_f) / (2 m_f M_f) = {floor}",
            rc.zeta
        )));
    }
    let mut first = f64::INFINITY;
    for &tau_i in &t {
        let denom = (tau_i * tau_i + tau_i / (rc.zeta * rc.zeta)).sqrt() + tau_i;
        first = first.min(rc.mu_theta * rc.sigma_plus_min / (10.0 * rc.zeta * denom));
    }
    let [t2, t3, t4] = shared_terms(rc);
    Ok(first.min(t2).min(t3).min(t4).min(0.5))
}

/// Expected per-round contraction factor `1 - eta p_min / (1 + eta)`.
pub fn contraction_factor(eta: f64, p_min: f64) -> f64 {
    1.0 - eta * p_min / (1.0 + eta)
}

/// Resolve the circular dependence between the optimized eps and the
/// Lipschitz bound (which contains max eps) by fixed-point iteration.
pub fn select_theorem_epsilons(rc: &RateConstants) -> Result<Vec<f64>> {
    rc.check_shape()?;
    if rc.zeta <= rc.zeta_floor() {
        return Err(Error::RateCondition(format!(
            "zeta={} must exceed (m_f + M_f) / (2 m_f M_f) = {}",
            rc.zeta,
            rc.zeta_floor()
        )));
    }
    let mut work = rc.clone();
    work.eps = vec![0.0; rc.n()];
    for _ in 0..200 {
        let t = taus(&work)?;
        let next: Vec<f64> = t.iter().map(|&ti| epsilon_star(ti, rc.zeta)).collect();
        let drift = next
            .iter()
            .zip(&work.eps)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        work.eps = next;
        if drift <= 1e-13 * (1.0 + work.eps.iter().copied().fold(0.0, f64::max)) {
            return Ok(work.eps);
        }
    }
    Err(Error::RateCondition(
        "optimized eps selection did not reach a fixed point".into(),
    ))
}

/// Estimate the full constant set from a problem instance: the smoothness
/// bound comes from the data (a quarter of the largest feature norm squared,
/// plus the ridge, which dominates every mini-batch Hessian), strong
/// convexity from the ridge or the smallest probed Hessian eigenvalue, and
/// the contraction from full-batch probe rounds.
pub fn estimate_rate_constants(
    topo: &Topology,
    shards: &[AgentShard],
    hp: &HyperParams,
    probe_rounds: usize,
) -> Result<RateConstants> {
    let n = topo.n();
    let smooth = hp.ridge
        + 0.25
            * shards
                .iter()
                .flat_map(|s| s.samples.iter())
                .map(|s| s.features.norm_squared())
                .fold(0.0, f64::max);
    let spectral = spectral_constants(topo, hp.q)?;

    let (mut agents, mut reg) = init_run(topo, shards.to_vec(), hp, None)?;
    let mut streams = RunStreams::new(hp.master_seed, n);
    let mut contraction = vec![0.0f64; n];
    let mut min_eig = f64::INFINITY;
    let mut sync_hp = hp.clone();
    sync_hp.participation = vec![1.0; n];
    for round in 0..probe_rounds.max(1) {
        for (i, agent) in agents.iter().enumerate() {
            let reg_opt = (i == reg.q).then_some(&reg);
            if let Some(c) = estimate_contraction(agent, reg_opt, hp, 3)? {
                contraction[i] = contraction[i].max(c);
            }
            if hp.ridge == 0.0 {
                let all: Vec<usize> = (0..agent.shard.len()).collect();
                let hess = batch_hessian(&agent.shard.samples, &all, &agent.x, 0.0);
                let eig = hess
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                min_eig = min_eig.min(eig);
            }
        }
        run_round(
            &mut agents,
            &mut reg,
            topo,
            &sync_hp,
            &SolverKind::DeterministicNewton,
            &mut streams,
            round,
        )?;
    }
    let m_f = if hp.ridge > 0.0 {
        hp.ridge
    } else {
        let floored = min_eig.max(1e-8);
        log::warn!(
            "ridge is zero: strong convexity is only estimated (smallest probed Hessian \
             eigenvalue {min_eig:.3e}, floored to {floored:.3e}); rate outputs are heuristic"
        );
        floored
    };
    for c in &mut contraction {
        // Agents that never moved report nothing; fall back to a mild value.
        if *c == 0.0 {
            *c = 0.5;
        }
        *c = c.clamp(1e-6, 0.999_999);
    }
    let xi: Vec<f64> = contraction.iter().map(|&c| (1.0 / c - 1.0) / 2.0).collect();
    let rc = RateConstants {
        strong_convexity: m_f,
        smoothness: smooth,
        contraction,
        xi,
        zeta: 0.0,
        mu_z: hp.mu_z,
        mu_theta: hp.mu_theta,
        eps: hp.eps.clone(),
        inner_iters: hp.inner_iters.clone(),
        sigma_plus_min: spectral.sigma_plus_min,
        sigma_lu_max: spectral.sigma_lu_max,
        max_degree: topo.max_degree(),
    };
    Ok(RateConstants {
        zeta: 2.0 * rc.zeta_floor(),
        ..rc
    })
}
