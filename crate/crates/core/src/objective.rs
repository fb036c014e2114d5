//! Logistic loss with optional ridge, the augmented per-agent gradient and
//! sub-sampled Hessian used by the local solvers, and the L1 prox.
//!
//! The per-sample loss is the {0,1}-label cross entropy in the stable form
//! `log(1 + exp(-z)) + (1 - y) z` with `z = x . w`, evaluated through
//! `log1p` with a branch on the sign of `z`.

use nalgebra::{DMatrix, DVector};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::protocol::{AgentState, HyperParams, RegularizerState};

/// Smooth-loss knobs: L1 weight (used by the prox side) and the optional
/// ridge that makes each local loss strongly convex.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub gamma: f64,
    pub ridge: f64,
}

impl LossConfig {
    pub fn new(gamma: f64, ridge: f64) -> Result<Self> {
        if gamma < 0.0 || ridge < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be nonnegative, got gamma={gamma} ridge={ridge}"
            )));
        }
        Ok(LossConfig { gamma, ridge })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sample_loss(z: f64, y: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p() + (1.0 - y) * z
    } else {
        z.exp().ln_1p() - y * z
    }
}

/// Mini-batch average loss value and gradient (plus the ridge term).
pub(crate) fn batch_value_grad(
    samples: &[Sample],
    batch: &[usize],
    x: &DVector<f64>,
    ridge: f64,
) -> (f64, DVector<f64>) {
    let inv = 1.0 / batch.len() as f64;
    let mut value = 0.0;
    let mut grad = DVector::zeros(x.len());
    for &j in batch {
        let s = &samples[j];
        let z = s.features.dot(x);
        value += sample_loss(z, s.label);
        grad.axpy(sigmoid(z) - s.label, &s.features, 1.0);
    }
    value *= inv;
    grad *= inv;
    if ridge > 0.0 {
        value += 0.5 * ridge * x.norm_squared();
        grad.axpy(ridge, x, 1.0);
    }
    (value, grad)
}

pub(crate) fn batch_gradient(
    samples: &[Sample],
    batch: &[usize],
    x: &DVector<f64>,
    ridge: f64,
) -> DVector<f64> {
    batch_value_grad(samples, batch, x, ridge).1
}

/// Mini-batch average loss Hessian (plus the ridge term).
pub(crate) fn batch_hessian(
    samples: &[Sample],
    batch: &[usize],
    x: &DVector<f64>,
    ridge: f64,
) -> DMatrix<f64> {
    let d = x.len();
    let inv = 1.0 / batch.len() as f64;
    let mut hess = DMatrix::zeros(d, d);
    for &j in batch {
        let s = &samples[j];
        let sig = sigmoid(s.features.dot(x));
        hess.ger(inv * sig * (1.0 - sig), &s.features, &s.features, 1.0);
    }
    if ridge > 0.0 {
        for k in 0..d {
            hess[(k, k)] += ridge;
        }
    }
    hess
}

pub struct LossEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Mini-batch average of the per-sample loss with its gradient and Hessian.
pub fn logistic_value_grad_hess(
    samples: &[Sample],
    batch: &[usize],
    x: &DVector<f64>,
    cfg: &LossConfig,
) -> LossEval {
    let (value, grad) = batch_value_grad(samples, batch, x, cfg.ridge);
    let hess = batch_hessian(samples, batch, x, cfg.ridge);
    LossEval { value, grad, hess }
}

/// Stochastic gradient of the local sub-problem at the inner iterate. Every
/// coupling term is anchored at the round iterate `agent.x`; only the loss
/// and the perturbation pullback see `x_inner`. Pass `reg` exactly when the
/// agent owns the regularizer.
pub fn local_sto_gradient(
    agent: &AgentState,
    reg: Option<&RegularizerState>,
    x_inner: &DVector<f64>,
    batch_g: &[usize],
    hp: &HyperParams,
) -> Result<DVector<f64>> {
    let mut g = batch_gradient(&agent.shard.samples, batch_g, x_inner, hp.ridge);
    if let Some(reg) = reg {
        debug_assert_eq!(reg.q, agent.index);
        g.axpy(hp.mu_theta, &agent.x, 1.0);
        g.axpy(-hp.mu_theta, &reg.theta, 1.0);
        g += &reg.lambda;
    }
    g += &agent.phi;
    for &j in &agent.neighbors {
        let cached = agent.neighbor_cache.get(&j).ok_or(Error::MissingNeighbor {
            agent: agent.index,
            neighbor: j,
        })?;
        g.axpy(hp.mu_z / 2.0, &agent.x, 1.0);
        g.axpy(-hp.mu_z / 2.0, cached, 1.0);
    }
    g.axpy(agent.eps, x_inner, 1.0);
    g.axpy(-agent.eps, &agent.x, 1.0);
    Ok(g)
}

/// Sub-sampled Hessian of the local sub-problem: mini-batch loss Hessian
/// plus the diagonal shift `mu_z |N_i| + [i==q] mu_theta + eps_i`, which is
/// strictly positive, so the result is positive definite.
pub fn local_subsampled_hessian(
    agent: &AgentState,
    x_inner: &DVector<f64>,
    batch_h: &[usize],
    hp: &HyperParams,
) -> DMatrix<f64> {
    let mut hess = batch_hessian(&agent.shard.samples, batch_h, x_inner, hp.ridge);
    let shift = hp.mu_z * agent.neighbors.len() as f64
        + if agent.index == hp.q { hp.mu_theta } else { 0.0 }
        + agent.eps;
    for k in 0..x_inner.len() {
        hess[(k, k)] += shift;
    }
    hess
}

/// Coordinate-wise soft thresholding, the prox of `threshold * ||.||_1`.
pub fn prox_l1(u: &DVector<f64>, threshold: f64) -> Result<DVector<f64>> {
    if threshold < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "prox threshold must be nonnegative, got {threshold}"
        )));
    }
    Ok(u.map(|v| v.signum() * (v.abs() - threshold).max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_logistic, AgentShard};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5))
    }

    fn all_indices(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn value_and_gradient_at_zero() {
        let samples = synthesize_logistic(50, 4, 0);
        let x = DVector::zeros(4);
        let cfg = LossConfig::new(0.0, 0.0).unwrap();
        let eval = logistic_value_grad_hess(&samples, &all_indices(50), &x, &cfg);
        assert_abs_diff_eq!(eval.value, 2f64.ln(), epsilon = 1e-14);
        let mut expected = DVector::zeros(4);
        for s in &samples {
            expected.axpy(0.5 - s.label, &s.features, 1.0);
        }
        expected /= 50.0;
        assert_abs_diff_eq!(eval.grad, expected, epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let samples = synthesize_logistic(30, 5, 1);
        let cfg = LossConfig::new(0.0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = all_indices(30);
        for _ in 0..5 {
            let x = random_vec(5, &mut rng);
            let eval = logistic_value_grad_hess(&samples, &batch, &x, &cfg);
            let h = 1e-5;
            for k in 0..5 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fp = logistic_value_grad_hess(&samples, &batch, &xp, &cfg).value;
                let fm = logistic_value_grad_hess(&samples, &batch, &xm, &cfg).value;
                let fd = (fp - fm) / (2.0 * h);
                let scale = eval.grad[k].abs().max(1.0);
                assert!(
                    (fd - eval.grad[k]).abs() / scale <= 1e-6,
                    "coordinate {k}: fd={fd}, analytic={}",
                    eval.grad[k]
                );
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let samples = synthesize_logistic(25, 4, 3);
        let cfg = LossConfig::new(0.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = all_indices(25);
        for _ in 0..3 {
            let x = random_vec(4, &mut rng);
            let eval = logistic_value_grad_hess(&samples, &batch, &x, &cfg);
            let h = 1e-5;
            for k in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let gp = logistic_value_grad_hess(&samples, &batch, &xp, &cfg).grad;
                let gm = logistic_value_grad_hess(&samples, &batch, &xm, &cfg).grad;
                let fd = (gp - gm) / (2.0 * h);
                for l in 0..4 {
                    let scale = eval.hess[(l, k)].abs().max(1.0);
                    assert!((fd[l] - eval.hess[(l, k)]).abs() / scale <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn extreme_margins_do_not_overflow() {
        let samples = vec![
            Sample {
                features: DVector::from_vec(vec![1000.0]),
                label: 1.0,
            },
            Sample {
                features: DVector::from_vec(vec![-1000.0]),
                label: 0.0,
            },
        ];
        let cfg = LossConfig::new(0.0, 0.0).unwrap();
        let x = DVector::from_vec(vec![5.0]);
        let eval = logistic_value_grad_hess(&samples, &[0, 1], &x, &cfg);
        assert!(eval.value.is_finite());
        assert!(eval.grad[0].is_finite());
        assert!(eval.hess[(0, 0)].is_finite());
    }

    fn agent_with(
        d: usize,
        shard_samples: Vec<Sample>,
        x: DVector<f64>,
        phi: DVector<f64>,
        neighbors: Vec<(usize, DVector<f64>)>,
        eps: f64,
    ) -> AgentState {
        AgentState {
            index: 0,
            x,
            phi: if phi.len() == d { phi } else { DVector::zeros(d) },
            neighbors: neighbors.iter().map(|(j, _)| *j).collect(),
            neighbor_cache: neighbors.into_iter().collect::<BTreeMap<_, _>>(),
            shard: AgentShard {
                agent: 0,
                samples: shard_samples,
            },
            eps,
            inner_iters: 1,
            participation: 1.0,
        }
    }

    #[test]
    fn coupling_terms_vanish_in_the_trivial_configuration() {
        let d = 3;
        let samples = synthesize_logistic(20, d, 5);
        let hp = HyperParams::uniform(2);
        let x = DVector::from_vec(vec![0.4, -0.1, 0.2]);
        let agent = agent_with(
            d,
            samples.clone(),
            x.clone(),
            DVector::zeros(d),
            vec![(1, x.clone())],
            hp.eps[0],
        );
        let batch = all_indices(20);
        let g = local_sto_gradient(&agent, None, &x, &batch, &hp).unwrap();
        let plain = batch_gradient(&samples, &batch, &x, hp.ridge);
        assert_abs_diff_eq!(g, plain, epsilon = 1e-15);

        // Same for the regularizer owner when theta = x and lambda = 0.
        let reg = RegularizerState {
            q: 0,
            theta: x.clone(),
            lambda: DVector::zeros(d),
            mu_theta: hp.mu_theta,
        };
        let g = local_sto_gradient(&agent, Some(&reg), &x, &batch, &hp).unwrap();
        assert_abs_diff_eq!(g, plain, epsilon = 1e-15);
    }

    #[test]
    fn hessian_shift_on_zero_features() {
        let d = 2;
        let zero_samples: Vec<Sample> = (0..4)
            .map(|_| Sample {
                features: DVector::zeros(d),
                label: 1.0,
            })
            .collect();
        let mut hp = HyperParams::uniform(3);
        hp.mu_z = 0.3;
        hp.q = 1; // the probed agent is not the regularizer owner
        let agent = agent_with(
            d,
            zero_samples,
            DVector::zeros(d),
            DVector::zeros(d),
            vec![(1, DVector::zeros(d)), (2, DVector::zeros(d))],
            0.05,
        );
        let h = local_subsampled_hessian(&agent, &DVector::zeros(d), &[0, 1, 2, 3], &hp);
        let expected = DMatrix::identity(d, d) * (0.3 * 2.0 + 0.05);
        assert_abs_diff_eq!(h, expected, epsilon = 1e-15);
    }

    #[test]
    fn hessian_smallest_eigenvalue_dominates_shift() {
        let d = 4;
        let samples = synthesize_logistic(40, d, 6);
        let hp = HyperParams::uniform(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_vec(d, &mut rng);
        let agent = agent_with(
            d,
            samples,
            x.clone(),
            DVector::zeros(d),
            vec![(1, random_vec(d, &mut rng))],
            1e-4,
        );
        // hp.q defaults to 0, the probed agent's index, so the shift
        // includes the mu_theta term.
        let h = local_subsampled_hessian(&agent, &x, &all_indices(40), &hp);
        let min_eig = h
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let shift = hp.mu_z * 1.0 + hp.mu_theta + 1e-4;
        assert!(min_eig >= shift - 1e-12);
    }

    #[test]
    fn augmented_hessian_matches_gradient_differences() {
        // d/dx_inner of the augmented gradient is loss Hessian + (eps)I plus
        // the anchored-shift contributions only through the solve shift; the
        // finite difference must match the sub-sampled Hessian minus the
        // anchored couplings, i.e. loss Hessian + eps I.
        let d = 3;
        let samples = synthesize_logistic(30, d, 8);
        let mut hp = HyperParams::uniform(2);
        hp.ridge = 0.01;
        hp.q = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_anchor = random_vec(d, &mut rng);
        let agent = agent_with(
            d,
            samples,
            x_anchor,
            random_vec(d, &mut rng),
            vec![(1, random_vec(d, &mut rng))],
            0.2,
        );
        let batch = all_indices(30);
        let x = random_vec(d, &mut rng);
        let h_full = local_subsampled_hessian(&agent, &x, &batch, &hp);
        let anchored_shift = hp.mu_z * 1.0; // neighbor count 1, not the q agent
        let fd_step = 1e-5;
        for k in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += fd_step;
            xm[k] -= fd_step;
            let gp = local_sto_gradient(&agent, None, &xp, &batch, &hp).unwrap();
            let gm = local_sto_gradient(&agent, None, &xm, &batch, &hp).unwrap();
            let fd = (gp - gm) / (2.0 * fd_step);
            for l in 0..d {
                let analytic = h_full[(l, k)] - if l == k { anchored_shift } else { 0.0 };
                let scale = analytic.abs().max(1.0);
                assert!((fd[l] - analytic).abs() / scale <= 1e-5);
            }
        }
    }

    #[test]
    fn stochastic_gradient_is_unbiased_over_disjoint_batches() {
        let d = 3;
        let samples = synthesize_logistic(40, d, 10);
        let hp = HyperParams::uniform(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_anchor = random_vec(d, &mut rng);
        let agent = agent_with(
            d,
            samples,
            x_anchor.clone(),
            random_vec(d, &mut rng),
            vec![(1, random_vec(d, &mut rng))],
            3e-4,
        );
        let x_inner = random_vec(d, &mut rng);
        let mut avg = DVector::zeros(d);
        for b in 0..4 {
            let batch: Vec<usize> = (b * 10..(b + 1) * 10).collect();
            avg += local_sto_gradient(&agent, None, &x_inner, &batch, &hp).unwrap();
        }
        avg /= 4.0;
        let full = local_sto_gradient(&agent, None, &x_inner, &all_indices(40), &hp).unwrap();
        assert_abs_diff_eq!(avg, full, epsilon = 1e-12);
    }

    #[test]
    fn full_batch_gradient_is_monotone() {
        let samples = synthesize_logistic(60, 4, 12);
        let batch = all_indices(60);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let x = random_vec(4, &mut rng);
            let y = random_vec(4, &mut rng);
            let gx = batch_gradient(&samples, &batch, &x, 0.0);
            let gy = batch_gradient(&samples, &batch, &y, 0.0);
            assert!((x - y).dot(&(gx - gy)) >= -1e-12);
        }
    }

    #[test]
    fn hessian_eigenvalues_respect_the_smoothness_bound() {
        let samples = synthesize_logistic(60, 4, 14);
        let ridge = 0.02;
        let bound = ridge
            + 0.25
                * samples
                    .iter()
                    .map(|s| s.features.norm_squared())
                    .fold(0.0, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let batch = all_indices(60);
        for _ in 0..5 {
            let x = random_vec(4, &mut rng);
            let h = batch_hessian(&samples, &batch, &x, ridge);
            let eigs = h.symmetric_eigen().eigenvalues;
            for &e in eigs.iter() {
                assert!(e >= ridge - 1e-12 && e <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn prox_examples() {
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(prox_l1(&u, 0.0).unwrap(), u);

        // gamma = 2e-6, mu_theta = 1e-4 gives threshold 0.02.
        let u = DVector::from_vec(vec![3.0, -0.5, 0.02]);
        let out = prox_l1(&u, 2e-6 / 1e-4).unwrap();
        assert_abs_diff_eq!(out[0], 2.98, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], -0.48, epsilon = 1e-12);
        // 2e-6/1e-4 rounds a hair below 0.02, so the squeezed coordinate
        // survives only at the few-ulp level.
        assert!(out[2].abs() <= 1e-16);
        let exact = prox_l1(&u, 0.02).unwrap();
        assert_eq!(exact[2], 0.0);

        assert!(prox_l1(&u, -0.1).is_err());
    }

    #[test]
    fn prox_matches_scalar_grid_search() {
        // Brute-force argmin of gamma |t| + (mu/2)(t - u)^2 per coordinate.
        let gamma = 0.3;
        let mu = 0.7;
        let grid_min = |u: f64| {
            let mut best = (f64::INFINITY, 0.0);
            let mut t: f64 = -5.0;
            while t <= 5.0 {
                let obj = gamma * t.abs() + 0.5 * mu * (t - u) * (t - u);
                if obj < best.0 {
                    best = (obj, t);
                }
                t += 1e-4;
            }
            best.1
        };
        let u = DVector::from_vec(vec![1.3, -0.2, 0.41, -2.7]);
        let out = prox_l1(&u, gamma / mu).unwrap();
        for k in 0..4 {
            assert!((out[k] - grid_min(u[k])).abs() <= 2e-4);
        }
        // Subgradient optimality: mu (t - u) + gamma s = 0 with s in the
        // sign's subdifferential.
        for k in 0..4 {
            let t = out[k];
            let r = mu * (t - u[k]);
            if t != 0.0 {
                assert_abs_diff_eq!(r + gamma * t.signum(), 0.0, epsilon = 1e-12);
            } else {
                assert!(r.abs() <= gamma + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn prox_is_nonexpansive(
            u in proptest::collection::vec(-10.0f64..10.0, 4),
            v in proptest::collection::vec(-10.0f64..10.0, 4),
            threshold in 0.0f64..3.0,
        ) {
            let u = DVector::from_vec(u);
            let v = DVector::from_vec(v);
            let pu = prox_l1(&u, threshold).unwrap();
            let pv = prox_l1(&v, threshold).unwrap();
            prop_assert!((pu - pv).norm() <= (u - v).norm() + 1e-12);
        }
    }
}
