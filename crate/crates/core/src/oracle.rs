//! Model-based reference computations used to check learned controllers.
//!
//! Everything here reads the true model. Nothing in the learner depends on
//! this module.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{
    error_system_matrices, rollout_cost, simulate, CostWeights, IoHistory, MasModel, SwarmPolicy, SwarmState,
};
use crate::error::{Error, Result};
use crate::estimator::build_estimator;
use crate::linalg::{self, symmetrize};
use crate::qkernel::{DataPolicy, QKernel};

#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// `K = (R + FᵀPF)^{-1} FᵀPA`.
    pub gain: DMatrix<f64>,
    pub iterations: usize,
}

/// `(R + FᵀPF)^{-1} FᵀP`, the factor shared by the gain and the greedy law.
fn greedy_factor(f: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h = symmetrize(&(r + f.transpose() * p * f));
    let sv = h.singular_values();
    let condition = sv.max() / sv.min();
    if !(condition <= crate::qkernel::MAX_GAIN_CONDITION) {
        return Err(Error::SingularGain { condition });
    }
    let inv = h.try_inverse().ok_or(Error::SingularGain { condition })?;
    Ok(inv * f.transpose() * p)
}

fn check_lq(a: &DMatrix<f64>, f: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if !a.is_square() || f.nrows() != n || q.shape() != (n, n) || r.shape() != (f.ncols(), f.ncols()) {
        return Err(Error::dims("Riccati data", n, f.nrows()));
    }
    Ok(())
}

/// One step of value iteration on `V(e) = eᵀPe`:
/// `Q + AᵀPA − AᵀPF (R + FᵀPF)^{-1} FᵀPA`.
pub fn riccati_step(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let l = greedy_factor(f, r, p)?;
    let pa = p * a;
    Ok(symmetrize(&(q + a.transpose() * &pa - a.transpose() * p * f * l * a)))
}

/// Iterates [`riccati_step`] from `p0`. Returns every iterate, `p0` first.
pub fn riccati_value_iteration(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<DMatrix<f64>>> {
    check_lq(a, f, q, r)?;
    let mut trace = vec![p0.clone()];
    let mut delta = f64::INFINITY;
    for _ in 0..max_iter {
        let next = riccati_step(a, f, q, r, trace.last().unwrap())?;
        delta = (&next - trace.last().unwrap()).norm();
        trace.push(next);
        if delta <= tol {
            return Ok(trace);
        }
    }
    Err(Error::NotConverged {
        what: "Riccati value iteration",
        iterations: max_iter,
        delta,
    })
}

/// Stabilizing solution of the discrete algebraic Riccati equation by the
/// structure-preserving doubling algorithm.
pub fn dare_solve(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q_eff: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DareSolution> {
    check_lq(a, f, q_eff, r)?;
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::validation("R", "not invertible"))?;
    let mut ak = a.clone();
    let mut gk = f * r_inv * f.transpose();
    let mut hk = q_eff.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut delta = f64::INFINITY;
    for it in 1..=60 {
        let w = (&eye + &gk * &hk)
            .try_inverse()
            .ok_or(Error::NotConverged {
                what: "doubling Riccati solver",
                iterations: it,
                delta,
            })?;
        let aw = &ak * &w;
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w * &ak));
        let g_next = symmetrize(&(&gk + &aw * &gk * ak.transpose()));
        ak = aw * &ak;
        delta = (&h_next - &hk).norm();
        let scale = h_next.norm();
        hk = h_next;
        gk = g_next;
        if !scale.is_finite() || scale > 1e14 {
            break;
        }
        if delta <= 1e-13 * (1.0 + scale) {
            let gain = greedy_factor(f, r, &hk)? * a;
            return Ok(DareSolution {
                p: hk,
                gain,
                iterations: it,
            });
        }
    }
    Err(Error::NotConverged {
        what: "doubling Riccati solver",
        iterations: 60,
        delta,
    })
}

/// Frobenius residual of the Riccati equation at `p`.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    Ok((riccati_step(a, f, q, r, p)? - p).norm())
}

/// Per-agent value matrices `V_i(e) = eᵀP_i e` at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StateValueKernel {
    pub p: Vec<DMatrix<f64>>,
    pub iteration: usize,
}

/// Each agent's value update treats the neighbors' current controls as
/// exogenous (zero in the target), so `P_i` follows the Riccati recursion of
/// `(A, F_i, C_iᵀQ_ii C_i, R_ii)`. The learner uses the same update.
pub fn agent_lq_data(model: &MasModel, weights: &CostWeights, i: usize) -> Result<[DMatrix<f64>; 4]> {
    let sys = error_system_matrices(model, i)?;
    let c = model.c(i);
    Ok([
        model.a().clone(),
        sys.f,
        c.transpose() * weights.q(i) * c,
        weights.r_self(i).clone(),
    ])
}

#[derive(Debug, Clone)]
pub struct ModelVi {
    /// Iterates from `P_i^0 = 0`.
    pub trace: Vec<StateValueKernel>,
    pub policy: StatePolicy,
}

impl ModelVi {
    pub fn final_kernel(&self) -> &StateValueKernel {
        self.trace.last().expect("non-empty trace")
    }
}

/// Simultaneous value iteration for all agents from zero kernels.
pub fn model_based_vi(model: &MasModel, weights: &CostWeights, max_iter: usize, tol: f64) -> Result<ModelVi> {
    let agents = model.agent_count();
    let data: Vec<[DMatrix<f64>; 4]> = (0..agents)
        .map(|i| agent_lq_data(model, weights, i))
        .collect::<Result<_>>()?;
    let n = model.state_dim();
    let mut trace = vec![StateValueKernel {
        p: vec![DMatrix::zeros(n, n); agents],
        iteration: 0,
    }];
    let mut delta = f64::INFINITY;
    for s in 1..=max_iter {
        let prev = &trace.last().unwrap().p;
        let next: Vec<DMatrix<f64>> = data
            .iter()
            .zip(prev)
            .map(|([a, f, q, r], p)| riccati_step(a, f, q, r, p))
            .collect::<Result<_>>()?;
        delta = next.iter().zip(prev).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        trace.push(StateValueKernel { p: next, iteration: s });
        if delta <= tol {
            let policy = StatePolicy::greedy(model, weights, &trace.last().unwrap().p)?;
            return Ok(ModelVi { trace, policy });
        }
    }
    Err(Error::NotConverged {
        what: "model-based value iteration",
        iterations: max_iter,
        delta,
    })
}

/// `P̄ = TᵀPT`: the window kernel representing `eᵀPe` through the estimator.
pub fn lifted_kernel(model: &MasModel, i: usize, horizon: usize, p: &DMatrix<f64>) -> Result<QKernel> {
    let t = build_estimator(model, i, horizon)?.lift();
    let layout = crate::qkernel::KernelLayout::for_agent(model, i, horizon)?;
    QKernel::from_matrix(layout, &(t.transpose() * p * t))
}

/// `u_i = −L_i (A e_i + Σ_j E_ij u_j)` evaluated on the true errors, with the
/// neighbors' current controls resolved jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePolicy {
    /// `L_i = (R_ii + F_iᵀP_iF_i)^{-1} F_iᵀP_i`.
    pub factors: Vec<DMatrix<f64>>,
}

impl StatePolicy {
    pub fn greedy(model: &MasModel, weights: &CostWeights, p: &[DMatrix<f64>]) -> Result<Self> {
        let factors = (0..model.agent_count())
            .map(|i| {
                let sys = error_system_matrices(model, i)?;
                greedy_factor(&sys.f, weights.r_self(i), &p[i])
            })
            .collect::<Result<_>>()?;
        Ok(Self { factors })
    }
}

impl SwarmPolicy for StatePolicy {
    fn controls(&self, model: &MasModel, history: &IoHistory) -> Result<Vec<DVector<f64>>> {
        let k = history.current_step().ok_or_else(|| Error::dims("measured steps", 1, 0))?;
        let errors = history.errors_at(k);
        let agents = model.agent_count();
        let dims: Vec<usize> = (0..agents).map(|i| model.input_dim(i)).collect();
        let offsets: Vec<usize> = dims.iter().scan(0, |acc, m| {
            let o = *acc;
            *acc += m;
            Some(o)
        }).collect();
        let total: usize = dims.iter().sum();
        let mut system = DMatrix::identity(total, total);
        let mut rhs = DVector::zeros(total);
        for i in 0..agents {
            let sys = error_system_matrices(model, i)?;
            let l = &self.factors[i];
            rhs.rows_mut(offsets[i], dims[i]).copy_from(&(-(l * model.a() * &errors[i])));
            for (j, e_ij) in &sys.e {
                let mut blk = system.view_mut((offsets[i], offsets[*j]), (dims[i], dims[*j]));
                blk += l * e_ij;
            }
        }
        let u = system.lu().solve(&rhs).ok_or(Error::SingularCoupling)?;
        Ok((0..agents).map(|i| u.rows(offsets[i], dims[i]).clone_owned()).collect())
    }
}

/// Hypotheses of the value-iteration bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheckConfig {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichReport {
    pub holds: bool,
    /// Smallest `V^s − lower` over iterations and states.
    pub worst_lower_margin: f64,
    /// Smallest `upper − V^s`.
    pub worst_upper_margin: f64,
    /// Largest `|V^last − J*|`.
    pub final_gap: f64,
    pub iterations: usize,
}

pub const SANDWICH_SLACK: f64 = 1e-8;

fn quad(p: &DMatrix<f64>, e: &DVector<f64>) -> f64 {
    (e.transpose() * p * e)[(0, 0)]
}

/// Checks `(1 + (α−1)/(1+1/θ)^s) J* ≤ V^s ≤ (1 + (β−1)/(1+1/θ)^s) J*` on every
/// test state and iterate of `trace` (`trace[s]` is `V^s`).
pub fn check_value_bounds(
    trace: &[DMatrix<f64>],
    j_star: &DMatrix<f64>,
    cfg: BoundCheckConfig,
    states: &[DVector<f64>],
) -> Result<SandwichReport> {
    if !(cfg.theta > 0.0 && cfg.theta.is_finite()) {
        return Err(Error::HypothesisViolated(format!("theta = {} is not in (0, inf)", cfg.theta)));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) || !(cfg.beta >= 1.0 && cfg.beta.is_finite()) {
        return Err(Error::HypothesisViolated("need 0 <= alpha <= 1 <= beta".into()));
    }
    let v0 = trace.first().ok_or_else(|| Error::HypothesisViolated("empty trace".into()))?;
    for e in states {
        let j = quad(j_star, e);
        let v = quad(v0, e);
        if v < cfg.alpha * j - SANDWICH_SLACK || v > cfg.beta * j + SANDWICH_SLACK {
            return Err(Error::HypothesisViolated(
                "initial value is not within [alpha J*, beta J*]".into(),
            ));
        }
    }
    let ratio = 1.0 + 1.0 / cfg.theta;
    let mut lower_margin = f64::INFINITY;
    let mut upper_margin = f64::INFINITY;
    for (s, p) in trace.iter().enumerate() {
        let shrink = ratio.powi(s as i32);
        for e in states {
            let j = quad(j_star, e);
            let v = quad(p, e);
            lower_margin = lower_margin.min(v - (1.0 + (cfg.alpha - 1.0) / shrink) * j);
            upper_margin = upper_margin.min((1.0 + (cfg.beta - 1.0) / shrink) * j - v);
        }
    }
    let last = trace.last().unwrap();
    let final_gap = states
        .iter()
        .map(|e| (quad(last, e) - quad(j_star, e)).abs())
        .fold(0.0, f64::max);
    Ok(SandwichReport {
        holds: lower_margin >= -SANDWICH_SLACK && upper_margin >= -SANDWICH_SLACK,
        worst_lower_margin: lower_margin,
        worst_upper_margin: upper_margin,
        final_gap,
        iterations: trace.len() - 1,
    })
}

/// Largest sampled `J*(Ae + Fu) / (eᵀQe + uᵀRu)` over random directions
/// `(e, u)`. Fails when the stage cost degenerates on the sample set.
pub fn estimate_theta(
    lq: &[DMatrix<f64>; 4],
    j_star: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let [a, f, q, r] = lq;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (a.nrows(), f.ncols());
    let mut theta: f64 = 0.0;
    for _ in 0..samples {
        let z: DVector<f64> = DVector::from_fn(n + m, |_, _| rng.random_range(-1.0..1.0));
        let z = &z / z.norm();
        let e = z.rows(0, n).clone_owned();
        let u = z.rows(n, m).clone_owned();
        let stage = quad(q, &e) + quad(r, &u);
        if stage <= 1e-12 {
            return Err(Error::HypothesisViolated("stage cost vanishes on a sample".into()));
        }
        let next: DVector<f64> = a * &e + f * &u;
        theta = theta.max(quad(j_star, &next) / stage);
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::HypothesisViolated(format!("estimated theta = {theta}")));
    }
    Ok(theta)
}

/// The closed loop of a linear swarm law written on
/// `ξ(k) = [e(k-L) for all agents, u(k-1), ..., u(k-L)]`, where each
/// `u(·)` stacks all agents. `L = max(N-1, 1)` is the smallest lag for which
/// `ξ` determines the law's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRealization {
    pub transition: DMatrix<f64>,
    /// `u(k) = control_map · ξ(k)`.
    pub control_map: DMatrix<f64>,
    pub lag: usize,
}

pub fn closed_loop_realization<P: SwarmPolicy + ?Sized>(
    model: &MasModel,
    policy: &P,
    horizon: usize,
) -> Result<ClosedLoopRealization> {
    let lag = horizon.saturating_sub(1).max(1);
    let agents = model.agent_count();
    let n = model.state_dim();
    let dims: Vec<usize> = (0..agents).map(|i| model.input_dim(i)).collect();
    let mu: usize = dims.iter().sum();
    let dim = agents * n + lag * mu;
    let systems = (0..agents)
        .map(|i| error_system_matrices(model, i))
        .collect::<Result<Vec<_>>>()?;
    let split = |v: &DVector<f64>| -> Vec<DVector<f64>> {
        let mut off = 0;
        dims.iter()
            .map(|&m| {
                let out = v.rows(off, m).clone_owned();
                off += m;
                out
            })
            .collect()
    };
    let mut transition = DMatrix::zeros(dim, dim);
    let mut control_map = DMatrix::zeros(mu, dim);
    for col in 0..dim {
        let mut xi = DVector::zeros(dim);
        xi[col] = 1.0;
        let mut errors: Vec<DVector<f64>> = (0..agents).map(|i| xi.rows(i * n, n).clone_owned()).collect();
        // Oldest control first.
        let controls: Vec<Vec<DVector<f64>>> = (0..lag)
            .rev()
            .map(|b| split(&xi.rows(agents * n + b * mu, mu).clone_owned()))
            .collect();
        let mut history = IoHistory::new();
        let mut first_next = None;
        for u in &controls {
            let outputs = errors.iter().enumerate().map(|(i, e)| model.c(i) * e).collect();
            history.push_measurement(errors.clone(), outputs);
            history.push_controls(u.clone());
            errors = (0..agents)
                .map(|i| {
                    let mut e = model.a() * &errors[i] + &systems[i].f * &u[i];
                    for (j, eij) in &systems[i].e {
                        e += eij * &u[*j];
                    }
                    e
                })
                .collect();
            if first_next.is_none() {
                first_next = Some(errors.clone());
            }
        }
        let outputs = errors.iter().enumerate().map(|(i, e)| model.c(i) * e).collect();
        history.push_measurement(errors, outputs);
        let u_now = linalg::concat(&policy.controls(model, &history)?.iter().collect::<Vec<_>>());
        control_map.set_column(col, &u_now);
        let e_next = first_next.expect("lag >= 1");
        let mut next = DVector::zeros(dim);
        for (i, e) in e_next.iter().enumerate() {
            next.rows_mut(i * n, n).copy_from(e);
        }
        next.rows_mut(agents * n, mu).copy_from(&u_now);
        for b in 1..lag {
            let src = xi.rows(agents * n + (b - 1) * mu, mu).clone_owned();
            next.rows_mut(agents * n + b * mu, mu).copy_from(&src);
        }
        transition.set_column(col, &next);
    }
    Ok(ClosedLoopRealization {
        transition,
        control_map,
        lag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub spectral_radius: f64,
    pub spectral_stable: bool,
    pub monte_carlo_stable: bool,
    /// Largest `‖e(T)‖ / ‖e(0)‖` over trials, stacked over agents.
    pub worst_decay_ratio: f64,
    pub trials: usize,
    pub horizon: usize,
}

impl StabilityReport {
    pub fn agree(&self) -> bool {
        self.spectral_stable == self.monte_carlo_stable
    }

    pub fn stable(&self) -> bool {
        self.spectral_stable && self.monte_carlo_stable
    }
}

pub const DECAY_RATIO: f64 = 1e-6;

fn stacked_error_norm(errors: &[DVector<f64>]) -> f64 {
    errors.iter().map(|e| e.norm_squared()).sum::<f64>().sqrt()
}

/// Random initial states uniform on `[-1, 1]` per coordinate.
pub fn random_states(model: &MasModel, count: usize, seed: u64) -> Vec<SwarmState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.state_dim();
    (0..count)
        .map(|_| {
            let mut v = || DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let followers = (0..model.agent_count()).map(|_| v()).collect();
            SwarmState::new(followers, v())
        })
        .collect()
}

/// Spectral radius of [`closed_loop_realization`] together with a
/// Monte-Carlo decay test from random initial states.
pub fn check_stability<P: SwarmPolicy + ?Sized>(
    model: &MasModel,
    policy: &P,
    horizon: usize,
    trials: usize,
    sim_horizon: usize,
    seed: u64,
) -> Result<StabilityReport> {
    let realization = closed_loop_realization(model, policy, horizon)?;
    let spectral_radius = linalg::spectral_radius(&realization.transition);
    let mut worst: f64 = 0.0;
    for init in random_states(model, trials, seed) {
        let run = simulate(model, &init, sim_horizon + 1, policy, |_, _| {})?;
        if run.diverged() {
            worst = f64::INFINITY;
            continue;
        }
        let h = &run.history;
        let start = stacked_error_norm(h.errors_at(0));
        let end = stacked_error_norm(h.errors_at(sim_horizon));
        if start > 0.0 {
            worst = worst.max(end / start);
        }
    }
    Ok(StabilityReport {
        spectral_radius,
        spectral_stable: spectral_radius < 1.0,
        monte_carlo_stable: worst <= DECAY_RATIO,
        worst_decay_ratio: worst,
        trials,
        horizon: sim_horizon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NashConfig {
    pub draws: usize,
    pub initial_states: usize,
    pub horizon: usize,
    /// Entries are scaled by a factor uniform on `[1 - spread, 1 + spread]`.
    pub spread: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for NashConfig {
    fn default() -> Self {
        Self {
            draws: 50,
            initial_states: 20,
            horizon: 500,
            spread: 0.1,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NashReport {
    pub agent: usize,
    pub passed: bool,
    /// Largest `(J_i − J_i') / (1 + J_i)` over perturbations and initial
    /// states; positive values are improvements by the deviating agent.
    pub worst_relative_decrease: f64,
    /// Mean unperturbed truncated cost over the initial states.
    pub mean_cost: f64,
    /// Perturbed loops that diverged (cost taken as infinite).
    pub unstable_perturbations: usize,
    /// Largest final-step stage cost of the unperturbed runs.
    pub truncation_tail: f64,
}

/// Local unilateral-deviation test of agent `i` around `policy`.
pub fn check_nash(
    model: &MasModel,
    weights: &CostWeights,
    policy: &DataPolicy,
    i: usize,
    cfg: &NashConfig,
) -> Result<NashReport> {
    model.check_agent(i)?;
    let inits = random_states(model, cfg.initial_states, cfg.seed);
    let mut base = Vec::with_capacity(inits.len());
    let mut tail: f64 = 0.0;
    for init in &inits {
        let c = rollout_cost(model, weights, policy, init, cfg.horizon, i)?;
        tail = tail.max(c.last_stage);
        base.push(c.value);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15 ^ i as u64));
    let mut worst = f64::NEG_INFINITY;
    let mut unstable = 0;
    for _ in 0..cfg.draws {
        let mut perturbed = policy.clone();
        perturbed.gains[i] = policy.gains[i].perturbed(|| 1.0 + rng.random_range(-cfg.spread..=cfg.spread));
        let mut diverged = false;
        for (init, j0) in inits.iter().zip(&base) {
            let j = rollout_cost(model, weights, &perturbed, init, cfg.horizon, i)?.value;
            if !j.is_finite() {
                diverged = true;
                continue;
            }
            worst = worst.max((j0 - j) / (1.0 + j0));
        }
        unstable += usize::from(diverged);
    }
    let mean_cost = base.iter().sum::<f64>() / base.len().max(1) as f64;
    Ok(NashReport {
        agent: i,
        passed: worst <= cfg.tolerance,
        worst_relative_decrease: worst,
        mean_cost,
        unstable_perturbations: unstable,
        truncation_tail: tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ZeroPolicy;
    use crate::graph::Digraph;
    use crate::testutil::*;
    use proptest::{prop_assert, proptest};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// Plain fixed-point iteration of the scalar Riccati map.
    fn scalar_fixed_point(a: f64, f: f64, q: f64, r: f64) -> f64 {
        let mut p = 0.0;
        for _ in 0..10_000 {
            p = q + a * a * p - a * a * p * p * f * f / (r + f * f * p);
        }
        p
    }

    #[test]
    fn dare_examples() {
        let a = DMatrix::zeros(2, 2);
        let f = col(&[1.0, 0.5]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
        let sol = dare_solve(&a, &f, &q, &scalar(1.0)).unwrap();
        assert!((&sol.p - &q).amax() < 1e-12);

        let sol = dare_solve(&scalar(0.5), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        let p = scalar_fixed_point(0.5, 1.0, 1.0, 1.0);
        assert!((sol.p[(0, 0)] - p).abs() < 1e-12);
        let k = p * 0.5 / (1.0 + p);
        assert!((sol.gain[(0, 0)] - k).abs() < 1e-12);

        // F = 0 with a stable drift: the Lyapunov series.
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.0, -0.3]);
        let q = DMatrix::identity(2, 2);
        let sol = dare_solve(&a, &DMatrix::zeros(2, 1), &q, &scalar(1.0)).unwrap();
        let mut series = DMatrix::zeros(2, 2);
        let mut ak = DMatrix::identity(2, 2);
        for _ in 0..200 {
            series += ak.transpose() * &q * &ak;
            ak = &a * ak;
        }
        assert!((sol.p - series).amax() < 1e-10);

        assert!(matches!(
            dare_solve(&scalar(2.0), &scalar(0.0), &scalar(1.0), &scalar(1.0)),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn dare_residual_on_demo_agents() {
        let m = demo_model();
        let w = demo_weights(&m);
        for i in 0..3 {
            let [a, f, q, r] = agent_lq_data(&m, &w, i).unwrap();
            let sol = dare_solve(&a, &f, &q, &r).unwrap();
            assert!(riccati_residual(&a, &f, &q, &r, &sol.p).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn model_vi_examples() {
        let (m, w) = scalar_system();
        let vi = model_based_vi(&m, &w, 500, 1e-13).unwrap();
        let sol = dare_solve(&scalar(0.5), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert!((&vi.final_kernel().p[0] - sol.p).amax() < 1e-8);

        let zero_q = riccati_value_iteration(&scalar(0.5), &scalar(1.0), &scalar(0.0), &scalar(1.0), &scalar(0.0), 20, 0.0);
        // Never leaves zero, so it "converges" at the first step.
        assert_eq!(zero_q.unwrap().last().unwrap()[(0, 0)], 0.0);

        let (m, w) = crate::presets::single_follower_demo();
        let vi = model_based_vi(&m, &w, 1000, 1e-12).unwrap();
        let [a, f, q, r] = agent_lq_data(&m, &w, 0).unwrap();
        let sol = dare_solve(&a, &f, &q, &r).unwrap();
        assert!((&vi.final_kernel().p[0] - sol.p).amax() < 1e-8);
    }

    #[test]
    fn vi_from_zero_is_monotone() {
        let (m, w) = crate::presets::single_follower_demo();
        let vi = model_based_vi(&m, &w, 1000, 1e-12).unwrap();
        let star = &vi.final_kernel().p[0];
        for pair in vi.trace.windows(2) {
            let diff = &pair[1].p[0] - &pair[0].p[0];
            assert!(diff.symmetric_eigenvalues().min() >= -1e-9);
            let gap = star - &pair[1].p[0];
            assert!(gap.symmetric_eigenvalues().min() >= -1e-9);
        }
    }

    #[test]
    fn sandwich_examples() {
        let lq = [scalar(0.5), scalar(1.0), scalar(1.0), scalar(1.0)];
        let star = dare_solve(&lq[0], &lq[1], &lq[2], &lq[3]).unwrap().p;
        let trace = riccati_value_iteration(&lq[0], &lq[1], &lq[2], &lq[3], &scalar(0.0), 200, 1e-14).unwrap();
        let theta = estimate_theta(&lq, &star, 20_000, 1).unwrap();
        let exact = star[(0, 0)] * (0.25 + 1.0);
        assert!(theta <= exact && theta > 0.999 * exact);
        let states: Vec<DVector<f64>> = (-5..=5).map(|v| DVector::from_element(1, v as f64 * 0.4)).collect();
        let cfg = BoundCheckConfig { theta, alpha: 0.0, beta: 1.0 };
        let rep = check_value_bounds(&trace, &star, cfg, &states).unwrap();
        assert!(rep.holds, "{rep:?}");
        assert!(rep.final_gap <= 1e-6);

        // Starting at the fixed point stays there.
        let fixed = riccati_value_iteration(&lq[0], &lq[1], &lq[2], &lq[3], &star, 10, 1e-12).unwrap();
        let cfg = BoundCheckConfig { theta, alpha: 1.0, beta: 1.0 };
        let rep = check_value_bounds(&fixed, &star, cfg, &states).unwrap();
        assert!(rep.holds && rep.final_gap < 1e-12);

        let bad = BoundCheckConfig { theta, alpha: 0.5, beta: 1.0 };
        assert!(matches!(
            check_value_bounds(&trace, &star, bad, &states),
            Err(Error::HypothesisViolated(_))
        ));
    }

    #[test]
    fn stability_examples() {
        let g = Digraph::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0])).unwrap();
        let zero_a = MasModel::new(DMatrix::zeros(2, 2), vec![col(&[1.0, 0.0])], vec![DMatrix::identity(2, 2)], g).unwrap();
        let rep = check_stability(&zero_a, &ZeroPolicy, 2, 5, 50, 1).unwrap();
        assert!(rep.stable() && rep.agree());

        let m = demo_model();
        let rep = check_stability(&m, &ZeroPolicy, 2, 5, 100, 1).unwrap();
        assert!(!rep.spectral_stable && !rep.monte_carlo_stable);

        let w = demo_weights(&m);
        let vi = model_based_vi(&m, &w, 1000, 1e-12).unwrap();
        let rep = check_stability(&m, &vi.policy, 2, 10, 300, 2).unwrap();
        assert!(rep.stable() && rep.agree(), "{rep:?}");
    }

    #[test]
    fn rollout_cost_matches_value_on_single_agent() {
        let (m, w) = crate::presets::single_follower_demo();
        let vi = model_based_vi(&m, &w, 1000, 1e-12).unwrap();
        let p = &vi.final_kernel().p[0];
        for init in random_states(&m, 5, 3) {
            let c = rollout_cost(&m, &w, &vi.policy, &init, 500, 0).unwrap();
            let e0 = crate::dynamics::tracking_error(&m, &init, 0).unwrap();
            let v = quad(p, &e0);
            assert!((c.value - v).abs() <= 1e-3 * v, "{} vs {v}", c.value);
        }
    }

    proptest! {
        #[test]
        fn lifted_kernel_reproduces_value(seed in 0u64..100) {
            let m = demo_model();
            let w = demo_weights(&m);
            let vi = model_based_vi(&m, &w, 1000, 1e-12).unwrap();
            let init = random_states(&m, 1, seed).remove(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let run = simulate(&m, &init, 6, &ZeroPolicy, |_, u| {
                u.iter_mut().for_each(|v| v[0] = rng.random_range(-1.0..1.0))
            }).unwrap();
            for i in 0..3 {
                let k = lifted_kernel(&m, i, 2, &vi.final_kernel().p[i]).unwrap();
                let win = crate::estimator::IoWindow::from_history(&run.history, &m, i, 5, 2).unwrap();
                let e = run.history.error(i, 5);
                let v = quad(&vi.final_kernel().p[i], e);
                prop_assert!((k.evaluate(&win.flatten()).unwrap() - v).abs() <= 1e-9 * (1.0 + v));
            }
        }
    }
}
