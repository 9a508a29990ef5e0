//! Data-based value iteration on the I/O window kernels.
//!
//! Every outer iteration runs the swarm under the current policies plus
//! uniform exploration noise, fits each agent's next kernel by batch least
//! squares on the same data, then replaces all policies at once.
//!
//! In agent `i`'s regression target the neighbors' current controls are
//! held at zero and the own current control is the greedy action of the
//! previous kernel:
//! `w̄[k-1,k-N]ᵀ P̄^{s+1} w̄[k-1,k-N] = y(k)ᵀQ y(k) + u*ᵀR u* + w*ᵀ P̄^s w*`,
//! where `w*` is `w̄[k,k-N+1]` with `u_i(k) = u*` and `u_j(k) = 0`. The
//! target is then a quadratic function of the agent's own window, so the
//! fixed point is representable by a kernel. Measured neighbor controls
//! still enter the resulting law.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, stage_cost, CostWeights, MasModel, SwarmState};
use crate::error::{Error, Result};
use crate::estimator::{default_horizon, IoWindow};
use crate::linalg;
use crate::qkernel::{CouplingMode, DataPolicy, KernelLayout, PolicyGains, QKernel};

/// Whether each outer iteration collects new data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// New closed-loop data under the current policies every iteration.
    #[default]
    Fresh,
    /// One exploratory batch, reused with updated targets.
    Reuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Window length `N`; the largest observability index when absent.
    pub horizon: Option<usize>,
    pub exploration_amplitude: f64,
    /// Twice the largest kernel's unknown count when absent.
    pub samples_per_iteration: Option<usize>,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub ridge_lambda: f64,
    pub seed: u64,
    pub coupling: CouplingMode,
    pub data_mode: DataMode,
    /// Samples used for the final Bellman-residual check.
    pub held_out_samples: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            exploration_amplitude: 0.1,
            samples_per_iteration: None,
            epsilon: 1e-4,
            max_iterations: 100,
            ridge_lambda: 1e-8,
            seed: 0,
            coupling: CouplingMode::Exact,
            data_mode: DataMode::Fresh,
            held_out_samples: 100,
        }
    }
}

impl LearnerConfig {
    pub fn resolved_horizon(&self, model: &MasModel) -> Result<usize> {
        match self.horizon {
            Some(0) => Err(Error::validation("learner.horizon", "must be at least 1")),
            Some(n) => Ok(n),
            None => default_horizon(model),
        }
    }

    pub fn layouts(&self, model: &MasModel) -> Result<Vec<KernelLayout>> {
        let n = self.resolved_horizon(model)?;
        (0..model.agent_count())
            .map(|i| KernelLayout::for_agent(model, i, n))
            .collect()
    }

    pub fn resolved_samples(&self, model: &MasModel) -> Result<usize> {
        let most = self
            .layouts(model)?
            .iter()
            .map(KernelLayout::unknowns)
            .max()
            .unwrap_or(1);
        Ok(self.samples_per_iteration.unwrap_or(2 * most))
    }

    pub fn validate(&self, model: &MasModel) -> Result<()> {
        let positive = [
            ("learner.exploration_amplitude", self.exploration_amplitude),
            ("learner.epsilon", self.epsilon),
            ("learner.ridge_lambda", self.ridge_lambda),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(field, "must be positive and finite"));
            }
        }
        let most = self
            .layouts(model)?
            .iter()
            .map(KernelLayout::unknowns)
            .max()
            .unwrap_or(1);
        let samples = self.resolved_samples(model)?;
        if samples < most {
            return Err(Error::validation(
                "learner.samples_per_iteration",
                format!("{samples} is below the {most} kernel unknowns"),
            ));
        }
        if self.held_out_samples == 0 {
            return Err(Error::validation("learner.held_out_samples", "must be positive"));
        }
        Ok(())
    }
}

/// One Bellman sample of one agent at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `w̄_i[k-1, k-N]`.
    pub w_now: DVector<f64>,
    /// `w̄_i[k, k-N+1]` as recorded.
    pub w_next: DVector<f64>,
    pub output: DVector<f64>,
    pub own_control: DVector<f64>,
    pub neighbor_controls: Vec<DVector<f64>>,
}

fn uniform_noise(rng: &mut ChaCha8Rng, amplitude: f64, u: &mut [DVector<f64>]) {
    for ui in u.iter_mut() {
        for v in ui.iter_mut() {
            if amplitude > 0.0 {
                *v += rng.random_range(-amplitude..=amplitude);
            }
        }
    }
}

/// Runs one exploratory closed loop of `N + count` steps from a random
/// initial state and returns `count` samples per agent. The first `N` steps
/// apply noise only.
pub fn collect_samples(
    model: &MasModel,
    policy: &DataPolicy,
    amplitude: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Sample>>> {
    let agents = model.agent_count();
    if count == 0 {
        return Ok(vec![Vec::new(); agents]);
    }
    let horizon = policy.horizon();
    let n = model.state_dim();
    let mut draw = || DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
    let followers = (0..agents).map(|_| draw()).collect();
    let init = SwarmState::new(followers, draw());
    let steps = horizon + count;
    let run = simulate(model, &init, steps, policy, |k, u| {
        if k < horizon {
            u.iter_mut().for_each(|v| v.fill(0.0));
        }
        uniform_noise(rng, amplitude, u);
    })?;
    if run.diverged() || run.len() < steps {
        return Err(Error::NotConverged {
            what: "exploratory closed loop (state diverged)",
            iterations: run.len(),
            delta: f64::INFINITY,
        });
    }
    let h = &run.history;
    let mut out = vec![Vec::with_capacity(count); agents];
    for k in horizon..steps {
        for (i, set) in out.iter_mut().enumerate() {
            let nbrs = model.neighbors(i);
            set.push(Sample {
                w_now: IoWindow::from_history(h, model, i, k, horizon)?.flatten(),
                w_next: IoWindow::from_history(h, model, i, k + 1, horizon)?.flatten(),
                output: h.output(i, k).clone(),
                own_control: h.control(i, k).clone(),
                neighbor_controls: nbrs.iter().map(|&j| h.control(j, k).clone()).collect(),
            });
        }
    }
    for (i, set) in out.iter().enumerate() {
        let layout = &policy.gains[i].layout;
        check_input_excitation(set, layout, i)?;
    }
    Ok(out)
}

/// The control coordinates of the windows must span their full dimension.
fn check_input_excitation(samples: &[Sample], layout: &KernelLayout, agent: usize) -> Result<()> {
    let inputs = layout.output_offset();
    let rows = DMatrix::from_fn(inputs, samples.len(), |r, c| samples[c].w_now[r]);
    let sv = rows.singular_values();
    let rank = sv.iter().filter(|s| **s > 1e-9 * sv.max().max(f64::MIN_POSITIVE)).count();
    if samples.is_empty() || sv.max() == 0.0 || rank < inputs {
        return Err(Error::RankDeficientData {
            agent,
            what: "input excitation",
            rank: if sv.max() == 0.0 { 0 } else { rank },
            required: inputs,
        });
    }
    Ok(())
}

/// Regression target of a sample under the kernel and law of iteration `s`.
pub fn bellman_target(
    sample: &Sample,
    kernel: &QKernel,
    gains: &PolicyGains,
    weights: &CostWeights,
    agent: usize,
) -> Result<f64> {
    let layout = kernel.layout();
    let m = layout.own_dim;
    let d = layout.total_dim();
    let mut w = sample.w_next.clone();
    let base = layout.neighbor_offset();
    for slot in 0..layout.neighbors.len() {
        let off = base + layout.neighbor_slot_offset(slot);
        w.rows_mut(off, layout.neighbor_dims[slot]).fill(0.0);
    }
    let u_star = gains.rest_gain() * w.rows(m, d - m);
    w.rows_mut(0, m).copy_from(&u_star);
    let zeros: Vec<DVector<f64>> = layout.neighbor_dims.iter().map(|&mj| DVector::zeros(mj)).collect();
    let stage = stage_cost(weights, agent, &sample.output, &u_star, &zeros)?;
    Ok(stage + kernel.evaluate(&w)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueUpdate {
    pub kernel: QKernel,
    /// Largest `|fit − target| / (1 + |target|)` on the batch.
    pub fit_residual: f64,
    /// Dimension of the data subspace the windows occupy.
    pub subspace_dim: usize,
}

/// Least-squares kernel update on one agent's batch.
///
/// The windows may occupy a proper subspace of `R^d` (outputs are partly
/// determined by past inputs and outputs), in which case only the kernel's
/// restriction to that subspace is identifiable. The fit is done in an
/// orthonormal basis `B` of the sampled subspace and lifted back as
/// `B M Bᵀ`.
pub fn value_update(
    samples: &[Sample],
    kernel_prev: &QKernel,
    weights: &CostWeights,
    ridge_lambda: f64,
    agent: usize,
) -> Result<ValueUpdate> {
    let layout = kernel_prev.layout().clone();
    let d = layout.total_dim();
    if samples.is_empty() {
        return Err(Error::RankDeficientData {
            agent,
            what: "regression features",
            rank: 0,
            required: layout.unknowns(),
        });
    }
    check_input_excitation(samples, &layout, agent)?;
    let gains = kernel_prev.policy_gains(weights.r_self(agent))?;
    let targets = samples
        .iter()
        .map(|s| bellman_target(s, kernel_prev, &gains, weights, agent))
        .collect::<Result<Vec<f64>>>()?;
    let targets = DVector::from_vec(targets);

    let w = DMatrix::from_fn(d, samples.len(), |r, c| samples[c].w_now[r]);
    let svd = w.svd(true, false);
    let u = svd.u.expect("svd u");
    let top = svd.singular_values.max();
    let kept: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&c| svd.singular_values[c] > 1e-9 * top)
        .collect();
    let r = kept.len();
    let basis = DMatrix::from_fn(d, r, |row, c| u[(row, kept[c])]);
    let p = linalg::sym_dim(r);
    let k = samples.len();
    let mut phi = DMatrix::zeros(k, p);
    for (row, s) in samples.iter().enumerate() {
        let z = basis.transpose() * &s.w_now;
        phi.set_row(row, &linalg::svec_features(&z).transpose());
    }
    // Unit-norm feature columns make the ridge term independent of the
    // data scale.
    let col_scale = DVector::from_fn(p, |c, _| {
        let norm = phi.column(c).norm();
        if norm > 0.0 { 1.0 / norm } else { 1.0 }
    });
    let mut phi_n = phi.clone();
    for c in 0..p {
        phi_n.column_mut(c).scale_mut(col_scale[c]);
    }
    let fsvd = phi_n.svd(true, true);
    let fs = &fsvd.singular_values;
    let tol = fs.max() * (k.max(p) as f64) * f64::EPSILON;
    let feature_rank = fs.iter().filter(|s| **s > tol).count();
    if k < p || feature_rank < p {
        return Err(Error::RankDeficientData {
            agent,
            what: "regression features",
            rank: feature_rank,
            required: p,
        });
    }
    let fu = fsvd.u.expect("svd u");
    let fv_t = fsvd.v_t.expect("svd v_t");
    let proj = fu.transpose() * &targets;
    let scaled = DVector::from_fn(fs.len(), |i, _| fs[i] / (fs[i] * fs[i] + ridge_lambda) * proj[i]);
    let theta = (fv_t.transpose() * scaled).component_mul(&col_scale);
    let fit = &phi * &theta;
    let fit_residual = fit
        .iter()
        .zip(targets.iter())
        .map(|(f, t)| (f - t).abs() / (1.0 + t.abs()))
        .fold(0.0, f64::max);
    let reduced = linalg::unpack_upper(theta.as_slice(), r);
    let kernel = QKernel::from_matrix(layout, &(&basis * reduced * basis.transpose()))?;
    Ok(ValueUpdate {
        kernel,
        fit_residual,
        subspace_dim: r,
    })
}

/// The greedy law of a kernel.
pub fn policy_improvement(kernel: &QKernel, weights: &CostWeights, agent: usize) -> Result<PolicyGains> {
    kernel.policy_gains(weights.r_self(agent))
}

/// Largest held-out `|w_nowᵀP̄w_now − target| / (1 + |target|)` with the
/// target formed from the same kernel.
pub fn bellman_residual(samples: &[Sample], kernel: &QKernel, weights: &CostWeights, agent: usize) -> Result<f64> {
    let gains = kernel.policy_gains(weights.r_self(agent))?;
    let mut worst: f64 = 0.0;
    for s in samples {
        let t = bellman_target(s, kernel, &gains, weights, agent)?;
        let v = kernel.evaluate(&s.w_now)?;
        worst = worst.max((v - t).abs() / (1.0 + t.abs()));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub max_delta: f64,
    pub deltas: Vec<f64>,
    pub fit_residuals: Vec<f64>,
    /// Row-major upper triangles, one per agent.
    pub kernels: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent: usize,
    pub layout: KernelLayout,
    pub nominal_unknowns: usize,
    pub identifiable_unknowns: usize,
    pub final_delta: f64,
    pub held_out_residual: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningReport {
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub epsilon: f64,
    pub horizon: usize,
    pub coupling: CouplingMode,
    pub data_mode: DataMode,
    pub exploration_amplitude: f64,
    pub samples_per_iteration: usize,
    pub held_out_samples: usize,
    pub held_out_residual: f64,
    pub agents: Vec<AgentSummary>,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct LearningOutcome {
    pub report: LearningReport,
    pub kernels: Vec<QKernel>,
    pub gains: Vec<PolicyGains>,
    pub coupling: CouplingMode,
}

impl LearningOutcome {
    pub fn policy(&self) -> DataPolicy {
        DataPolicy::new(self.gains.clone(), self.coupling)
    }

    /// `Err(NotConverged)` unless the run met its tolerance.
    pub fn require_converged(&self) -> Result<&Self> {
        if self.report.converged {
            return Ok(self);
        }
        Err(Error::NotConverged {
            what: "data-based value iteration",
            iterations: self.report.iterations,
            delta: self.report.trace.last().map_or(f64::INFINITY, |r| r.max_delta),
        })
    }
}

/// Value iteration from zero kernels and zero policies.
pub fn run(model: &MasModel, weights: &CostWeights, config: &LearnerConfig) -> Result<LearningOutcome> {
    run_from(model, weights, config, None)
}

/// Value iteration from given initial kernels (zero when `None`).
pub fn run_from(
    model: &MasModel,
    weights: &CostWeights,
    config: &LearnerConfig,
    initial: Option<Vec<QKernel>>,
) -> Result<LearningOutcome> {
    config.validate(model)?;
    let layouts = config.layouts(model)?;
    let horizon = config.resolved_horizon(model)?;
    let count = config.resolved_samples(model)?;
    let agents = model.agent_count();
    let mut kernels = match initial {
        Some(k) => {
            if k.len() != agents || k.iter().zip(&layouts).any(|(k, l)| k.layout() != l) {
                return Err(Error::validation("initial kernels", "layout does not match the scenario"));
            }
            k
        }
        None => layouts.iter().cloned().map(QKernel::zeros).collect(),
    };
    let mut gains = kernels
        .iter()
        .enumerate()
        .map(|(i, k)| policy_improvement(k, weights, i))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut reused: Option<Vec<Vec<Sample>>> = None;
    let mut subspace = vec![0; agents];
    let mut last_deltas = vec![f64::INFINITY; agents];

    for s in 0..config.max_iterations {
        let policy = DataPolicy::new(gains.clone(), config.coupling);
        let batch = match (config.data_mode, &reused) {
            (DataMode::Reuse, Some(b)) => b.clone(),
            _ => {
                let b = collect_samples(model, &policy, config.exploration_amplitude, count, &mut rng)?;
                if config.data_mode == DataMode::Reuse {
                    reused = Some(b.clone());
                }
                b
            }
        };
        // Every agent reads the same batch and the pre-iteration kernels.
        let updates = (0..agents)
            .map(|i| value_update(&batch[i], &kernels[i], weights, config.ridge_lambda, i))
            .collect::<Result<Vec<_>>>()?;
        let deltas: Vec<f64> = updates.iter().zip(&kernels).map(|(u, k)| u.kernel.distance(k)).collect();
        let max_delta = deltas.iter().copied().fold(0.0, f64::max);
        for (i, u) in updates.iter().enumerate() {
            subspace[i] = u.subspace_dim;
        }
        kernels = updates.iter().map(|u| u.kernel.clone()).collect();
        gains = kernels
            .iter()
            .enumerate()
            .map(|(i, k)| policy_improvement(k, weights, i))
            .collect::<Result<_>>()?;
        log::debug!("iteration {}: max delta {:.3e}", s + 1, max_delta);
        trace.push(IterationRecord {
            iteration: s + 1,
            max_delta,
            deltas: deltas.clone(),
            fit_residuals: updates.iter().map(|u| u.fit_residual).collect(),
            kernels: kernels.iter().map(QKernel::upper).collect(),
        });
        last_deltas = deltas;
        if max_delta <= config.epsilon {
            converged = true;
            break;
        }
    }

    let policy = DataPolicy::new(gains.clone(), config.coupling);
    let held_out = collect_samples(model, &policy, config.exploration_amplitude, config.held_out_samples, &mut rng);
    let residuals: Vec<f64> = match held_out {
        Ok(sets) => sets
            .iter()
            .enumerate()
            .map(|(i, set)| bellman_residual(set, &kernels[i], weights, i))
            .collect::<Result<_>>()?,
        Err(_) => vec![f64::INFINITY; agents],
    };
    let agents_summary = (0..agents)
        .map(|i| AgentSummary {
            agent: i,
            layout: layouts[i].clone(),
            nominal_unknowns: layouts[i].unknowns(),
            identifiable_unknowns: linalg::sym_dim(subspace[i]),
            final_delta: last_deltas[i],
            held_out_residual: residuals[i],
            min_eigenvalue: kernels[i].min_eigenvalue(),
        })
        .collect();
    let report = LearningReport {
        seed: config.seed,
        converged,
        iterations: trace.len(),
        epsilon: config.epsilon,
        horizon,
        coupling: config.coupling,
        data_mode: config.data_mode,
        exploration_amplitude: config.exploration_amplitude,
        samples_per_iteration: count,
        held_out_samples: config.held_out_samples,
        held_out_residual: residuals.iter().copied().fold(0.0, f64::max),
        agents: agents_summary,
        trace,
    };
    Ok(LearningOutcome {
        report,
        kernels,
        gains,
        coupling: config.coupling,
    })
}
