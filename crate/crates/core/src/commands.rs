//! The command-line front end: argument definitions, the four commands and
//! the mapping from errors to exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unreadable or malformed input, or an I/O failure |
//! | 2 | the input parsed but is invalid |
//! | 3 | learning did not converge |
//! | 4 | a validation check failed |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, MasModel, Rollout, ZeroPolicy};
use crate::error::{Error, Result};
use crate::estimator::{build_estimator, reconstruct_error, IoWindow};
use crate::learner::{self, LearningOutcome};
use crate::oracle::{self, BoundCheckConfig, NashConfig};
use crate::qkernel::{CouplingMode, DataPolicy, KernelLayout, PolicyGains, QKernel};
use crate::scenario::{load_scenario, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

/// Tolerance of the `simulate` consensus report.
pub const CONSENSUS_TOL: f64 = 1e-2;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => EXIT_PARSE,
        Error::IndexOutOfRange { .. }
        | Error::DimensionMismatch { .. }
        | Error::InvalidGraph(_)
        | Error::InvalidModel(_)
        | Error::RankDeficient { .. }
        | Error::NotObservable { .. }
        | Error::Validation { .. } => EXIT_VALIDATION,
        Error::SingularGain { .. }
        | Error::SingularCoupling
        | Error::RankDeficientData { .. }
        | Error::NotConverged { .. } => EXIT_NOT_CONVERGED,
        Error::HypothesisViolated(_) => EXIT_CHECK_FAILED,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mas-ioql", version, about = "Data-driven optimal consensus tracking for linear multi-agent systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn value kernels and policies from simulated input-output data.
    Learn(CommonArgs),
    /// Run the closed loop of a learned policy and write the trajectory.
    Simulate(GainsArgs),
    /// Check a learned policy against model-based references.
    Validate(GainsArgs),
    /// Learn, simulate and validate the bundled three-follower example.
    DemoPaper(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Scenario TOML file. `demo-paper` uses the bundled example when absent.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Output directory; falls back to the scenario's `output_dir`, then `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Learner seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Kernel convergence threshold.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub coupling: Option<CouplingMode>,
}

#[derive(Debug, Clone, Args)]
pub struct GainsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Gains file written by `learn`; defaults to `<out>/gains.json`.
    #[arg(long)]
    pub gains: Option<PathBuf>,
}

impl CommonArgs {
    fn scenario(&self, allow_default: bool) -> Result<Scenario> {
        let mut scenario = match &self.scenario {
            Some(path) => load_scenario(path)?,
            None if allow_default => Scenario::demo(),
            None => return Err(Error::Parse("--scenario <path> is required".into())),
        };
        if let Some(seed) = self.seed {
            scenario.learner.seed = seed;
        }
        if let Some(eps) = self.epsilon {
            scenario.learner.epsilon = eps;
        }
        if let Some(n) = self.max_iters {
            scenario.learner.max_iterations = n;
        }
        if let Some(c) = self.coupling {
            scenario.learner.coupling = c;
        }
        scenario.learner.validate(&scenario.model)?;
        Ok(scenario)
    }

    fn out_dir(&self, scenario: &Scenario) -> PathBuf {
        self.out
            .clone()
            .or_else(|| scenario.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Learned laws as written to `gains.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainsFile {
    pub horizon: usize,
    pub coupling: CouplingMode,
    pub gains: Vec<PolicyGains>,
    /// Upper triangles of the learned kernels, row by row.
    #[serde(default)]
    pub kernels: Vec<Vec<f64>>,
}

impl GainsFile {
    pub fn from_outcome(outcome: &LearningOutcome) -> Self {
        Self {
            horizon: outcome.report.horizon,
            coupling: outcome.coupling,
            gains: outcome.gains.clone(),
            kernels: outcome.kernels.iter().map(QKernel::upper).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Checks the file against the scenario's agents and windows.
    pub fn check(&self, model: &MasModel) -> Result<()> {
        if self.gains.len() != model.agent_count() {
            return Err(Error::validation(
                "gains",
                format!("{} gain sets for {} agents", self.gains.len(), model.agent_count()),
            ));
        }
        for (i, g) in self.gains.iter().enumerate() {
            if g.layout != KernelLayout::for_agent(model, i, self.horizon)? {
                return Err(Error::validation(format!("gains[{i}]"), "layout does not match the scenario"));
            }
            let (m, rest) = (g.layout.own_dim, g.rest_gain());
            if rest.nrows() != m || rest.ncols() + m != g.layout.total_dim() || g.inverted_term.shape() != (m, m) {
                return Err(Error::validation(format!("gains[{i}]"), "gain shapes do not match the layout"));
            }
        }
        if !self.kernels.is_empty() {
            self.learned_kernels()?;
        }
        Ok(())
    }

    pub fn policy(&self) -> DataPolicy {
        DataPolicy::new(self.gains.clone(), self.coupling)
    }

    pub fn learned_kernels(&self) -> Result<Vec<QKernel>> {
        if self.kernels.len() != self.gains.len() {
            return Err(Error::validation("kernels", "one kernel per agent expected"));
        }
        self.gains
            .iter()
            .zip(&self.kernels)
            .enumerate()
            .map(|(i, (g, k))| {
                QKernel::from_upper(g.layout.clone(), k).map_err(|_| {
                    Error::validation(format!("kernels[{i}]"), "entry count does not match the layout")
                })
            })
            .collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `report.json`, `kernel_trace.csv` and `gains.json` into `out`.
/// Files are written whether or not the run converged.
pub fn cmd_learn(scenario: &Scenario, out: &Path) -> Result<LearningOutcome> {
    fs::create_dir_all(out)?;
    let outcome = learner::run(&scenario.model, &scenario.weights, &scenario.learner)?;
    write_json(&out.join("report.json"), &outcome.report)?;
    write_kernel_trace(&out.join("kernel_trace.csv"), &outcome)?;
    write_json(&out.join("gains.json"), &GainsFile::from_outcome(&outcome))?;
    Ok(outcome)
}

/// One row per iteration and agent: the change of the kernel and its upper
/// triangle (`p_r_c`, 1-based). Shorter kernels leave trailing cells empty.
fn write_kernel_trace(path: &Path, outcome: &LearningOutcome) -> Result<()> {
    let dims: Vec<usize> = outcome.kernels.iter().map(QKernel::dim).collect();
    let widest = dims.iter().copied().max().unwrap_or(0);
    let mut header = vec!["iteration".to_string(), "agent".into(), "delta".into()];
    for r in 0..widest {
        for c in r..widest {
            header.push(format!("p_{}_{}", r + 1, c + 1));
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for rec in &outcome.report.trace {
        for (i, upper) in rec.kernels.iter().enumerate() {
            let mut row = vec![rec.iteration.to_string(), (i + 1).to_string(), rec.deltas[i].to_string()];
            let d = dims[i];
            for r in 0..widest {
                for c in r..widest {
                    row.push(if r < d && c < d {
                        upper[r * d - r * (r + 1) / 2 + c].to_string()
                    } else {
                        String::new()
                    });
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SimulationSummary {
    pub rollout: Rollout,
    pub steps_to_consensus: Option<usize>,
    pub rows: usize,
}

/// Runs the closed loop from the scenario's initial state and writes
/// `trajectory.csv` with one row per step and follower plus one leader row
/// (agent 0) per step.
pub fn cmd_simulate(scenario: &Scenario, gains: &GainsFile, out: &Path) -> Result<SimulationSummary> {
    gains.check(&scenario.model)?;
    fs::create_dir_all(out)?;
    let model = &scenario.model;
    let init = scenario.initial_state()?;
    let rollout = simulate(model, &init, scenario.simulation.horizon, &gains.policy(), |_, _| {})?;
    let rows = write_trajectory(&out.join("trajectory.csv"), model, &rollout)?;
    let steps_to_consensus = rollout.steps_to_consensus(CONSENSUS_TOL);
    Ok(SimulationSummary {
        rollout,
        steps_to_consensus,
        rows,
    })
}

fn write_trajectory(path: &Path, model: &MasModel, rollout: &Rollout) -> Result<usize> {
    let n = model.state_dim();
    let agents = model.agent_count();
    let m = (0..agents).map(|i| model.input_dim(i)).max().unwrap_or(0);
    let mut header = vec!["k".to_string(), "agent".into()];
    header.extend((1..=n).map(|c| format!("x_{c}")));
    header.extend((1..=n).map(|c| format!("e_{c}")));
    header.extend((1..=m).map(|c| format!("u_{c}")));
    header.extend((1..=n).map(|c| format!("leader_{c}")));
    let cells = |v: &DVector<f64>, width: usize| -> Vec<String> {
        (0..width)
            .map(|c| if c < v.len() { v[c].to_string() } else { String::new() })
            .collect()
    };
    let blank = |width: usize| vec![String::new(); width];
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    let h = &rollout.history;
    let mut rows = 0;
    for k in 0..rollout.len() {
        let state = &rollout.states[k];
        for i in 0..agents {
            let mut row = vec![k.to_string(), (i + 1).to_string()];
            row.extend(cells(&state.followers[i], n));
            row.extend(cells(h.error(i, k), n));
            row.extend(cells(h.control(i, k), m));
            row.extend(cells(&state.leader, n));
            w.write_record(&row)?;
        }
        let mut row = vec![k.to_string(), "0".into()];
        row.extend(cells(&state.leader, n));
        row.extend(blank(n + m));
        row.extend(cells(&state.leader, n));
        w.write_record(&row)?;
        rows += agents + 1;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent: Option<usize>,
    pub status: CheckStatus,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
}

impl CheckOutcome {
    fn new(name: &str, agent: Option<usize>) -> Self {
        Self {
            name: name.into(),
            agent,
            status: CheckStatus::Skipped,
            detail: String::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn metric(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.into(), value);
        self
    }

    fn verdict(mut self, pass: bool, detail: impl Into<String>) -> Self {
        self.status = if pass { CheckStatus::Pass } else { CheckStatus::Fail };
        self.detail = detail.into();
        self
    }

    fn skipped(mut self, detail: impl Into<String>) -> Self {
        self.status = CheckStatus::Skipped;
        self.detail = detail.into();
        self
    }

    fn failed(self, err: &Error) -> Self {
        self.verdict(false, err.to_string())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub horizon: usize,
    pub coupling: CouplingMode,
    pub checks: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }
}

/// Thresholds and sample sizes of [`validate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationConfig {
    /// `|ê − e| <= tol · (1 + |e|)` on every reconstructed error.
    pub estimator_tol: f64,
    /// Relative tolerance of the kernel and policy comparisons.
    pub reference_tol: f64,
    pub window_points: usize,
    pub theta_samples: usize,
    pub stability_trials: usize,
    pub stability_horizon: usize,
    pub nash: NashConfig,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            estimator_tol: 1e-8,
            reference_tol: 1e-3,
            window_points: 100,
            theta_samples: 2000,
            stability_trials: 20,
            stability_horizon: 300,
            nash: NashConfig::default(),
            seed: 0,
        }
    }
}

/// Open-loop run under uniform input noise; its windows cover every
/// reachable input-output combination.
fn exploration_run(model: &MasModel, steps: usize, seed: u64) -> Result<Rollout> {
    let init = oracle::random_states(model, 1, seed).remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    simulate(model, &init, steps, &ZeroPolicy, |_, u| {
        for v in u.iter_mut() {
            v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0));
        }
    })
}

fn estimator_check(model: &MasModel, i: usize, horizon: usize, cfg: &ValidationConfig) -> CheckOutcome {
    let out = CheckOutcome::new("estimator_exactness", Some(i));
    let run = || -> Result<(f64, usize)> {
        let est = build_estimator(model, i, horizon)?;
        let rollout = exploration_run(model, horizon + cfg.window_points, cfg.seed)?;
        let h = &rollout.history;
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for k in horizon..rollout.len() {
            let window = IoWindow::from_history(h, model, i, k, horizon)?;
            let e = h.error(i, k);
            let err = (reconstruct_error(&est, &window)? - e).amax();
            worst = worst.max(err / (1.0 + e.amax()));
            count += 1;
        }
        Ok((worst, count))
    };
    match run() {
        Ok((worst, count)) => out
            .metric("worst_scaled_error", worst)
            .metric("windows", count as f64)
            .verdict(worst <= cfg.estimator_tol, format!("worst scaled reconstruction error {worst:.3e}")),
        Err(e) => out.failed(&e),
    }
}

/// Learned kernels against `eᵀPe` of the model-based fixed point, evaluated
/// on measured windows (the kernel is only determined on that subspace).
fn kernel_check(
    scenario: &Scenario,
    kernels: &[QKernel],
    horizon: usize,
    reference: &oracle::StateValueKernel,
    name: &str,
    cfg: &ValidationConfig,
) -> Vec<CheckOutcome> {
    let model = &scenario.model;
    let rollout = match exploration_run(model, horizon + cfg.window_points, cfg.seed.wrapping_add(1)) {
        Ok(r) => r,
        Err(e) => return vec![CheckOutcome::new(name, None).failed(&e)],
    };
    (0..model.agent_count())
        .map(|i| {
            let out = CheckOutcome::new(name, Some(i));
            let run = || -> Result<f64> {
                let h = &rollout.history;
                let mut worst: f64 = 0.0;
                for k in horizon..rollout.len() {
                    let w = IoWindow::from_history(h, model, i, k, horizon)?.flatten();
                    let e = h.error(i, k);
                    let v = (e.transpose() * &reference.p[i] * e)[(0, 0)];
                    worst = worst.max((kernels[i].evaluate(&w)? - v).abs() / v.abs().max(1e-12));
                }
                Ok(worst)
            };
            match run() {
                Ok(worst) => out
                    .metric("worst_relative_error", worst)
                    .verdict(worst <= cfg.reference_tol, format!("worst relative value error {worst:.3e}")),
                Err(e) => out.failed(&e),
            }
        })
        .collect()
}

fn relative_frobenius(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

/// Closed-loop control maps of the learned law and of the model-based law.
fn policy_check(
    model: &MasModel,
    policy: &DataPolicy,
    reference: &oracle::StatePolicy,
    cfg: &ValidationConfig,
) -> CheckOutcome {
    let out = CheckOutcome::new("policy_vs_model", None);
    if policy.coupling != CouplingMode::Exact {
        return out.skipped("the model-based law resolves neighbor controls exactly");
    }
    let horizon = policy.horizon();
    let run = || -> Result<f64> {
        let learned = oracle::closed_loop_realization(model, policy, horizon)?;
        let exact = oracle::closed_loop_realization(model, reference, horizon)?;
        Ok(relative_frobenius(&learned.control_map, &exact.control_map))
    };
    match run() {
        Ok(gap) => out
            .metric("relative_gap", gap)
            .verdict(gap <= cfg.reference_tol, format!("relative control-map gap {gap:.3e}")),
        Err(e) => out.failed(&e),
    }
}

fn sandwich_check(scenario: &Scenario, i: usize, cfg: &ValidationConfig) -> CheckOutcome {
    let out = CheckOutcome::new("value_iteration_bounds", Some(i));
    let run = || -> Result<oracle::SandwichReport> {
        let lq = oracle::agent_lq_data(&scenario.model, &scenario.weights, i)?;
        let [a, f, q, r] = &lq;
        let star = oracle::dare_solve(a, f, q, r)?;
        let p0 = nalgebra::DMatrix::zeros(a.nrows(), a.nrows());
        let trace = oracle::riccati_value_iteration(a, f, q, r, &p0, 10_000, 1e-12)?;
        let theta = oracle::estimate_theta(&lq, &star.p, cfg.theta_samples, cfg.seed)?;
        let states: Vec<DVector<f64>> = oracle::random_states(&scenario.model, 50, cfg.seed)
            .iter()
            .map(|s| crate::dynamics::tracking_error(&scenario.model, s, i))
            .collect::<Result<_>>()?;
        oracle::check_value_bounds(&trace, &star.p, BoundCheckConfig { theta, alpha: 0.0, beta: 1.0 }, &states)
    };
    match run() {
        Ok(rep) => out
            .metric("worst_lower_margin", rep.worst_lower_margin)
            .metric("worst_upper_margin", rep.worst_upper_margin)
            .metric("final_gap", rep.final_gap)
            .metric("iterations", rep.iterations as f64)
            .verdict(
                rep.holds,
                format!(
                    "margins {:.3e} / {:.3e} over {} iterations",
                    rep.worst_lower_margin, rep.worst_upper_margin, rep.iterations
                ),
            ),
        Err(e) => out.failed(&e),
    }
}

fn dare_check(scenario: &Scenario, kernels: Option<&[QKernel]>, horizon: usize, cfg: &ValidationConfig) -> Vec<CheckOutcome> {
    let out = CheckOutcome::new("dare_reference", Some(0));
    if scenario.model.agent_count() != 1 {
        return vec![out.skipped("only meaningful for a single follower")];
    }
    let Some(kernels) = kernels else {
        return vec![out.skipped("gains file carries no kernels")];
    };
    let solve = || -> Result<oracle::StateValueKernel> {
        let [a, f, q, r] = oracle::agent_lq_data(&scenario.model, &scenario.weights, 0)?;
        Ok(oracle::StateValueKernel {
            p: vec![oracle::dare_solve(&a, &f, &q, &r)?.p],
            iteration: 0,
        })
    };
    match solve() {
        Ok(reference) => kernel_check(scenario, kernels, horizon, &reference, "dare_reference", cfg),
        Err(e) => vec![out.failed(&e)],
    }
}

/// Runs every check. A failing check is recorded and the suite continues.
pub fn validate(scenario: &Scenario, gains: &GainsFile, cfg: &ValidationConfig) -> Result<ValidationReport> {
    gains.check(&scenario.model)?;
    let model = &scenario.model;
    let weights = &scenario.weights;
    let horizon = gains.horizon;
    let policy = gains.policy();
    let kernels = if gains.kernels.is_empty() {
        None
    } else {
        Some(gains.learned_kernels()?)
    };
    let agents = model.agent_count();
    let mut checks: Vec<CheckOutcome> = (0..agents).map(|i| estimator_check(model, i, horizon, cfg)).collect();

    match oracle::model_based_vi(model, weights, 10_000, 1e-12) {
        Ok(vi) => {
            match &kernels {
                Some(k) => checks.extend(kernel_check(scenario, k, horizon, vi.final_kernel(), "kernel_vs_model", cfg)),
                None => checks.push(CheckOutcome::new("kernel_vs_model", None).skipped("gains file carries no kernels")),
            }
            checks.push(policy_check(model, &policy, &vi.policy, cfg));
        }
        Err(e) => checks.push(CheckOutcome::new("kernel_vs_model", None).failed(&e)),
    }
    checks.extend(dare_check(scenario, kernels.as_deref(), horizon, cfg));
    checks.extend((0..agents).map(|i| sandwich_check(scenario, i, cfg)));

    let stability = CheckOutcome::new("closed_loop_stability", None);
    checks.push(
        match oracle::check_stability(model, &policy, horizon, cfg.stability_trials, cfg.stability_horizon, cfg.seed) {
            Ok(rep) => stability
                .metric("spectral_radius", rep.spectral_radius)
                .metric("worst_decay_ratio", rep.worst_decay_ratio)
                .verdict(
                    rep.stable(),
                    format!(
                        "spectral radius {:.4}, worst decay ratio {:.3e}, verdicts {}",
                        rep.spectral_radius,
                        rep.worst_decay_ratio,
                        if rep.agree() { "agree" } else { "disagree" }
                    ),
                ),
            Err(e) => stability.failed(&e),
        },
    );

    for i in 0..agents {
        let out = CheckOutcome::new("nash_local", Some(i));
        checks.push(match oracle::check_nash(model, weights, &policy, i, &cfg.nash) {
            Ok(rep) => out
                .metric("worst_relative_decrease", rep.worst_relative_decrease)
                .metric("mean_cost", rep.mean_cost)
                .metric("unstable_perturbations", rep.unstable_perturbations as f64)
                .metric("truncation_tail", rep.truncation_tail)
                .verdict(
                    rep.passed,
                    format!("worst relative cost decrease {:.3e}", rep.worst_relative_decrease),
                ),
            Err(e) => out.failed(&e),
        });
    }

    Ok(ValidationReport {
        passed: checks.iter().all(|c| c.status != CheckStatus::Fail),
        horizon,
        coupling: gains.coupling,
        checks,
    })
}

/// [`validate`] with default settings, writing `validation.json` into `out`.
pub fn cmd_validate(scenario: &Scenario, gains: &GainsFile, out: &Path) -> Result<ValidationReport> {
    let cfg = ValidationConfig {
        seed: scenario.learner.seed,
        ..ValidationConfig::default()
    };
    let report = validate(scenario, gains, &cfg)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("validation.json"), &report)?;
    Ok(report)
}

fn print_validation(report: &ValidationReport) {
    for c in &report.checks {
        let who = c.agent.map(|i| format!(" agent {}", i + 1)).unwrap_or_default();
        let status = match c.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIP",
        };
        println!("{status} {}{who}: {}", c.name, c.detail);
    }
}

fn learn_and_report(scenario: &Scenario, out: &Path) -> Result<LearningOutcome> {
    let outcome = cmd_learn(scenario, out)?;
    let r = &outcome.report;
    println!(
        "learning {} after {} iterations (held-out Bellman residual {:.3e}); wrote {}",
        if r.converged { "converged" } else { "did not converge" },
        r.iterations,
        r.held_out_residual,
        out.display()
    );
    Ok(outcome)
}

fn gains_for(args: &GainsArgs, out: &Path) -> Result<GainsFile> {
    let path = args.gains.clone().unwrap_or_else(|| out.join("gains.json"));
    let mut gains = GainsFile::read(&path)?;
    if let Some(c) = args.common.coupling {
        gains.coupling = c;
    }
    Ok(gains)
}

fn report_simulation(summary: &SimulationSummary, out: &Path) {
    match summary.steps_to_consensus {
        Some(k) => println!("consensus within {CONSENSUS_TOL} after {k} steps"),
        None => println!("no consensus within {CONSENSUS_TOL} over the horizon"),
    }
    if summary.rollout.diverged() {
        println!("the closed loop diverged");
    }
    println!("wrote {} rows to {}", summary.rows, out.join("trajectory.csv").display());
}

fn execute(command: &Command) -> Result<i32> {
    match command {
        Command::Learn(args) => {
            let scenario = args.scenario(false)?;
            let out = args.out_dir(&scenario);
            let outcome = learn_and_report(&scenario, &out)?;
            Ok(if outcome.report.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
        }
        Command::Simulate(args) => {
            let scenario = args.common.scenario(false)?;
            let out = args.common.out_dir(&scenario);
            let gains = gains_for(args, &out)?;
            let summary = cmd_simulate(&scenario, &gains, &out)?;
            report_simulation(&summary, &out);
            Ok(EXIT_OK)
        }
        Command::Validate(args) => {
            let scenario = args.common.scenario(false)?;
            let out = args.common.out_dir(&scenario);
            let gains = gains_for(args, &out)?;
            let report = cmd_validate(&scenario, &gains, &out)?;
            print_validation(&report);
            Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::DemoPaper(args) => {
            let scenario = args.scenario(true)?;
            let out = args.out_dir(&scenario);
            let outcome = learn_and_report(&scenario, &out)?;
            fs::write(out.join("scenario.toml"), scenario.to_toml()?)?;
            if !outcome.report.converged {
                return Ok(EXIT_NOT_CONVERGED);
            }
            let gains = GainsFile::from_outcome(&outcome);
            let summary = cmd_simulate(&scenario, &gains, &out)?;
            report_simulation(&summary, &out);
            let report = cmd_validate(&scenario, &gains, &out)?;
            print_validation(&report);
            Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
