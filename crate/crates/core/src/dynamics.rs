//! Follower/leader simulation, local neighborhood tracking errors, error
//! outputs and the per-agent stage cost.
//!
//! The plant is deterministic. Exploration noise is injected by callers of
//! [`simulate`] through its control hook, never by the plant itself.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::Digraph;
use crate::linalg::{self, RANK_TOL};

/// Shared drift matrix `A`, per-agent `B_i` and `C_i`, and the topology.
#[derive(Debug, Clone, PartialEq)]
pub struct MasModel {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    graph: Digraph,
}

impl MasModel {
    pub fn new(
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        graph: Digraph,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::InvalidModel("A must be square and non-empty".into()));
        }
        let agents = graph.node_count();
        if b.len() != agents {
            return Err(Error::dims("number of B matrices", agents, b.len()));
        }
        if c.len() != agents {
            return Err(Error::dims("number of C matrices", agents, c.len()));
        }
        for (i, bi) in b.iter().enumerate() {
            if bi.nrows() != n || bi.ncols() == 0 {
                return Err(Error::InvalidModel(format!(
                    "B_{i} must be {n}xm with m >= 1, got {}x{}",
                    bi.nrows(),
                    bi.ncols()
                )));
            }
        }
        for (i, ci) in c.iter().enumerate() {
            if ci.ncols() != n || ci.nrows() == 0 {
                return Err(Error::InvalidModel(format!(
                    "C_{i} must be qx{n} with q >= 1, got {}x{}",
                    ci.nrows(),
                    ci.ncols()
                )));
            }
        }
        Ok(Self { a, b, c, graph })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self, i: usize) -> &DMatrix<f64> {
        &self.b[i]
    }

    pub fn c(&self, i: usize) -> &DMatrix<f64> {
        &self.c[i]
    }

    pub fn graph(&self) -> &Digraph {
        &self.graph
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn agent_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn input_dim(&self, i: usize) -> usize {
        self.b[i].ncols()
    }

    pub fn output_dim(&self, i: usize) -> usize {
        self.c[i].nrows()
    }

    /// Ascending in-neighbor list; panics on a bad index (internal use).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.graph.neighbors(i).expect("agent index")
    }

    pub(crate) fn check_agent(&self, i: usize) -> Result<()> {
        if i >= self.agent_count() {
            return Err(Error::IndexOutOfRange {
                index: i,
                count: self.agent_count(),
            });
        }
        Ok(())
    }

    pub fn is_reachable(&self, i: usize) -> bool {
        let n = self.state_dim();
        let mut blocks = Vec::with_capacity(n);
        let mut ak_b = self.b[i].clone();
        for _ in 0..n {
            blocks.push(ak_b.clone());
            ak_b = &self.a * ak_b;
        }
        let ctrb = DMatrix::from_fn(n, blocks.len() * self.input_dim(i), |r, c| {
            blocks[c / self.input_dim(i)][(r, c % self.input_dim(i))]
        });
        linalg::rank(&ctrb, RANK_TOL) == n
    }

    pub fn is_observable(&self, i: usize) -> bool {
        let n = self.state_dim();
        let q = self.output_dim(i);
        let mut obsv = DMatrix::zeros(q * n, n);
        let mut c_ak = self.c[i].clone();
        for k in 0..n {
            obsv.view_mut((k * q, 0), (q, n)).copy_from(&c_ak);
            c_ak = c_ak * &self.a;
        }
        linalg::rank(&obsv, RANK_TOL) == n
    }

    /// Reachability and observability findings. These degrade learning but
    /// are not hard errors.
    pub fn structural_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.agent_count() {
            if !self.is_reachable(i) {
                out.push(format!("(A, B_{i}) is not reachable"));
            }
            if !self.is_observable(i) {
                out.push(format!("(A, C_{i}) is not observable"));
            }
        }
        out
    }
}

/// `Q_ii`, `R_ii` and `R_ij` for every agent. Neighbor weights are stored in
/// ascending neighbor order, aligned with [`Digraph::neighbors`].
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: Vec<DMatrix<f64>>,
    r_self: Vec<DMatrix<f64>>,
    r_neighbor: Vec<Vec<DMatrix<f64>>>,
}

impl CostWeights {
    pub fn new(
        model: &MasModel,
        q: Vec<DMatrix<f64>>,
        r_self: Vec<DMatrix<f64>>,
        r_neighbor: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let agents = model.agent_count();
        if q.len() != agents || r_self.len() != agents || r_neighbor.len() != agents {
            return Err(Error::dims("cost weight agent count", agents, q.len()));
        }
        for i in 0..agents {
            let qi = model.output_dim(i);
            if q[i].shape() != (qi, qi) {
                return Err(Error::dims(format!("Q_{i}{i} size"), qi, q[i].nrows()));
            }
            if !linalg::is_spd(&q[i]) {
                return Err(Error::validation(format!("weights.q[{i}]"), "Q_ii not positive definite"));
            }
            let mi = model.input_dim(i);
            if r_self[i].shape() != (mi, mi) {
                return Err(Error::dims(format!("R_{i}{i} size"), mi, r_self[i].nrows()));
            }
            if !linalg::is_spd(&r_self[i]) {
                return Err(Error::validation(format!("weights.r_self[{i}]"), "R_ii not positive definite"));
            }
            let nbrs = model.neighbors(i);
            if r_neighbor[i].len() != nbrs.len() {
                return Err(Error::dims(format!("R_{i}j count"), nbrs.len(), r_neighbor[i].len()));
            }
            for (slot, &j) in nbrs.iter().enumerate() {
                let mj = model.input_dim(j);
                let rij = &r_neighbor[i][slot];
                if rij.shape() != (mj, mj) {
                    return Err(Error::dims(format!("R_{i}{j} size"), mj, rij.nrows()));
                }
                if !linalg::is_spd(rij) {
                    return Err(Error::validation(
                        format!("weights.r_neighbor[{i}][{j}]"),
                        "R_ij not positive definite",
                    ));
                }
            }
        }
        Ok(Self { q, r_self, r_neighbor })
    }

    /// `Q_ii = q I`, `R_ii = r I`, `R_ij = r_n I` for every agent and neighbor.
    pub fn uniform(model: &MasModel, q: f64, r: f64, r_n: f64) -> Result<Self> {
        let agents = model.agent_count();
        let qs = (0..agents)
            .map(|i| DMatrix::identity(model.output_dim(i), model.output_dim(i)) * q)
            .collect();
        let rs = (0..agents)
            .map(|i| DMatrix::identity(model.input_dim(i), model.input_dim(i)) * r)
            .collect();
        let rn = (0..agents)
            .map(|i| {
                model
                    .neighbors(i)
                    .into_iter()
                    .map(|j| DMatrix::identity(model.input_dim(j), model.input_dim(j)) * r_n)
                    .collect()
            })
            .collect();
        Self::new(model, qs, rs, rn)
    }

    pub fn q(&self, i: usize) -> &DMatrix<f64> {
        &self.q[i]
    }

    pub fn r_self(&self, i: usize) -> &DMatrix<f64> {
        &self.r_self[i]
    }

    /// Neighbor weights of agent `i`, in ascending neighbor order.
    pub fn r_neighbor(&self, i: usize) -> &[DMatrix<f64>] {
        &self.r_neighbor[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub followers: Vec<DVector<f64>>,
    pub leader: DVector<f64>,
    pub step: u64,
}

impl SwarmState {
    pub fn new(followers: Vec<DVector<f64>>, leader: DVector<f64>) -> Self {
        Self {
            followers,
            leader,
            step: 0,
        }
    }

    pub fn zeros(model: &MasModel) -> Self {
        let n = model.state_dim();
        Self::new(vec![DVector::zeros(n); model.agent_count()], DVector::zeros(n))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            followers: self.followers.iter().map(|x| x * factor).collect(),
            leader: &self.leader * factor,
            step: self.step,
        }
    }

    /// Largest follower-to-leader distance.
    pub fn max_disagreement(&self) -> f64 {
        self.followers
            .iter()
            .map(|x| (x - &self.leader).norm())
            .fold(0.0, f64::max)
    }
}

/// Advances every follower by `A x_i + B_i u_i` and the leader by `A x_0`.
pub fn step(model: &MasModel, state: &SwarmState, controls: &[DVector<f64>]) -> Result<SwarmState> {
    let agents = model.agent_count();
    if controls.len() != agents {
        return Err(Error::dims("control count", agents, controls.len()));
    }
    if state.followers.len() != agents {
        return Err(Error::dims("follower count", agents, state.followers.len()));
    }
    let n = model.state_dim();
    let mut followers = Vec::with_capacity(agents);
    for (i, (x, u)) in state.followers.iter().zip(controls).enumerate() {
        if x.len() != n {
            return Err(Error::dims(format!("state of agent {i}"), n, x.len()));
        }
        if u.len() != model.input_dim(i) {
            return Err(Error::dims(format!("control of agent {i}"), model.input_dim(i), u.len()));
        }
        followers.push(model.a() * x + model.b(i) * u);
    }
    if state.leader.len() != n {
        return Err(Error::dims("leader state", n, state.leader.len()));
    }
    Ok(SwarmState {
        followers,
        leader: model.a() * &state.leader,
        step: state.step + 1,
    })
}

/// `e_i = Σ_j a_ij (x_i - x_j) + b_i (x_i - x_0)`.
pub fn tracking_error(model: &MasModel, state: &SwarmState, i: usize) -> Result<DVector<f64>> {
    model.check_agent(i)?;
    let g = model.graph();
    let xi = &state.followers[i];
    let mut e = (xi - &state.leader) * g.pinning(i)?;
    for j in model.neighbors(i) {
        e += (xi - &state.followers[j]) * g.weight(i, j);
    }
    Ok(e)
}

pub fn tracking_errors(model: &MasModel, state: &SwarmState) -> Vec<DVector<f64>> {
    (0..model.agent_count())
        .map(|i| tracking_error(model, state, i).expect("valid agent"))
        .collect()
}

/// Input matrices of the neighborhood error dynamics
/// `e_i(k+1) = A e_i + F_i u_i + Σ_j E_ij u_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSystem {
    pub f: DMatrix<f64>,
    /// `(j, E_ij)` in ascending neighbor order.
    pub e: Vec<(usize, DMatrix<f64>)>,
}

pub fn error_system_matrices(model: &MasModel, i: usize) -> Result<ErrorSystem> {
    model.check_agent(i)?;
    let g = model.graph();
    let f = model.b(i) * (g.in_degree(i)? + g.pinning(i)?);
    let e = model
        .neighbors(i)
        .into_iter()
        .map(|j| (j, model.b(j) * (-g.weight(i, j))))
        .collect();
    Ok(ErrorSystem { f, e })
}

pub fn error_output(model: &MasModel, i: usize, e: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_agent(i)?;
    if e.len() != model.state_dim() {
        return Err(Error::dims("tracking error", model.state_dim(), e.len()));
    }
    Ok(model.c(i) * e)
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

/// `r_i = yᵀQ_ii y + u_iᵀR_ii u_i + Σ_j u_jᵀR_ij u_j`, neighbor controls in
/// ascending neighbor order.
pub fn stage_cost(
    weights: &CostWeights,
    i: usize,
    y: &DVector<f64>,
    u: &DVector<f64>,
    neighbor_controls: &[DVector<f64>],
) -> Result<f64> {
    if i >= weights.q.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            count: weights.q.len(),
        });
    }
    let q = weights.q(i);
    let r = weights.r_self(i);
    if y.len() != q.nrows() {
        return Err(Error::dims("output", q.nrows(), y.len()));
    }
    if u.len() != r.nrows() {
        return Err(Error::dims("own control", r.nrows(), u.len()));
    }
    let rn = weights.r_neighbor(i);
    if neighbor_controls.len() != rn.len() {
        return Err(Error::dims("neighbor control count", rn.len(), neighbor_controls.len()));
    }
    let mut cost = quad(q, y) + quad(r, u);
    for (rij, uj) in rn.iter().zip(neighbor_controls) {
        if uj.len() != rij.nrows() {
            return Err(Error::dims("neighbor control", rij.nrows(), uj.len()));
        }
        cost += quad(rij, uj);
    }
    Ok(cost)
}

/// Measured signals of a closed-loop run. At decision time `k` the history
/// holds outputs and errors for steps `0..=k` and controls for `0..k`.
///
/// Errors are ground truth kept for oracles and diagnostics; data-based
/// policies read only controls and outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoHistory {
    outputs: Vec<Vec<DVector<f64>>>,
    errors: Vec<Vec<DVector<f64>>>,
    controls: Vec<Vec<DVector<f64>>>,
}

impl IoHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index of the latest measured step.
    pub fn current_step(&self) -> Option<usize> {
        self.outputs.len().checked_sub(1)
    }

    pub fn measured_steps(&self) -> usize {
        self.outputs.len()
    }

    pub fn recorded_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn output(&self, i: usize, k: usize) -> &DVector<f64> {
        &self.outputs[k][i]
    }

    pub fn error(&self, i: usize, k: usize) -> &DVector<f64> {
        &self.errors[k][i]
    }

    pub fn control(&self, i: usize, k: usize) -> &DVector<f64> {
        &self.controls[k][i]
    }

    pub fn controls_at(&self, k: usize) -> &[DVector<f64>] {
        &self.controls[k]
    }

    pub fn errors_at(&self, k: usize) -> &[DVector<f64>] {
        &self.errors[k]
    }

    pub fn push_measurement(&mut self, errors: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>) {
        debug_assert_eq!(self.outputs.len(), self.controls.len());
        self.errors.push(errors);
        self.outputs.push(outputs);
    }

    pub fn push_controls(&mut self, controls: Vec<DVector<f64>>) {
        debug_assert_eq!(self.outputs.len(), self.controls.len() + 1);
        self.controls.push(controls);
    }

    /// Measure the current state of the swarm.
    pub fn measure(&mut self, model: &MasModel, state: &SwarmState) {
        let errors = tracking_errors(model, state);
        let outputs = errors
            .iter()
            .enumerate()
            .map(|(i, e)| model.c(i) * e)
            .collect();
        self.push_measurement(errors, outputs);
    }
}

/// A control law for the whole swarm, evaluated once per step after the
/// step's outputs have been measured.
pub trait SwarmPolicy {
    fn controls(&self, model: &MasModel, history: &IoHistory) -> Result<Vec<DVector<f64>>>;
}

/// `u_i ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl SwarmPolicy for ZeroPolicy {
    fn controls(&self, model: &MasModel, _history: &IoHistory) -> Result<Vec<DVector<f64>>> {
        Ok(zero_controls(model))
    }
}

pub fn zero_controls(model: &MasModel) -> Vec<DVector<f64>> {
    (0..model.agent_count())
        .map(|i| DVector::zeros(model.input_dim(i)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// States at steps `0..=horizon`.
    pub states: Vec<SwarmState>,
    /// Measurements for steps `0..horizon` plus the controls applied.
    pub history: IoHistory,
}

/// States beyond this norm are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Closed-loop simulation for `horizon` steps. `hook(k, &mut controls)` may
/// modify the policy output before it is applied (exploration noise).
/// Stops early and returns `diverged = true` semantics through
/// [`Rollout::diverged`] when any state exceeds [`DIVERGENCE_NORM`].
pub fn simulate<P, H>(
    model: &MasModel,
    initial: &SwarmState,
    horizon: usize,
    policy: &P,
    mut hook: H,
) -> Result<Rollout>
where
    P: SwarmPolicy + ?Sized,
    H: FnMut(usize, &mut [DVector<f64>]),
{
    let mut history = IoHistory::new();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut state = initial.clone();
    for k in 0..horizon {
        history.measure(model, &state);
        let mut u = policy.controls(model, &history)?;
        hook(k, &mut u);
        let next = step(model, &state, &u)?;
        history.push_controls(u);
        states.push(state);
        state = next;
        if state.followers.iter().any(|x| !(x.norm() < DIVERGENCE_NORM)) {
            states.push(state);
            return Ok(Rollout { states, history });
        }
    }
    states.push(state);
    Ok(Rollout { states, history })
}

impl Rollout {
    pub fn diverged(&self) -> bool {
        self.states
            .last()
            .is_some_and(|s| s.followers.iter().any(|x| !(x.norm() < DIVERGENCE_NORM)))
    }

    /// Number of simulated steps with recorded controls.
    pub fn len(&self) -> usize {
        self.history.measured_steps()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First step at which every follower is within `tol` of the leader.
    pub fn steps_to_consensus(&self, tol: f64) -> Option<usize> {
        self.states.iter().position(|s| s.max_disagreement() <= tol)
    }

    /// Accumulated stage costs of every agent.
    pub fn costs(&self, model: &MasModel, weights: &CostWeights) -> Result<Vec<f64>> {
        if self.diverged() {
            return Ok(vec![f64::INFINITY; model.agent_count()]);
        }
        let mut out = vec![0.0; model.agent_count()];
        for k in 0..self.history.measured_steps() {
            for (i, total) in out.iter_mut().enumerate() {
                *total += self.stage_cost_at(model, weights, i, k)?;
            }
        }
        Ok(out)
    }

    fn stage_cost_at(&self, model: &MasModel, weights: &CostWeights, i: usize, k: usize) -> Result<f64> {
        let h = &self.history;
        let nbr: Vec<DVector<f64>> = model
            .neighbors(i)
            .into_iter()
            .map(|j| h.control(j, k).clone())
            .collect();
        stage_cost(weights, i, h.output(i, k), h.control(i, k), &nbr)
    }
}

/// Truncated cost of agent `i` along a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutCost {
    pub value: f64,
    pub horizon: usize,
    /// Stage cost at the final step; indicates the size of the truncated tail.
    pub last_stage: f64,
}

/// `Σ_{l < horizon} r_i(l)` along the closed loop of `policy` from `initial`.
/// Divergent runs cost `+∞`.
pub fn rollout_cost<P: SwarmPolicy + ?Sized>(
    model: &MasModel,
    weights: &CostWeights,
    policy: &P,
    initial: &SwarmState,
    horizon: usize,
    i: usize,
) -> Result<RolloutCost> {
    model.check_agent(i)?;
    if horizon == 0 {
        return Err(Error::dims("rollout horizon (>= 1)", 1, 0));
    }
    let run = simulate(model, initial, horizon, policy, |_, _| {})?;
    if run.diverged() {
        return Ok(RolloutCost {
            value: f64::INFINITY,
            horizon,
            last_stage: f64::INFINITY,
        });
    }
    let mut value = 0.0;
    let mut last_stage = 0.0;
    for k in 0..run.len() {
        last_stage = run.stage_cost_at(model, weights, i, k)?;
        value += last_stage;
    }
    Ok(RolloutCost {
        value,
        horizon,
        last_stage,
    })
}
