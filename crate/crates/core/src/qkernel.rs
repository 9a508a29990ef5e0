//! Quadratic value kernels over the stacked I/O window and the distributed
//! policies extracted from them.
//!
//! A kernel `P̄_i` acts on `w̄_i = [ū_i, Ū_j..., ȳ_i]`. Read on the window
//! `w̄_i[k, k-N+1]` whose first entry is the undecided `u_i(k)`, the Q-value
//! `w̄ᵀP̄w̄ + u_iᵀR_ii u_i` is minimized in closed form, giving a linear law in
//! the remaining window entries. Those include the neighbors' current
//! controls, so the swarm's controls at one step are solved jointly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{IoHistory, MasModel, SwarmPolicy};
use crate::error::{Error, Result};
use crate::linalg;

/// Largest accepted condition number of `R_ii + p_uu`.
pub const MAX_GAIN_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLayout {
    pub own_dim: usize,
    /// In-neighbor ids, ascending.
    pub neighbors: Vec<usize>,
    pub neighbor_dims: Vec<usize>,
    pub output_dim: usize,
    pub horizon: usize,
}

impl KernelLayout {
    pub fn for_agent(model: &MasModel, i: usize, horizon: usize) -> Result<Self> {
        model.check_agent(i)?;
        if horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        let neighbors = model.neighbors(i);
        Ok(Self {
            own_dim: model.input_dim(i),
            neighbor_dims: neighbors.iter().map(|&j| model.input_dim(j)).collect(),
            neighbors,
            output_dim: model.output_dim(i),
            horizon,
        })
    }

    pub fn total_dim(&self) -> usize {
        (self.own_dim + self.neighbor_dims.iter().sum::<usize>() + self.output_dim) * self.horizon
    }

    /// Width of all neighbor-control coordinates.
    pub fn neighbor_width(&self) -> usize {
        self.neighbor_dims.iter().sum::<usize>() * self.horizon
    }

    pub fn neighbor_offset(&self) -> usize {
        self.own_dim * self.horizon
    }

    /// Offset of neighbor `slot` inside the neighbor block.
    pub fn neighbor_slot_offset(&self, slot: usize) -> usize {
        self.neighbor_dims[..slot].iter().sum::<usize>() * self.horizon
    }

    pub fn output_offset(&self) -> usize {
        self.neighbor_offset() + self.neighbor_width()
    }

    /// Number of independent kernel entries.
    pub fn unknowns(&self) -> usize {
        linalg::sym_dim(self.total_dim())
    }

    fn check(&self) -> Result<()> {
        if self.total_dim() == 0 || self.own_dim == 0 || self.neighbors.len() != self.neighbor_dims.len() {
            return Err(Error::validation("layout", "inconsistent kernel layout"));
        }
        Ok(())
    }
}

/// Symmetric kernel, mirrored from its upper triangle on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QKernel {
    layout: KernelLayout,
    matrix: DMatrix<f64>,
}

/// The first `m_i` rows of a kernel, split by window block.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlocks {
    pub p_uu: DMatrix<f64>,
    pub p_u_own_past: DMatrix<f64>,
    pub p_u_neighbors: DMatrix<f64>,
    pub p_u_outputs: DMatrix<f64>,
}

impl QKernel {
    pub fn zeros(layout: KernelLayout) -> Self {
        let d = layout.total_dim();
        Self {
            layout,
            matrix: DMatrix::zeros(d, d),
        }
    }

    /// Uses the upper triangle of `matrix`; the lower triangle is ignored.
    pub fn from_matrix(layout: KernelLayout, matrix: &DMatrix<f64>) -> Result<Self> {
        layout.check()?;
        let d = layout.total_dim();
        if matrix.shape() != (d, d) {
            return Err(Error::dims("kernel size", d, matrix.nrows()));
        }
        Self::from_upper(layout, &linalg::pack_upper(matrix))
    }

    /// Row-major upper triangle, diagonal included.
    pub fn from_upper(layout: KernelLayout, values: &[f64]) -> Result<Self> {
        layout.check()?;
        let d = layout.total_dim();
        if values.len() != linalg::sym_dim(d) {
            return Err(Error::dims("packed kernel entries", linalg::sym_dim(d), values.len()));
        }
        Ok(Self {
            matrix: linalg::unpack_upper(values, d),
            layout,
        })
    }

    pub fn layout(&self) -> &KernelLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn upper(&self) -> Vec<f64> {
        linalg::pack_upper(&self.matrix)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `wᵀP̄w`.
    pub fn evaluate(&self, w: &DVector<f64>) -> Result<f64> {
        if w.len() != self.dim() {
            return Err(Error::dims("data vector", self.dim(), w.len()));
        }
        Ok((w.transpose() * &self.matrix * w)[(0, 0)])
    }

    /// Frobenius distance between two kernels of the same layout.
    pub fn distance(&self, other: &QKernel) -> f64 {
        (&self.matrix - &other.matrix).norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.matrix
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn extract_blocks(&self) -> KernelBlocks {
        let m = self.layout.own_dim;
        let top = self.matrix.rows(0, m);
        let nb = self.layout.neighbor_offset();
        let out = self.layout.output_offset();
        KernelBlocks {
            p_uu: top.columns(0, m).clone_owned(),
            p_u_own_past: top.columns(m, nb - m).clone_owned(),
            p_u_neighbors: top.columns(nb, out - nb).clone_owned(),
            p_u_outputs: top.columns(out, self.dim() - out).clone_owned(),
        }
    }

    /// `−(R_ii + p_uu)^{-1}` times each cross block.
    pub fn policy_gains(&self, r_self: &DMatrix<f64>) -> Result<PolicyGains> {
        let blocks = self.extract_blocks();
        if r_self.shape() != blocks.p_uu.shape() {
            return Err(Error::dims("R_ii size", blocks.p_uu.nrows(), r_self.nrows()));
        }
        let h = linalg::symmetrize(&(r_self + &blocks.p_uu));
        let sv = h.singular_values();
        let condition = sv.max() / sv.min();
        if !(condition <= MAX_GAIN_CONDITION) {
            return Err(Error::SingularGain { condition });
        }
        let inv = h.try_inverse().ok_or(Error::SingularGain { condition })?;
        let inverted_term = linalg::symmetrize(&inv);
        Ok(PolicyGains {
            layout: self.layout.clone(),
            g_own_past: -&inverted_term * blocks.p_u_own_past,
            g_neighbors: -&inverted_term * blocks.p_u_neighbors,
            g_output: -&inverted_term * blocks.p_u_outputs,
            inverted_term,
        })
    }

    /// `wᵀP̄w + uᵀR u`, with `u` the first `m_i` entries of `w`.
    pub fn q_value(&self, r_self: &DMatrix<f64>, w: &DVector<f64>) -> Result<f64> {
        let u = w.rows(0, self.layout.own_dim.min(w.len())).clone_owned();
        Ok(self.evaluate(w)? + (u.transpose() * r_self * &u)[(0, 0)])
    }
}

/// Linear control law `u_i(k) = G_past ū_i + G_nbr Ū_j + G_y ȳ_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGains {
    pub layout: KernelLayout,
    /// Acts on `[u_i(k-1), ..., u_i(k-N+1)]`.
    #[serde(with = "linalg::rows")]
    pub g_own_past: DMatrix<f64>,
    /// Acts on `[u_j(k), ..., u_j(k-N+1)]` per neighbor, ascending.
    #[serde(with = "linalg::rows")]
    pub g_neighbors: DMatrix<f64>,
    /// Acts on `[y_i(k), ..., y_i(k-N+1)]`.
    #[serde(with = "linalg::rows")]
    pub g_output: DMatrix<f64>,
    #[serde(with = "linalg::rows")]
    pub inverted_term: DMatrix<f64>,
}

impl PolicyGains {
    /// The law of the zero kernel: `u ≡ 0`.
    pub fn zero(layout: KernelLayout, r_self: &DMatrix<f64>) -> Result<Self> {
        QKernel::zeros(layout).policy_gains(r_self)
    }

    pub fn control(
        &self,
        own_past: &DVector<f64>,
        neighbor_window: &DVector<f64>,
        output_window: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if own_past.len() != self.g_own_past.ncols() {
            return Err(Error::dims("own past controls", self.g_own_past.ncols(), own_past.len()));
        }
        if neighbor_window.len() != self.g_neighbors.ncols() {
            return Err(Error::dims("neighbor control window", self.g_neighbors.ncols(), neighbor_window.len()));
        }
        if output_window.len() != self.g_output.ncols() {
            return Err(Error::dims("output window", self.g_output.ncols(), output_window.len()));
        }
        Ok(&self.g_own_past * own_past + &self.g_neighbors * neighbor_window + &self.g_output * output_window)
    }

    /// The gain on everything after `u_i(k)` in `w̄_i[k, k-N+1]`.
    pub fn rest_gain(&self) -> DMatrix<f64> {
        let m = self.layout.own_dim;
        let widths = [self.g_own_past.ncols(), self.g_neighbors.ncols(), self.g_output.ncols()];
        let mut out = DMatrix::zeros(m, widths.iter().sum());
        out.columns_mut(0, widths[0]).copy_from(&self.g_own_past);
        out.columns_mut(widths[0], widths[1]).copy_from(&self.g_neighbors);
        out.columns_mut(widths[0] + widths[1], widths[2]).copy_from(&self.g_output);
        out
    }

    /// Columns of `g_neighbors` acting on `u_j(k)` for neighbor `slot`.
    pub fn neighbor_current_gain(&self, slot: usize) -> DMatrix<f64> {
        let off = self.layout.neighbor_slot_offset(slot);
        self.g_neighbors.columns(off, self.layout.neighbor_dims[slot]).clone_owned()
    }

    pub fn is_finite(&self) -> bool {
        [&self.g_own_past, &self.g_neighbors, &self.g_output, &self.inverted_term]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Multiplies every gain entry by `factor(entry_index)`.
    pub fn perturbed(&self, mut factor: impl FnMut() -> f64) -> Self {
        let mut out = self.clone();
        for m in [&mut out.g_own_past, &mut out.g_neighbors, &mut out.g_output] {
            m.iter_mut().for_each(|v| *v *= factor());
        }
        out
    }
}

/// How the neighbors' current controls in the policy are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    /// Solve all agents' relations jointly at every step.
    #[default]
    Exact,
    /// Use `u_j(k-1)` in place of `u_j(k)`.
    Delay,
}

impl std::str::FromStr for CouplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "delay" => Ok(Self::Delay),
            other => Err(Error::Parse(format!("unknown coupling mode `{other}` (expected exact or delay)"))),
        }
    }
}

/// Inputs of one agent's law at step `k` with the neighbors' current
/// controls left at zero: `(ū_i[k-1,k-N+1], Ū_j[k,k-N+1], ȳ_i[k,k-N+1])`.
pub fn decision_inputs(
    history: &IoHistory,
    layout: &KernelLayout,
    i: usize,
    k: usize,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let n = layout.horizon;
    let past = (1..n).map(|l| history.control(i, k - l)).collect::<Vec<_>>();
    let own = linalg::concat(&past);
    let mut nbr = DVector::zeros(layout.neighbor_width());
    let mut off = 0;
    for (&j, &mj) in layout.neighbors.iter().zip(&layout.neighbor_dims) {
        off += mj;
        for l in 1..n {
            nbr.rows_mut(off, mj).copy_from(history.control(j, k - l));
            off += mj;
        }
    }
    let outs = (0..n).map(|l| history.output(i, k - l)).collect::<Vec<_>>();
    (own, nbr, linalg::concat(&outs))
}

/// The swarm law built from every agent's [`PolicyGains`]. For the first
/// `N-1` steps the windows are incomplete and the law outputs zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPolicy {
    pub gains: Vec<PolicyGains>,
    pub coupling: CouplingMode,
}

impl DataPolicy {
    pub fn new(gains: Vec<PolicyGains>, coupling: CouplingMode) -> Self {
        Self { gains, coupling }
    }

    pub fn horizon(&self) -> usize {
        self.gains.first().map_or(1, |g| g.layout.horizon)
    }

    fn check(&self, model: &MasModel) -> Result<()> {
        if self.gains.len() != model.agent_count() {
            return Err(Error::dims("gain sets", model.agent_count(), self.gains.len()));
        }
        for (i, g) in self.gains.iter().enumerate() {
            let expected = KernelLayout::for_agent(model, i, g.layout.horizon)?;
            if g.layout != expected || g.layout.horizon != self.horizon() {
                return Err(Error::validation(format!("gains[{i}]"), "layout does not match the scenario"));
            }
        }
        Ok(())
    }
}

impl SwarmPolicy for DataPolicy {
    fn controls(&self, model: &MasModel, history: &IoHistory) -> Result<Vec<DVector<f64>>> {
        self.check(model)?;
        let agents = model.agent_count();
        let k = history.current_step().ok_or_else(|| Error::dims("measured steps", 1, 0))?;
        if k + 1 < self.horizon() {
            return Ok(crate::dynamics::zero_controls(model));
        }
        let mut base = Vec::with_capacity(agents);
        for (i, g) in self.gains.iter().enumerate() {
            let (own, nbr, out) = decision_inputs(history, &g.layout, i, k);
            base.push(g.control(&own, &nbr, &out)?);
        }
        match self.coupling {
            CouplingMode::Delay => {
                let mut out = base;
                for (i, g) in self.gains.iter().enumerate() {
                    for (slot, &j) in g.layout.neighbors.iter().enumerate() {
                        if k > 0 {
                            out[i] += g.neighbor_current_gain(slot) * history.control(j, k - 1);
                        }
                    }
                }
                Ok(out)
            }
            CouplingMode::Exact => solve_coupled(model, &self.gains, &base),
        }
    }
}

/// Solves `u_i = c_i + Σ_j G_ij u_j` for all agents at once.
fn solve_coupled(model: &MasModel, gains: &[PolicyGains], base: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let offsets: Vec<usize> = (0..model.agent_count())
        .scan(0, |acc, i| {
            let o = *acc;
            *acc += model.input_dim(i);
            Some(o)
        })
        .collect();
    let total: usize = (0..model.agent_count()).map(|i| model.input_dim(i)).sum();
    let mut system = DMatrix::identity(total, total);
    let mut rhs = DVector::zeros(total);
    for (i, g) in gains.iter().enumerate() {
        let mi = model.input_dim(i);
        rhs.rows_mut(offsets[i], mi).copy_from(&base[i]);
        for (slot, &j) in g.layout.neighbors.iter().enumerate() {
            let gij = g.neighbor_current_gain(slot);
            let mut blk = system.view_mut((offsets[i], offsets[j]), (mi, model.input_dim(j)));
            blk -= gij;
        }
    }
    let sv = system.singular_values();
    if !(sv.min() > 1e-12 * sv.max().max(1.0)) {
        return Err(Error::SingularCoupling);
    }
    let u = system.lu().solve(&rhs).ok_or(Error::SingularCoupling)?;
    Ok((0..model.agent_count())
        .map(|i| u.rows(offsets[i], model.input_dim(i)).clone_owned())
        .collect())
}
