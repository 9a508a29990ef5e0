//! Reconstruction of the tracking error from a finite input/output history.
//!
//! Over a horizon `N` the error expands as
//! `e(k) = A^N e(k-N) + B_N ū + Σ_j B_Nj ū_j` and the stacked outputs as
//! `ȳ = C_N e(k-N) + D_N ū + Σ_j D_Nj ū_j`. With `C_N` of full column rank,
//! `e(k-N)` can be eliminated, leaving `e(k)` as a linear map of the window.
//!
//! The learner never calls this module; it exists for validation and for
//! ground-truth diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{error_system_matrices, IoHistory, MasModel};
use crate::error::{Error, Result};
use crate::linalg::{self, RANK_TOL};

/// Block matrices of the horizon-`N` expansion. Neighbor entries are in
/// ascending neighbor order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrices {
    pub c_n: DMatrix<f64>,
    pub b_n: DMatrix<f64>,
    pub b_nj: Vec<(usize, DMatrix<f64>)>,
    pub d_n: DMatrix<f64>,
    pub d_nj: Vec<(usize, DMatrix<f64>)>,
}

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::validation("horizon", "must be at least 1"));
    }
    Ok(())
}

/// `[G, AG, ..., A^{N-1}G]`.
fn reach_blocks(a: &DMatrix<f64>, g: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let (n, m) = g.shape();
    let mut out = DMatrix::zeros(n, m * horizon);
    let mut blk = g.clone();
    for l in 0..horizon {
        out.view_mut((0, l * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    out
}

/// Block `(r, c)` is `C A^{c-r-1} G` for `c > r`, zero otherwise.
fn feedthrough_blocks(a: &DMatrix<f64>, c: &DMatrix<f64>, g: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let q = c.nrows();
    let m = g.ncols();
    let mut out = DMatrix::zeros(q * horizon, m * horizon);
    // powers[p] = C A^p G
    let mut powers = Vec::with_capacity(horizon);
    let mut ap_g = g.clone();
    for _ in 0..horizon {
        powers.push(c * &ap_g);
        ap_g = a * ap_g;
    }
    for r in 0..horizon {
        for col in (r + 1)..horizon {
            out.view_mut((r * q, col * m), (q, m)).copy_from(&powers[col - r - 1]);
        }
    }
    out
}

/// `C A^{N-1}` on top down to `C` at the bottom.
fn stacked_observability(a: &DMatrix<f64>, c: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let (q, n) = c.shape();
    let mut out = DMatrix::zeros(q * horizon, n);
    let mut blk = c.clone();
    for r in (0..horizon).rev() {
        out.view_mut((r * q, 0), (q, n)).copy_from(&blk);
        blk = blk * a;
    }
    out
}

pub fn build_block_matrices(model: &MasModel, i: usize, horizon: usize) -> Result<BlockMatrices> {
    check_horizon(horizon)?;
    let sys = error_system_matrices(model, i)?;
    let a = model.a();
    let c = model.c(i);
    Ok(BlockMatrices {
        c_n: stacked_observability(a, c, horizon),
        b_n: reach_blocks(a, &sys.f, horizon),
        b_nj: sys.e.iter().map(|(j, e)| (*j, reach_blocks(a, e, horizon))).collect(),
        d_n: feedthrough_blocks(a, c, &sys.f, horizon),
        d_nj: sys.e.iter().map(|(j, e)| (*j, feedthrough_blocks(a, c, e, horizon))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMatrices {
    pub t_own: DMatrix<f64>,
    pub t_neighbors: Vec<(usize, DMatrix<f64>)>,
    pub t_output: DMatrix<f64>,
    pub horizon: usize,
}

impl EstimatorMatrices {
    /// `[T_u, T_uj..., T_y]`, so that `e(k) = T w̄[k-1,k-N]`.
    pub fn lift(&self) -> DMatrix<f64> {
        let mut parts: Vec<&DMatrix<f64>> = vec![&self.t_own];
        parts.extend(self.t_neighbors.iter().map(|(_, t)| t));
        parts.push(&self.t_output);
        let n = self.t_own.nrows();
        let width = parts.iter().map(|p| p.ncols()).sum();
        let mut out = DMatrix::zeros(n, width);
        let mut off = 0;
        for p in parts {
            out.view_mut((0, off), (n, p.ncols())).copy_from(p);
            off += p.ncols();
        }
        out
    }
}

pub fn build_estimator(model: &MasModel, i: usize, horizon: usize) -> Result<EstimatorMatrices> {
    let blocks = build_block_matrices(model, i, horizon)?;
    let n = model.state_dim();
    let min_sv = linalg::min_singular_value(&blocks.c_n);
    if blocks.c_n.nrows() < n || min_sv < RANK_TOL {
        return Err(Error::RankDeficient {
            agent: i,
            horizon,
            min_singular: min_sv,
        });
    }
    let a_n = linalg::matrix_power(model.a(), horizon);
    let t_output = &a_n * linalg::pinv(&blocks.c_n, RANK_TOL);
    let t_own = &blocks.b_n - &t_output * &blocks.d_n;
    let t_neighbors = blocks
        .b_nj
        .iter()
        .zip(&blocks.d_nj)
        .map(|((j, b), (_, d))| (*j, b - &t_output * d))
        .collect();
    Ok(EstimatorMatrices {
        t_own,
        t_neighbors,
        t_output,
        horizon,
    })
}

/// Smallest stacking depth at which the observability matrix has rank `n`.
pub fn observability_index(model: &MasModel, i: usize) -> Result<usize> {
    model.check_agent(i)?;
    let n = model.state_dim();
    for k in 1..=n {
        let obs = stacked_observability(model.a(), model.c(i), k);
        if linalg::rank(&obs, RANK_TOL) == n {
            return Ok(k);
        }
    }
    Err(Error::NotObservable { agent: i })
}

/// Largest observability index over all agents; the default horizon.
pub fn default_horizon(model: &MasModel) -> Result<usize> {
    (0..model.agent_count())
        .map(|i| observability_index(model, i))
        .try_fold(1, |acc, k| k.map(|k| acc.max(k)))
}

/// The horizon-`N` history window ending one step before `anchor_step`.
/// Every sequence is newest first: `[v(k-1), ..., v(k-N)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IoWindow {
    pub own_controls: Vec<DVector<f64>>,
    /// `(j, [u_j(k-1), ..., u_j(k-N)])` in ascending neighbor order.
    pub neighbor_controls: Vec<(usize, Vec<DVector<f64>>)>,
    pub outputs: Vec<DVector<f64>>,
    pub anchor_step: usize,
}

impl IoWindow {
    /// Reads `w̄_i[k-1, k-N]` from a recorded history. Requires `k >= N`
    /// and controls recorded up to step `k-1`.
    pub fn from_history(
        history: &IoHistory,
        model: &MasModel,
        i: usize,
        anchor_step: usize,
        horizon: usize,
    ) -> Result<Self> {
        model.check_agent(i)?;
        check_horizon(horizon)?;
        if anchor_step < horizon || history.recorded_controls() < anchor_step {
            return Err(Error::dims(
                "recorded steps for window",
                anchor_step.max(horizon),
                history.recorded_controls(),
            ));
        }
        let steps = || (1..=horizon).map(|l| anchor_step - l);
        let own_controls = steps().map(|t| history.control(i, t).clone()).collect();
        let neighbor_controls = model
            .neighbors(i)
            .into_iter()
            .map(|j| (j, steps().map(|t| history.control(j, t).clone()).collect()))
            .collect();
        let outputs = steps().map(|t| history.output(i, t).clone()).collect();
        Ok(Self {
            own_controls,
            neighbor_controls,
            outputs,
            anchor_step,
        })
    }

    pub fn horizon(&self) -> usize {
        self.outputs.len()
    }

    /// Own controls, then each neighbor's controls, then outputs.
    pub fn flatten(&self) -> DVector<f64> {
        let mut parts: Vec<&DVector<f64>> = self.own_controls.iter().collect();
        for (_, seq) in &self.neighbor_controls {
            parts.extend(seq.iter());
        }
        parts.extend(self.outputs.iter());
        linalg::concat(&parts)
    }
}

/// `T_u ū + Σ_j T_uj ū_j + T_y ȳ`.
pub fn reconstruct_error(est: &EstimatorMatrices, window: &IoWindow) -> Result<DVector<f64>> {
    if window.horizon() != est.horizon || window.own_controls.len() != est.horizon {
        return Err(Error::dims("window horizon", est.horizon, window.horizon()));
    }
    if window.neighbor_controls.len() != est.t_neighbors.len() {
        return Err(Error::dims("neighbor count", est.t_neighbors.len(), window.neighbor_controls.len()));
    }
    for ((j, seq), (tj, _)) in window.neighbor_controls.iter().zip(&est.t_neighbors) {
        if j != tj || seq.len() != est.horizon {
            return Err(Error::dims(format!("window of neighbor {j}"), est.horizon, seq.len()));
        }
    }
    let w = window.flatten();
    let lift = est.lift();
    if w.len() != lift.ncols() {
        return Err(Error::dims("flattened window", lift.ncols(), w.len()));
    }
    Ok(lift * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, ZeroPolicy};
    use crate::graph::Digraph;
    use crate::testutil::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn explored_run(model: &MasModel, seed: u64, steps: usize) -> IoHistory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = random_state(model, &mut rng);
        let run = simulate(model, &init, steps, &ZeroPolicy, |_, u| {
            for ui in u.iter_mut() {
                ui.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
        })
        .unwrap();
        run.history
    }

    fn check_exact(model: &MasModel, horizon: usize, seed: u64) {
        let h = explored_run(model, seed, 60);
        for i in 0..model.agent_count() {
            let est = build_estimator(model, i, horizon).unwrap();
            for k in horizon..h.measured_steps() {
                let w = IoWindow::from_history(&h, model, i, k, horizon).unwrap();
                let e = reconstruct_error(&est, &w).unwrap();
                let truth = h.error(i, k);
                assert!((e - truth).norm() <= 1e-8 * (1.0 + truth.norm()));
            }
        }
    }

    #[test]
    fn block_examples() {
        let m = demo_model();
        let b = build_block_matrices(&m, 0, 2).unwrap();
        assert_eq!(b.c_n, DMatrix::from_row_slice(4, 2, &[0.0, 1.0, -1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        assert_eq!(b.b_n, DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, -4.0]));
        let b1 = build_block_matrices(&m, 0, 1).unwrap();
        assert_eq!(b1.d_n, DMatrix::zeros(2, 1));
        // Zero first column and zero last row.
        assert_eq!(b.d_n.column(0).amax(), 0.0);
        assert_eq!(b.d_n.rows(2, 2).amax(), 0.0);
        assert_eq!(b.d_n.view((0, 1), (2, 1)).clone_owned(), col(&[4.0, 2.0]));
    }

    #[test]
    fn estimator_examples() {
        let m = demo_model();
        let est = build_estimator(&m, 0, 2).unwrap();
        let a_t = rotation().transpose();
        let mut expected = DMatrix::zeros(2, 4);
        expected.view_mut((0, 0), (2, 2)).copy_from(&a_t);
        expected.view_mut((0, 2), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        assert!((&est.t_output + expected * 0.5).amax() < 1e-12);

        let blocks = build_block_matrices(&m, 1, 2).unwrap();
        let est1 = build_estimator(&m, 1, 2).unwrap();
        assert!((&est1.t_output * &blocks.c_n - linalg::matrix_power(m.a(), 2)).amax() < 1e-9);

        let g = Digraph::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0])).unwrap();
        let sel = MasModel::new(rotation(), vec![col(&[1.0, 0.0])], vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0])], g).unwrap();
        assert!(matches!(build_estimator(&sel, 0, 1), Err(Error::RankDeficient { .. })));
        assert!(build_estimator(&sel, 0, 2).is_ok());
    }

    #[test]
    fn observability_index_examples() {
        assert_eq!(observability_index(&demo_model(), 0).unwrap(), 1);
        let g = Digraph::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0])).unwrap();
        let sel = MasModel::new(rotation(), vec![col(&[1.0, 0.0])], vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0])], g.clone()).unwrap();
        assert_eq!(observability_index(&sel, 0).unwrap(), 2);
        let diag = MasModel::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.7]),
            vec![col(&[1.0, 1.0])],
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0])],
            g,
        )
        .unwrap();
        assert!(matches!(observability_index(&diag, 0), Err(Error::NotObservable { agent: 0 })));
    }

    #[test]
    fn reconstruction_is_exact() {
        let m = demo_model();
        check_exact(&m, 2, 1);
        check_exact(&m, 3, 2);
        check_exact(&m, 1, 3);
    }

    #[test]
    fn reconstruction_with_partial_outputs() {
        let g = Digraph::ring(3, DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let c = vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0]); 3];
        let b = vec![col(&[2.0, 1.0]), col(&[2.0, 3.0]), col(&[2.0, 2.0])];
        let m = MasModel::new(rotation(), b, c, g).unwrap();
        check_exact(&m, 2, 4);
        check_exact(&m, 3, 5);
    }

    #[test]
    fn zero_window_reconstructs_zero() {
        let m = demo_model();
        let est = build_estimator(&m, 0, 2).unwrap();
        let z = IoWindow {
            own_controls: vec![DVector::zeros(1); 2],
            neighbor_controls: vec![(2, vec![DVector::zeros(1); 2])],
            outputs: vec![DVector::zeros(2); 2],
            anchor_step: 2,
        };
        assert_eq!(reconstruct_error(&est, &z).unwrap(), DVector::zeros(2));
        let mut bad = z.clone();
        bad.outputs.pop();
        assert!(reconstruct_error(&est, &bad).is_err());
    }

    proptest! {
        #[test]
        fn reconstruction_is_linear(seed in 0u64..500, c in -3.0f64..3.0) {
            let m = demo_model();
            let est = build_estimator(&m, 1, 2).unwrap();
            let h1 = explored_run(&m, seed, 4);
            let h2 = explored_run(&m, seed + 1000, 4);
            let w1 = IoWindow::from_history(&h1, &m, 1, 3, 2).unwrap();
            let w2 = IoWindow::from_history(&h2, &m, 1, 3, 2).unwrap();
            let lift = est.lift();
            let sum = &lift * (w1.flatten() * c + w2.flatten());
            let parts = reconstruct_error(&est, &w1).unwrap() * c + reconstruct_error(&est, &w2).unwrap();
            prop_assert!((sum - parts).amax() < 1e-10);
        }

        #[test]
        fn estimator_is_time_invariant(offset in 2usize..40) {
            // The same window content placed at different absolute steps
            // gives the same estimate.
            let m = demo_model();
            let est = build_estimator(&m, 2, 2).unwrap();
            let h = explored_run(&m, 9, 45);
            let w = IoWindow::from_history(&h, &m, 2, offset, 2).unwrap();
            let mut shifted = w.clone();
            shifted.anchor_step += 1000;
            prop_assert_eq!(reconstruct_error(&est, &w).unwrap(), reconstruct_error(&est, &shifted).unwrap());
        }
    }
}
