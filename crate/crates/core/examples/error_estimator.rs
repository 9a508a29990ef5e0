//! Reconstructing a follower's tracking error from a window of its own
//! inputs, its neighbors' inputs and its outputs.

use mas_ioql::dynamics::{simulate, SwarmState, ZeroPolicy};
use mas_ioql::estimator::{build_estimator, observability_index, reconstruct_error, IoWindow};
use mas_ioql::{presets, MasModel, Result};
use nalgebra::{DMatrix, DVector};

pub fn run() -> Result<()> {
    let full = presets::demo_model();
    // Same agents, but only the first error coordinate is measured.
    let c = vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0]); 3];
    let b = (0..3).map(|i| full.b(i).clone()).collect();
    let partial = MasModel::new(full.a().clone(), b, c, full.graph().clone())?;

    let init = SwarmState::new(
        vec![DVector::from_vec(vec![1.0, -0.5]), DVector::from_vec(vec![0.2, 0.3]), DVector::from_vec(vec![-0.7, 0.1])],
        DVector::from_vec(vec![0.5, 0.5]),
    );
    let mut t = 0.0_f64;
    let run = simulate(&partial, &init, 30, &ZeroPolicy, |_, u| {
        for (i, v) in u.iter_mut().enumerate() {
            t += 1.0;
            v[0] = (0.7 * t + i as f64).sin();
        }
    })?;

    let horizon = observability_index(&partial, 0)?;
    println!("observability index of agent 0 with one output: {horizon}");
    if let Err(e) = build_estimator(&partial, 0, horizon - 1) {
        println!("one step shorter: {e}");
    }
    let est = build_estimator(&partial, 0, horizon)?;
    let mut worst: f64 = 0.0;
    for k in horizon..run.len() {
        let window = IoWindow::from_history(&run.history, &partial, 0, k, horizon)?;
        let err = (reconstruct_error(&est, &window)? - run.history.error(0, k)).amax();
        worst = worst.max(err);
    }
    println!("worst reconstruction error over {} windows: {worst:.2e}", run.len() - horizon);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
