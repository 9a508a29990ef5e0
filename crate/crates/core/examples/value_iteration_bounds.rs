//! Value iteration from zero approaches the optimal value from below at a
//! rate set by how much cost a single step can hand on.

use mas_ioql::oracle::{agent_lq_data, check_value_bounds, dare_solve, estimate_theta, riccati_value_iteration, BoundCheckConfig};
use mas_ioql::{presets, Result};
use nalgebra::{DMatrix, DVector};

pub fn run() -> Result<()> {
    let model = presets::demo_model();
    let weights = presets::demo_weights(&model);
    for i in 0..model.agent_count() {
        let lq = agent_lq_data(&model, &weights, i)?;
        let [a, f, q, r] = &lq;
        let star = dare_solve(a, f, q, r)?;
        let trace = riccati_value_iteration(a, f, q, r, &DMatrix::zeros(2, 2), 500, 1e-12)?;
        let theta = estimate_theta(&lq, &star.p, 2000, i as u64)?;
        let states: Vec<DVector<f64>> = (0..24)
            .map(|t| {
                let phi = t as f64 * std::f64::consts::PI / 12.0;
                DVector::from_vec(vec![phi.cos(), phi.sin()])
            })
            .collect();
        let cfg = BoundCheckConfig { theta, alpha: 0.0, beta: 1.0 };
        let rep = check_value_bounds(&trace, &star.p, cfg, &states)?;
        println!(
            "agent {i}: theta {theta:.3}, {} iterations, bounds hold: {}, final gap {:.1e}",
            rep.iterations, rep.holds, rep.final_gap
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    run()
}
