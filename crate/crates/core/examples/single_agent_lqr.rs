//! A single follower has no neighbors, so the learned law must agree with
//! the Riccati state feedback.

use mas_ioql::oracle::{agent_lq_data, closed_loop_realization, dare_solve, StatePolicy};
use mas_ioql::{learner, presets, LearnerConfig, Result};

pub fn run() -> Result<()> {
    let (model, weights) = presets::single_follower_demo();
    let config = LearnerConfig {
        horizon: Some(2),
        seed: 11,
        ..LearnerConfig::default()
    };
    let outcome = learner::run(&model, &weights, &config)?;
    outcome.require_converged()?;
    println!("converged after {} iterations", outcome.report.iterations);

    let [a, f, q, r] = agent_lq_data(&model, &weights, 0)?;
    let dare = dare_solve(&a, &f, &q, &r)?;
    println!("Riccati solution:{}", dare.p);
    let reference = StatePolicy::greedy(&model, &weights, &[dare.p])?;
    let learned = closed_loop_realization(&model, &outcome.policy(), 2)?;
    let exact = closed_loop_realization(&model, &reference, 2)?;
    let gap = (&learned.control_map - &exact.control_map).norm() / exact.control_map.norm();
    println!("relative gap between learned and Riccati control maps: {gap:.2e}");
    Ok(())
}

fn main() -> Result<()> {
    run()
}
