//! The three-follower ring: learn from data, then run the closed loop.

use mas_ioql::dynamics::simulate;
use mas_ioql::oracle::check_stability;
use mas_ioql::{learner, Result, Scenario};

pub fn run() -> Result<()> {
    let scenario = Scenario::demo();
    let outcome = learner::run(&scenario.model, &scenario.weights, &scenario.learner)?;
    let report = &outcome.report;
    for rec in &report.trace {
        println!("iteration {:2}: max kernel change {:.3e}", rec.iteration, rec.max_delta);
    }
    outcome.require_converged()?;
    println!("held-out Bellman residual {:.2e}", report.held_out_residual);

    let policy = outcome.policy();
    let init = scenario.initial_state()?;
    let run = simulate(&scenario.model, &init, 60, &policy, |_, _| {})?;
    match run.steps_to_consensus(1e-2) {
        Some(k) => println!("followers within 1e-2 of the leader after {k} steps"),
        None => println!("no consensus within 60 steps"),
    }
    let stability = check_stability(&scenario.model, &policy, report.horizon, 10, 200, 3)?;
    println!(
        "closed-loop spectral radius {:.4}, worst decay ratio {:.2e}",
        stability.spectral_radius, stability.worst_decay_ratio
    );
    Ok(())
}

fn main() -> Result<()> {
    run()
}
