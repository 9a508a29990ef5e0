//! Perturbs one follower's learned gains at a time and compares truncated
//! costs. A positive relative decrease means that follower could do better
//! by deviating alone.

use mas_ioql::oracle::{check_nash, NashConfig};
use mas_ioql::{learner, Result, Scenario};

pub fn run() -> Result<()> {
    let scenario = Scenario::demo();
    let outcome = learner::run(&scenario.model, &scenario.weights, &scenario.learner)?;
    outcome.require_converged()?;
    let policy = outcome.policy();
    let cfg = NashConfig {
        draws: 10,
        initial_states: 5,
        horizon: 200,
        ..NashConfig::default()
    };
    for i in 0..scenario.model.agent_count() {
        let rep = check_nash(&scenario.model, &scenario.weights, &policy, i, &cfg)?;
        println!(
            "agent {i}: worst relative decrease {:+.3e}, unstable deviations {}, within tolerance: {}",
            rep.worst_relative_decrease, rep.unstable_perturbations, rep.passed
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    run()
}
