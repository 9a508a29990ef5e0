//! Scenario files: load, edit, write back, and what a bad file reports.

use mas_ioql::scenario::{load_scenario, parse_scenario};
use mas_ioql::Result;

pub fn run() -> Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/ring_demo.toml");
    let mut scenario = load_scenario(path)?;
    println!(
        "{} followers, state dimension {}, learner horizon {:?}",
        scenario.model.agent_count(),
        scenario.model.state_dim(),
        scenario.learner.horizon
    );
    scenario.learner.epsilon = 1e-6;
    scenario.simulation.initial_leader = Some(vec![1.0, 0.0]);
    let text = scenario.to_toml()?;
    assert_eq!(parse_scenario(&text)?, scenario);
    println!("round trip ok ({} bytes)", text.len());

    let broken = text.replace("pinning = [1.0, 0.0, 0.0]", "pinning = [0.0, 0.0, 0.0]");
    if let Err(e) = parse_scenario(&broken) {
        println!("rejected: {e}");
    }
    Ok(())
}

fn main() -> Result<()> {
    run()
}
