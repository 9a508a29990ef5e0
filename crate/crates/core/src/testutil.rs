use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::{CostWeights, MasModel, SwarmState};

pub use crate::presets::{demo_model, scalar_system};

pub fn rotation() -> DMatrix<f64> {
    crate::presets::demo_drift()
}

pub fn col(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

pub fn demo_weights(m: &MasModel) -> CostWeights {
    crate::presets::demo_weights(m)
}

pub fn single_agent_demo() -> MasModel {
    crate::presets::single_follower_demo().0
}

pub fn random_state<R: Rng>(m: &MasModel, rng: &mut R) -> SwarmState {
    let n = m.state_dim();
    let mut v = || DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let followers = (0..m.agent_count()).map(|_| v()).collect();
    SwarmState::new(followers, v())
}
