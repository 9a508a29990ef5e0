//! Built-in systems used by the demo, the examples and the tests.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{CostWeights, MasModel};
use crate::graph::Digraph;
use crate::scenario::Scenario;

/// Rotation drift shared by the demo followers and leader.
pub fn demo_drift() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
}

/// Three followers on the directed ring 1 -> 2 -> 3 -> 1, leader pinned to
/// the first follower, full-state error outputs.
pub fn demo_model() -> MasModel {
    let graph = Digraph::ring(3, DVector::from_vec(vec![1.0, 0.0, 0.0])).expect("ring");
    let b = [[2.0, 1.0], [2.0, 3.0], [2.0, 2.0]]
        .iter()
        .map(|col| DMatrix::from_column_slice(2, 1, col))
        .collect();
    let c = vec![DMatrix::identity(2, 2); 3];
    MasModel::new(demo_drift(), b, c, graph).expect("demo model")
}

/// `Q_ii = I`, `R_ii = 2`, `R_ij = 0.1`.
pub fn demo_weights(model: &MasModel) -> CostWeights {
    CostWeights::uniform(model, 1.0, 2.0, 0.1).expect("demo weights")
}

/// Demo model and weights with learner horizon 2.
pub fn demo_scenario() -> Scenario {
    Scenario::demo()
}

/// The first demo follower alone, pinned to the leader with no neighbors.
pub fn single_follower_demo() -> (MasModel, CostWeights) {
    let graph = Digraph::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0])).expect("graph");
    let model = MasModel::new(
        demo_drift(),
        vec![DMatrix::from_column_slice(2, 1, &[2.0, 1.0])],
        vec![DMatrix::identity(2, 2)],
        graph,
    )
    .expect("model");
    let weights = CostWeights::uniform(&model, 1.0, 2.0, 0.1).expect("weights");
    (model, weights)
}

/// Scalar follower `x(k+1) = 0.5 x + u`, `y = e`, `Q = R = 1`.
pub fn scalar_system() -> (MasModel, CostWeights) {
    let graph = Digraph::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0])).expect("graph");
    let model = MasModel::new(
        DMatrix::from_element(1, 1, 0.5),
        vec![DMatrix::from_element(1, 1, 1.0)],
        vec![DMatrix::from_element(1, 1, 1.0)],
        graph,
    )
    .expect("model");
    let weights = CostWeights::uniform(&model, 1.0, 1.0, 1.0).expect("weights");
    (model, weights)
}
