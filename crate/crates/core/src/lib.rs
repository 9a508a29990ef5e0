//! Data-driven optimal consensus tracking for heterogeneous discrete-time
//! linear multi-agent systems.
//!
//! Followers `x_i(k+1) = A x_i + B_i u_i` track an autonomous leader
//! `x_0(k+1) = A x_0` over a directed communication graph. Each follower
//! learns a quadratic value kernel over a window of its own inputs, its
//! neighbors' inputs and its error outputs, by value iteration on measured
//! data only. The [`oracle`] module holds model-based reference
//! computations used to verify what the learner produces.
//!
//! Typical flow:
//!
//! ```no_run
//! use mas_ioql::{learner, presets};
//!
//! let scenario = presets::demo_scenario();
//! let outcome = learner::run(&scenario.model, &scenario.weights, &scenario.learner).unwrap();
//! assert!(outcome.report.converged);
//! ```

pub mod commands;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod graph;
pub mod learner;
pub mod linalg;
pub mod oracle;
pub mod presets;
pub mod qkernel;
pub mod scenario;

#[cfg(test)]
mod testutil;

pub use dynamics::{CostWeights, MasModel, SwarmPolicy, SwarmState};
pub use error::{Error, Result};
pub use graph::Digraph;
pub use learner::{LearnerConfig, LearningReport};
pub use qkernel::{CouplingMode, DataPolicy, KernelLayout, PolicyGains, QKernel};
pub use scenario::Scenario;

