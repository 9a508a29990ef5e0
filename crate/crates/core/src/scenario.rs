//! Scenario files: topology, model, weights, learner settings and
//! simulation settings in one TOML document.
//!
//! Matrices are lists of rows. Per-agent matrices are lists in agent order;
//! `weights.r_neighbor[i]` lists `R_ij` for agent `i`'s in-neighbors in
//! ascending order. Agent indices are 0-based.
//!
//! ```toml
//! [graph]
//! adjacency = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
//! pinning = [1.0, 0.0, 0.0]
//!
//! [model]
//! a = [[0.0, 1.0], [-1.0, 0.0]]
//! b = [[[2.0], [1.0]], [[2.0], [3.0]], [[2.0], [2.0]]]
//! c = [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]]
//!
//! [weights]
//! q = [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]]
//! r_self = [[[2.0]], [[2.0]], [[2.0]]]
//! r_neighbor = [[[[0.1]]], [[[0.1]]], [[[0.1]]]]
//!
//! [learner]
//! horizon = 2
//! seed = 1
//!
//! [simulation]
//! horizon = 100
//! seed = 7
//! ```
//!
//! Every `[learner]` and `[simulation]` key is optional.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CostWeights, MasModel, SwarmState};
use crate::error::{Error, Result};
use crate::graph::Digraph;
use crate::learner::LearnerConfig;
use crate::linalg;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub adjacency: Rows,
    pub pinning: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub a: Rows,
    pub b: Vec<Rows>,
    pub c: Vec<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub q: Vec<Rows>,
    pub r_self: Vec<Rows>,
    pub r_neighbor: Vec<Vec<Rows>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    /// Closed-loop steps.
    pub horizon: usize,
    /// Seed for random initial states.
    pub seed: u64,
    /// Random initial coordinates are uniform on `[-range, range]`.
    pub initial_range: f64,
    /// Explicit follower states; overrides the random draw.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_followers: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_leader: Option<Vec<f64>>,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            horizon: 100,
            seed: 7,
            initial_range: 1.0,
            initial_followers: None,
            initial_leader: None,
        }
    }
}

/// On-disk form of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub graph: GraphSection,
    pub model: ModelSection,
    pub weights: WeightsSection,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: MasModel,
    pub weights: CostWeights,
    pub learner: LearnerConfig,
    pub simulation: SimulationSettings,
    pub output_dir: Option<String>,
    /// Reachability and observability findings.
    pub warnings: Vec<String>,
}

fn matrix(field: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::validation(field, "matrix is empty"));
    }
    let m = linalg::from_rows(rows).ok_or_else(|| Error::validation(field, "rows have unequal length"))?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(field, "entries must be finite"));
    }
    Ok(m)
}

fn matrices(field: &str, list: &[Rows]) -> Result<Vec<DMatrix<f64>>> {
    list.iter()
        .enumerate()
        .map(|(i, rows)| matrix(&format!("{field}[{i}]"), rows))
        .collect()
}

fn with_field(field: &str, err: Error) -> Error {
    match err {
        Error::InvalidGraph(msg) | Error::InvalidModel(msg) => Error::validation(field, msg),
        Error::DimensionMismatch { context, expected, actual } => {
            Error::validation(field, format!("{context}: expected {expected}, got {actual}"))
        }
        other => other,
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn into_scenario(self) -> Result<Scenario> {
        let adjacency = matrix("graph.adjacency", &self.graph.adjacency)?;
        let graph = Digraph::new(adjacency, DVector::from_vec(self.graph.pinning.clone()))
            .map_err(|e| with_field("graph", e))?;
        if !graph.pinning_gains().iter().any(|b| *b > 0.0) {
            return Err(Error::validation("graph.pinning", "no leader pinning"));
        }
        if !graph.is_strongly_connected() {
            return Err(Error::validation("graph.adjacency", "follower graph is not strongly connected"));
        }
        let a = matrix("model.a", &self.model.a)?;
        let b = matrices("model.b", &self.model.b)?;
        let c = matrices("model.c", &self.model.c)?;
        let model = MasModel::new(a, b, c, graph).map_err(|e| with_field("model", e))?;
        let weights = CostWeights::new(
            &model,
            matrices("weights.q", &self.weights.q)?,
            matrices("weights.r_self", &self.weights.r_self)?,
            self.weights
                .r_neighbor
                .iter()
                .enumerate()
                .map(|(i, list)| matrices(&format!("weights.r_neighbor[{i}]"), list))
                .collect::<Result<_>>()?,
        )
        .map_err(|e| with_field("weights", e))?;
        self.learner.validate(&model).map_err(|e| with_field("learner", e))?;
        let sim = &self.simulation;
        if sim.horizon == 0 {
            return Err(Error::validation("simulation.horizon", "must be at least 1"));
        }
        if !(sim.initial_range >= 0.0 && sim.initial_range.is_finite()) {
            return Err(Error::validation("simulation.initial_range", "must be finite and non-negative"));
        }
        let warnings = model.structural_warnings();
        for w in &warnings {
            log::warn!("{w}");
        }
        let scenario = Scenario {
            model,
            weights,
            learner: self.learner,
            simulation: self.simulation,
            output_dir: self.output_dir,
            warnings,
        };
        scenario.initial_state()?;
        Ok(scenario)
    }
}

fn per_agent_rows(list: impl Iterator<Item = DMatrix<f64>>) -> Vec<Rows> {
    list.map(|m| linalg::to_rows(&m)).collect()
}

impl Scenario {
    /// The bundled three-follower example.
    pub fn demo() -> Self {
        let model = crate::presets::demo_model();
        let weights = crate::presets::demo_weights(&model);
        Self {
            model,
            weights,
            learner: LearnerConfig {
                horizon: Some(2),
                seed: 1,
                ..LearnerConfig::default()
            },
            simulation: SimulationSettings::default(),
            output_dir: None,
            warnings: Vec::new(),
        }
    }

    pub fn to_file(&self) -> ScenarioFile {
        let agents = self.model.agent_count();
        let g = self.model.graph();
        ScenarioFile {
            graph: GraphSection {
                adjacency: linalg::to_rows(g.adjacency()),
                pinning: g.pinning_gains().iter().copied().collect(),
            },
            model: ModelSection {
                a: linalg::to_rows(self.model.a()),
                b: per_agent_rows((0..agents).map(|i| self.model.b(i).clone())),
                c: per_agent_rows((0..agents).map(|i| self.model.c(i).clone())),
            },
            weights: WeightsSection {
                q: per_agent_rows((0..agents).map(|i| self.weights.q(i).clone())),
                r_self: per_agent_rows((0..agents).map(|i| self.weights.r_self(i).clone())),
                r_neighbor: (0..agents)
                    .map(|i| per_agent_rows(self.weights.r_neighbor(i).iter().cloned()))
                    .collect(),
            },
            learner: self.learner.clone(),
            simulation: self.simulation.clone(),
            output_dir: self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        self.to_file().to_toml()
    }

    /// Explicit initial states when given, otherwise a seeded uniform draw.
    pub fn initial_state(&self) -> Result<SwarmState> {
        let sim = &self.simulation;
        let n = self.model.state_dim();
        let agents = self.model.agent_count();
        let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
        let range = sim.initial_range;
        let mut draw = || {
            DVector::from_fn(n, |_, _| {
                if range > 0.0 {
                    rng.random_range(-range..=range)
                } else {
                    0.0
                }
            })
        };
        let followers = match &sim.initial_followers {
            Some(list) => {
                if list.len() != agents || list.iter().any(|x| x.len() != n) {
                    return Err(Error::validation(
                        "simulation.initial_followers",
                        format!("expected {agents} states of length {n}"),
                    ));
                }
                list.iter().map(|x| DVector::from_vec(x.clone())).collect()
            }
            None => (0..agents).map(|_| draw()).collect(),
        };
        let leader = match &sim.initial_leader {
            Some(x) if x.len() != n => {
                return Err(Error::validation("simulation.initial_leader", format!("expected length {n}")));
            }
            Some(x) => DVector::from_vec(x.clone()),
            None => draw(),
        };
        Ok(SwarmState::new(followers, leader))
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    ScenarioFile::parse(text)?.into_scenario()
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BUNDLED: &str = include_str!("../scenarios/ring_demo.toml");

    #[test]
    fn bundled_file_is_the_demo() {
        assert_eq!(parse_scenario(BUNDLED).unwrap(), Scenario::demo());
    }

    #[test]
    fn round_trip() {
        let demo = Scenario::demo();
        let text = demo.to_toml().unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), demo);
        let mut odd = demo.clone();
        odd.simulation.initial_leader = Some(vec![0.1 + 0.2, -1.0 / 3.0]);
        odd.simulation.initial_followers = Some(vec![vec![1e-300, 2.5e17]; 3]);
        odd.learner.epsilon = 7.0e-5;
        let text = odd.to_toml().unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), odd);
    }

    #[test]
    fn integers_are_accepted_as_reals() {
        let text = BUNDLED.replace("r_self = [[[2.0]], [[2.0]], [[2.0]]]", "r_self = [[[2]], [[2]], [[2]]]");
        assert_eq!(parse_scenario(&text).unwrap(), Scenario::demo());
    }

    fn edited(from: &str, to: &str) -> Result<Scenario> {
        assert!(BUNDLED.contains(from), "{from}");
        parse_scenario(&BUNDLED.replace(from, to))
    }

    #[test]
    fn diagnostics_name_fields() {
        let err = edited("pinning = [1.0, 0.0, 0.0]", "pinning = [0.0, 0.0, 0.0]").unwrap_err();
        assert!(err.to_string().contains("no leader pinning"), "{err}");
        assert!(err.to_string().contains("graph.pinning"));

        let err = edited("r_self = [[[2.0]], [[2.0]], [[2.0]]]", "r_self = [[[0.0]], [[2.0]], [[2.0]]]").unwrap_err();
        assert!(err.to_string().contains("R_ii not positive definite"), "{err}");
        assert!(err.to_string().contains("weights.r_self[0]"), "{err}");

        let err = edited(
            "adjacency = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]",
            "adjacency = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]",
        )
        .unwrap_err();
        assert!(err.to_string().contains("not strongly connected"), "{err}");

        let err = edited("a = [[0.0, 1.0], [-1.0, 0.0]]", "a = [[0.0, 1.0], [-1.0]]").unwrap_err();
        assert!(err.to_string().contains("model.a"), "{err}");

        assert!(matches!(parse_scenario("[graph\nadjacency = "), Err(Error::Parse(_))));
        assert!(matches!(edited("[simulation]", "[simulation]\nbogus = 1"), Err(Error::Parse(_))));
    }

    #[test]
    fn initial_state_is_seeded() {
        let demo = Scenario::demo();
        let a = demo.initial_state().unwrap();
        assert_eq!(a, demo.initial_state().unwrap());
        assert!(a.followers.iter().all(|x| x.amax() <= 1.0));
    }
}
