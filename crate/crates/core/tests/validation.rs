use mas_ioql::commands::{validate, CheckStatus, GainsFile, ValidationConfig};
use mas_ioql::oracle::{check_nash, NashConfig};
use mas_ioql::{learner, presets, LearnerConfig, MasModel, PolicyGains, KernelLayout, Scenario};
use nalgebra::DMatrix;

fn quick() -> ValidationConfig {
    ValidationConfig {
        nash: NashConfig {
            draws: 5,
            initial_states: 3,
            horizon: 150,
            ..NashConfig::default()
        },
        stability_trials: 5,
        ..ValidationConfig::default()
    }
}

fn learned_demo() -> (Scenario, GainsFile) {
    let scenario = Scenario::demo();
    let outcome = learner::run(&scenario.model, &scenario.weights, &scenario.learner).unwrap();
    assert!(outcome.report.converged);
    (scenario, GainsFile::from_outcome(&outcome))
}

#[test]
fn learned_demo_passes_model_checks() {
    let (scenario, gains) = learned_demo();
    let report = validate(&scenario, &gains, &quick()).unwrap();
    for c in &report.checks {
        if c.name != "nash_local" {
            assert_ne!(c.status, CheckStatus::Fail, "{} {:?}: {}", c.name, c.agent, c.detail);
        }
    }
    let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
    for expected in ["estimator_exactness", "kernel_vs_model", "policy_vs_model", "value_iteration_bounds", "closed_loop_stability", "nash_local"] {
        assert!(names.contains(&expected), "{expected} missing");
    }
}

#[test]
fn sign_flipped_gains_fail_stability() {
    let (scenario, mut gains) = learned_demo();
    for g in &mut gains.gains {
        g.g_own_past *= -1.0;
        g.g_neighbors *= -1.0;
        g.g_output *= -1.0;
    }
    let report = validate(&scenario, &gains, &quick()).unwrap();
    assert!(!report.passed);
    let stability = report.checks.iter().find(|c| c.name == "closed_loop_stability").unwrap();
    assert_eq!(stability.status, CheckStatus::Fail, "{}", stability.detail);
    assert!(stability.metrics["spectral_radius"] > 1.0);
}

#[test]
fn short_horizon_reports_rank_deficiency() {
    let demo = presets::demo_model();
    let c = vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0]); 3];
    let b = (0..3).map(|i| demo.b(i).clone()).collect();
    let model = MasModel::new(demo.a().clone(), b, c, demo.graph().clone()).unwrap();
    let weights = mas_ioql::CostWeights::uniform(&model, 1.0, 2.0, 0.1).unwrap();
    let gains = (0..3)
        .map(|i| PolicyGains::zero(KernelLayout::for_agent(&model, i, 1).unwrap(), weights.r_self(i)).unwrap())
        .collect();
    let scenario = Scenario {
        model,
        weights,
        ..Scenario::demo()
    };
    let file = GainsFile {
        horizon: 1,
        coupling: Default::default(),
        gains,
        kernels: Vec::new(),
    };
    let report = validate(&scenario, &file, &quick()).unwrap();
    let est: Vec<_> = report.checks.iter().filter(|c| c.name == "estimator_exactness").collect();
    assert_eq!(est.len(), 3);
    for c in est {
        assert_eq!(c.status, CheckStatus::Fail);
        assert!(c.detail.contains("rank deficient"), "{}", c.detail);
    }
}

// Without neighbors the learned law is the optimal state feedback, so no
// perturbation may lower the follower's cost. This guards the Nash probe
// itself.
#[test]
fn nash_probe_accepts_an_optimal_single_follower() {
    let (model, weights) = presets::single_follower_demo();
    let cfg = LearnerConfig {
        horizon: Some(2),
        seed: 9,
        ..LearnerConfig::default()
    };
    let outcome = learner::run(&model, &weights, &cfg).unwrap();
    let nash = NashConfig {
        draws: 20,
        initial_states: 5,
        horizon: 300,
        ..NashConfig::default()
    };
    let rep = check_nash(&model, &weights, &outcome.policy(), 0, &nash).unwrap();
    assert!(rep.passed, "worst relative decrease {}", rep.worst_relative_decrease);
}

#[test]
fn gains_file_round_trips() {
    let (_, gains) = learned_demo();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gains.json");
    std::fs::write(&path, serde_json::to_string(&gains).unwrap()).unwrap();
    assert_eq!(GainsFile::read(&path).unwrap(), gains);
}
