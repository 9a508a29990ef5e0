// Every example must run to completion.

macro_rules! example {
    ($name:ident, $path:literal) => {
        #[allow(dead_code)]
        #[path = $path]
        mod $name;

        #[test]
        fn $name() {
            $name::run().unwrap();
        }
    };
}

example!(graph_topology, "../examples/graph_topology.rs");
example!(error_estimator, "../examples/error_estimator.rs");
example!(single_agent_lqr, "../examples/single_agent_lqr.rs");
example!(ring_demo, "../examples/ring_demo.rs");
example!(value_iteration_bounds, "../examples/value_iteration_bounds.rs");
example!(nash_probe, "../examples/nash_probe.rs");
example!(scenario_files, "../examples/scenario_files.rs");
