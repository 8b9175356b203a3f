//! Whole-fleet studies built on the server loop.

use gridswarm_core::par::map_trials;
use gridswarm_core::rng;

use crate::scenario::{Scenario, ScenarioError};
use crate::server::{FleetServer, RunReport};

/// Runs `scenario` under `runs` derived seeds.
pub fn seeded_runs(scenario: &Scenario, runs: u64, base_seed: u64) -> Vec<RunReport> {
    let max_ticks = scenario.file.max_ticks;
    map_trials(runs, |i| {
        let mut server = FleetServer::new(scenario.with_seed(rng::mix64(base_seed ^ rng::mix64(i))));
        server.run(max_ticks, |_| {});
        server.report()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub robots: usize,
    pub goals: usize,
    pub goals_reached: usize,
    pub violations: u64,
    /// Ticks until the last goal was reached.
    pub makespan_ticks: u64,
    pub passed: bool,
}

/// Runs the arena template for each fleet size; only the registry differs.
pub fn scaling_study(sizes: &[usize]) -> Result<Vec<ScalingResult>, ScenarioError> {
    sizes
        .iter()
        .map(|&n| {
            let scenario = Scenario::template(n)?;
            let mut server = FleetServer::new(scenario);
            server.run(server.scenario().file.max_ticks, |_| {});
            let report = server.report();
            let makespan = report.goals.iter().filter_map(|g| g.reached_tick).max().unwrap_or(0);
            Ok(ScalingResult {
                robots: n,
                goals: report.fleet.goals,
                goals_reached: report.fleet.goals_reached,
                violations: report.fleet.violations,
                makespan_ticks: makespan,
                passed: report.passed,
            })
        })
        .collect()
}
