//! Acceptance suite: one PASS/FAIL line per criterion, then a single verdict.

use std::process::Command;
use std::time::Instant;

use gridswarm_core::experiments::{
    camera_motion_invariance, chained_localization_error, fusion_study, multi_camera_noise,
    occlusion_invariance, planner_fuzz, planner_quality, projection_round_trip, waypoint_study,
};
use gridswarm_core::robot::{step_response, PidGains, RobotParams};
use gridswarm_fleet::scenario::Scenario;
use gridswarm_fleet::server::FleetServer;
use gridswarm_fleet::studies::seeded_runs;
use gridswarm_fleet::telemetry::Recorder;

// Pinned tolerances.
const INVARIANCE_TOL: f64 = 1e-9;
const INVARIANCE_BUDGET_S: f64 = 1.0;
const ROUND_TRIP_TOL: f64 = 1e-9;
const OCCLUSION_TOL: f64 = 1e-12;
const FUSION_TRIALS: u64 = 10_000;
const FUZZ_SCENARIOS: u64 = 500;
const SEEDED_RUNS: u64 = 50;
const QUALITY_MIN_SOLVED: f64 = 0.95;
const QUALITY_MAX_EXCESS: u32 = 4;
const WAYPOINT_TRIALS: u64 = 1000;
const WAYPOINT_SLIP: f64 = 0.02;
const WAYPOINT_CELLS: u32 = 9;
const WAYPOINT_RATIO: f64 = 0.5;
const PID_STEP_TICKS: i64 = 2329;
const PID_SETTLE_S: f64 = 3.0;
const PID_BAND_TICKS: i64 = 5;
const PID_MAX_OVERSHOOT: f64 = 0.20;
const CHAIN_TOL: f64 = 1e-9;
const CHAIN_SIGMAS_M: [f64; 3] = [0.001, 0.002, 0.004];
const SCALING_SIZES: [usize; 4] = [1, 2, 4, 8];
const FLEET_ADDRESSES: [&str; 4] = ["192.168.1.4", "192.168.1.5", "192.168.1.6", "192.168.1.7"];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let (pass, detail) = f();
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn camera_invariance() -> (bool, String) {
    let start = Instant::now();
    let r = camera_motion_invariance(1000, 11);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = r.poses == 1000
        && r.max_position_error < INVARIANCE_TOL
        && r.max_angle_error < INVARIANCE_TOL
        && elapsed < INVARIANCE_BUDGET_S;
    (
        pass,
        format!(
            "{} poses, max error {:.1e} m / {:.1e} rad in {elapsed:.3} s",
            r.poses, r.max_position_error, r.max_angle_error
        ),
    )
}

fn round_trip() -> (bool, String) {
    let e = projection_round_trip(1000, 5);
    (e < ROUND_TRIP_TOL, format!("1000 points, max error {e:.1e} m"))
}

fn occlusion() -> (bool, String) {
    let (dp, da) = occlusion_invariance();
    let fusion = fusion_study(FUSION_TRIALS, 0.002, 8);
    let pass = dp <= OCCLUSION_TOL
        && da <= OCCLUSION_TOL
        && fusion.two_tag_mean_error < fusion.one_tag_mean_error;
    (
        pass,
        format!(
            "subset change {dp:.1e} m / {da:.1e} rad; {} trials: 1 tag {:.2} mm, 2 tags {:.2} mm",
            fusion.trials,
            fusion.one_tag_mean_error * 1e3,
            fusion.two_tag_mean_error * 1e3
        ),
    )
}

fn planner_safety() -> (bool, String) {
    let fuzz = planner_fuzz(FUZZ_SCENARIOS, 10, 5, 8, 21);
    let runs = seeded_runs(&Scenario::bundled_arena(), SEEDED_RUNS, 0x5EED);
    let ground_truth: u64 = runs.iter().map(|r| r.fleet.violations).sum();
    let pass = fuzz.scenarios == FUZZ_SCENARIOS && fuzz.violations == 0 && ground_truth == 0;
    (
        pass,
        format!(
            "{} fuzz scenarios ({} robots): {} plan violations; {} seeded runs: {ground_truth} same-cell/swap events",
            fuzz.scenarios,
            fuzz.robots,
            fuzz.violations,
            runs.len()
        ),
    )
}

fn quality() -> (bool, String) {
    let r = planner_quality(3, 3);
    let pass = r.solved_ratio >= QUALITY_MIN_SOLVED && r.max_excess <= QUALITY_MAX_EXCESS;
    (
        pass,
        format!(
            "{} instances, {} solvable, solved {}/{} = {:.4}, max excess {}, mean makespan ratio {:.4}",
            r.instances,
            r.solvable,
            r.solved,
            r.solvable,
            r.solved_ratio,
            r.max_excess,
            r.mean_makespan_ratio
        ),
    )
}

fn waypoints() -> (bool, String) {
    let r = waypoint_study(
        WAYPOINT_TRIALS,
        WAYPOINT_CELLS,
        WAYPOINT_SLIP,
        &[Some(1), Some(2), Some(4), None],
        2024,
    );
    let decreasing = r.windows(2).all(|w| w[0].mean_error < w[1].mean_error);
    let pass = decreasing && r[0].mean_error < WAYPOINT_RATIO * r[3].mean_error;
    let errors: Vec<String> = r
        .iter()
        .map(|w| {
            let label = w.spacing.map_or("endpoint".to_string(), |s| s.to_string());
            format!("{label}: {:.1} mm", w.mean_error * 1e3)
        })
        .collect();
    (pass, errors.join(", "))
}

fn pid() -> (bool, String) {
    let r = step_response(&PidGains::default(), &RobotParams::default(), PID_STEP_TICKS, PID_SETTLE_S + 1.0);
    let in_band_after = r
        .samples
        .iter()
        .filter(|s| s.t > PID_SETTLE_S)
        .all(|s| s.error.abs() <= PID_BAND_TICKS);
    let pass = in_band_after
        && r.settling_time.is_some_and(|t| t <= PID_SETTLE_S)
        && r.overshoot <= PID_MAX_OVERSHOOT;
    (
        pass,
        format!(
            "{PID_STEP_TICKS}-tick step settles at {:.3} s, overshoot {:.2}%",
            r.settling_time.unwrap_or(f64::NAN),
            r.overshoot * 100.0
        ),
    )
}

fn chaining() -> (bool, String) {
    let (dp, da) = chained_localization_error();
    let r = multi_camera_noise(2000, &CHAIN_SIGMAS_M, 4);
    let monotone = r.windows(2).all(|w| w[0].median_error < w[1].median_error);
    let medians: Vec<String> = r
        .iter()
        .map(|c| format!("{} mm -> {:.2} mm", c.sigma * 1e3, c.median_error * 1e3))
        .collect();
    (
        dp < CHAIN_TOL && da < CHAIN_TOL && monotone,
        format!("noiseless {dp:.1e} m / {da:.1e} rad; medians {}", medians.join(", ")),
    )
}

fn scaling() -> (bool, String) {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut parts = Vec::new();
    let mut pass = true;
    for n in SCALING_SIZES {
        let scenario = Scenario::template(n).expect("template");
        if n == 4 {
            let addresses: Vec<&str> = scenario.registry.entries().map(|e| e.address.as_str()).collect();
            pass &= addresses == FLEET_ADDRESSES;
        }
        let path = dir.path().join(format!("n{n}.toml"));
        std::fs::write(&path, scenario.to_toml()).expect("write scenario");
        let status = Command::new(env!("CARGO_BIN_EXE_gridswarm"))
            .args(["run", "--headless", "--scenario"])
            .arg(&path)
            .output()
            .expect("binary runs")
            .status;
        pass &= status.success();
        parts.push(format!("N={n} exit {}", status.code().unwrap_or(-1)));
    }
    (pass, parts.join(", "))
}

fn determinism() -> (bool, String) {
    let log = |scenario: Scenario| {
        let mut server = FleetServer::new(scenario);
        let mut rec = Recorder::new(Vec::new());
        server.run(server.scenario().file.max_ticks, |f| rec.record(f).expect("in-memory"));
        rec.into_inner()
    };
    let mut pass = true;
    let mut sizes = Vec::new();
    for scenario in [Scenario::bundled_arena(), Scenario::template(8).expect("template")] {
        let id = scenario.id().to_owned();
        let a = log(scenario.clone());
        let b = log(scenario);
        pass &= !a.is_empty() && a == b;
        sizes.push(format!("{id}: {} bytes", a.len()));
    }
    (pass, format!("byte-identical logs ({})", sizes.join(", ")))
}

#[test]
fn acceptance() {
    let outcomes = [
        check("camera-motion invariance", camera_invariance),
        check("projection round-trip", round_trip),
        check("occlusion robustness", occlusion),
        check("planner safety", planner_safety),
        check("planner quality vs oracle", quality),
        check("waypoint density", waypoints),
        check("PID settling", pid),
        check("multi-camera chaining", chaining),
        check("scaling", scaling),
        check("determinism", determinism),
    ];
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{}: {}", o.name, o.detail))
        .collect();
    println!("{}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed: {failed:#?}");
}
