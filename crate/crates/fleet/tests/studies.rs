use gridswarm_fleet::scenario::Scenario;
use gridswarm_fleet::studies::{scaling_study, seeded_runs};

#[test]
fn fifty_seeded_runs_are_conflict_free() {
    let reports = seeded_runs(&Scenario::bundled_arena(), 50, 0x5EED);
    let violations: u64 = reports.iter().map(|r| r.fleet.violations).sum();
    let passed = reports.iter().filter(|r| r.passed).count();
    let worst = reports
        .iter()
        .flat_map(|r| &r.robots)
        .map(|r| r.final_error_m)
        .fold(0.0, f64::max);
    println!("50 runs: {passed} passed, {violations} violations, worst final error {worst:.4} m");
    assert_eq!(violations, 0);
    assert_eq!(passed, 50);
}

#[test]
fn seeded_runs_are_reproducible() {
    let a = seeded_runs(&Scenario::bundled_arena(), 4, 1);
    let b = seeded_runs(&Scenario::bundled_arena(), 4, 1);
    assert_eq!(a, b);
}

#[test]
fn fleet_scales_to_eight_robots() {
    let results = scaling_study(&[1, 2, 4, 8]).unwrap();
    for r in &results {
        println!(
            "N={} goals={}/{} violations={} makespan={} ticks",
            r.robots, r.goals_reached, r.goals, r.violations, r.makespan_ticks
        );
        assert!(r.passed, "{r:?}");
    }
    // The same goals finish sooner when more robots share them.
    assert!(results[2].makespan_ticks < results[0].makespan_ticks);
}
