mod common;

use common::{c, goal, robot, run, scenario};
use gridswarm_core::robot::{Indicator, PlanarPose, Tray};
use gridswarm_core::RobotId;
use gridswarm_fleet::scenario::{Fault, Scenario};
use gridswarm_fleet::server::{DispatchError, FleetServer, GoalStatus};
use gridswarm_fleet::telemetry::{Event, Recorder, RobotMode, read_log};

fn has_event(frames: &[gridswarm_fleet::telemetry::TelemetryFrame], f: impl Fn(&Event) -> bool) -> bool {
    frames.iter().flat_map(|fr| &fr.events).any(f)
}

#[test]
fn straight_run_ends_within_a_centimetre() {
    let ticks_for = |cells: u32| {
        let s = scenario(vec![robot(1, [0, 0])], vec![goal(Some(1), [cells, 0], 0)], false);
        let mut srv = FleetServer::new(s);
        run(&mut srv, 2000);
        let report = srv.report();
        assert!(report.passed, "{report:#?}");
        let r = &report.robots[0];
        assert!(r.final_error_m < 0.01, "error {}", r.final_error_m);
        assert_eq!(r.path_length_cells, cells);
        report.goals[0].reached_tick.unwrap()
    };
    let one = ticks_for(1) as f64;
    let four = ticks_for(4) as f64;
    let ratio = four / (4.0 * one);
    println!("1 cell: {one} ticks, 4 cells: {four} ticks, ratio {ratio:.3}");
    assert!((0.8..=1.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn bundled_arena_passes() {
    let mut srv = FleetServer::new(Scenario::bundled_arena());
    let frames = run(&mut srv, 6000);
    let report = srv.report();
    assert!(report.passed, "{report:#?}");
    assert_eq!(report.fleet.goals_reached, 4);
    for r in &report.robots {
        assert!(r.final_error_m < 0.03, "{r:?}");
    }
    assert!(frames.iter().all(|f| f.robots.len() == 4));
    assert_eq!(
        frames.iter().flat_map(|f| &f.events).filter(|e| matches!(e, Event::Dropped { .. })).count(),
        2
    );
    let end = frames.last().unwrap();
    assert!(end.robots.iter().all(|r| r.mode == RobotMode::Idle));
}

#[test]
fn quiescent_after_goals() {
    let mut file = Scenario::bundled_arena().file;
    file.interactive = true;
    let mut srv = FleetServer::new(file.validate().unwrap());
    run(&mut srv, 400);
    assert!(srv.is_settled());
    let before: Vec<_> = (1..=4).map(|i| srv.robot_state(RobotId(i)).unwrap().clone()).collect();
    let frames = run(&mut srv, 200);
    assert_eq!(frames.len(), 200);
    for (i, b) in before.iter().enumerate() {
        let now = srv.robot_state(RobotId(i as u32 + 1)).unwrap();
        assert_eq!(now.encoders, b.encoders);
        assert_eq!(now.pose, b.pose);
        assert_eq!(now.indicator, Indicator::Idle);
    }
    assert!(frames.iter().all(|f| f.events.is_empty() || !has_event(std::slice::from_ref(f), |e| matches!(e, Event::Planned { .. }))));
}

#[test]
fn runs_are_byte_identical() {
    let log = || {
        let mut srv = FleetServer::new(Scenario::bundled_arena().with_seed(99));
        let mut rec = Recorder::new(Vec::new());
        srv.run(6000, |f| rec.record(f).unwrap());
        rec.into_inner()
    };
    let a = log();
    assert!(!a.is_empty());
    assert_eq!(a, log());
}

#[test]
fn different_seeds_differ() {
    let log = |seed| {
        let mut srv = FleetServer::new(Scenario::bundled_arena().with_seed(seed));
        run(&mut srv, 50).iter().map(|f| f.to_json()).collect::<Vec<_>>()
    };
    assert_ne!(log(1), log(2));
}

#[test]
fn replay_reproduces_frames() {
    let mut srv = FleetServer::new(Scenario::bundled_arena());
    let mut rec = Recorder::new(Vec::new());
    let mut frames = Vec::new();
    srv.run(6000, |f| {
        rec.record(f).unwrap();
        frames.push(f.clone());
    });
    let replayed = read_log(&rec.into_inner()[..]).unwrap();
    assert_eq!(replayed.len(), frames.len());
    for ((line, back), f) in replayed.iter().zip(&frames) {
        assert_eq!(back, f);
        assert_eq!(line, &f.to_json());
    }
}

#[test]
fn auto_dispatch_picks_nearest_idle_robot() {
    let s = scenario(vec![robot(1, [0, 0]), robot(2, [5, 4]), robot(3, [9, 0])], vec![], false);
    let mut srv = FleetServer::new(s);
    srv.tick();
    srv.dispatch_goal(None, c(6, 3), false).unwrap();
    assert_eq!(srv.goal_records()[0].robot, Some(RobotId(2)));
    // Tie at distance 4 between robots 1 and 3: lowest id wins.
    srv.dispatch_goal(None, c(4, 0), false).unwrap();
    assert_eq!(srv.goal_records()[1].robot, Some(RobotId(1)));
    assert_eq!(srv.dispatch_goal(None, c(7, 2), false), Ok(3));
    assert_eq!(srv.dispatch_goal(None, c(8, 2), false), Err(DispatchError::NoRobotAvailable));
    run(&mut srv, 2000);
    let report = srv.report();
    assert_eq!(report.fleet.goals_reached, 3);
    assert_eq!(report.fleet.violations, 0);
}

#[test]
fn dispatch_rejections() {
    let s = scenario(vec![robot(1, [0, 0]), robot(2, [1, 1]), robot(3, [0, 2])], vec![], false);
    let mut srv = FleetServer::new(s);
    srv.tick();
    assert_eq!(srv.dispatch_goal(Some(RobotId(1)), c(10, 0), false), Err(DispatchError::OutOfGrid(c(10, 0))));
    assert_eq!(srv.dispatch_goal(Some(RobotId(9)), c(5, 0), false), Err(DispatchError::UnknownRobot(RobotId(9))));
    // Parked robot occupies the cell.
    assert_eq!(srv.dispatch_goal(Some(RobotId(1)), c(1, 1), false), Err(DispatchError::GoalTaken(c(1, 1))));
    srv.dispatch_goal(Some(RobotId(1)), c(5, 0), false).unwrap();
    assert_eq!(srv.dispatch_goal(Some(RobotId(1)), c(6, 0), false), Err(DispatchError::RobotUnavailable(RobotId(1))));
    assert_eq!(srv.dispatch_goal(Some(RobotId(2)), c(5, 0), false), Err(DispatchError::GoalTaken(c(5, 0))));
    // Robot 3 at (0,2): walled off from (0,0) by the parked robot at... nothing,
    // so park robots around the corner instead.
    let s = scenario(vec![robot(1, [1, 0]), robot(2, [0, 1]), robot(3, [5, 2])], vec![], false);
    let mut srv = FleetServer::new(s);
    srv.tick();
    assert_eq!(
        srv.dispatch_goal(Some(RobotId(3)), c(0, 0), false),
        Err(DispatchError::PlanInfeasible { robot: RobotId(3), goal: c(0, 0) })
    );
    let failed = &srv.goal_records()[0];
    assert_eq!(failed.status, GoalStatus::Failed);
}

#[test]
fn drop_with_empty_tray_is_skipped() {
    let mut r = robot(1, [0, 0]);
    r.tray = Tray::Empty;
    let mut g = goal(Some(1), [2, 0], 0);
    g.drop = true;
    let mut srv = FleetServer::new(scenario(vec![r], vec![g], false));
    let frames = run(&mut srv, 2000);
    assert!(srv.report().passed);
    assert!(has_event(&frames, |e| matches!(e, Event::DropSkipped { .. })));
    assert!(!has_event(&frames, |e| matches!(e, Event::Dropped { .. })));
}

#[test]
fn drop_empties_tray() {
    let mut g = goal(Some(1), [2, 0], 0);
    g.drop = true;
    let mut srv = FleetServer::new(scenario(vec![robot(1, [0, 0])], vec![g], false));
    let frames = run(&mut srv, 2000);
    assert!(has_event(&frames, |e| matches!(e, Event::Dropped { .. })));
    assert_eq!(srv.robot_state(RobotId(1)).unwrap().tray, Tray::Empty);
}

/// Robot 1 goes from (3,0) to (3,4) and drops off the network near (3,2);
/// robot 2's pass along row 2 must be replanned around it.
#[test]
fn disconnect_mid_plan_triggers_replan() {
    let s = scenario(
        vec![robot(1, [3, 0]), robot(2, [0, 2])],
        vec![goal(Some(1), [3, 4], 0), goal(Some(2), [7, 2], 0)],
        false,
    );
    let mut srv = FleetServer::new(s);
    let mut frames = Vec::new();
    while srv.committed_cell(RobotId(1)) != Some(c(3, 2)) {
        frames.push(srv.tick());
        assert!(srv.tick_count() < 500);
    }
    srv.inject_fault(&Fault::Disconnect { robot: 1, ticks: None }).unwrap();
    frames.extend(run(&mut srv, 1500));
    let cells = frames
        .iter()
        .flat_map(|f| &f.events)
        .find_map(|e| match e {
            Event::Disconnected { robot: RobotId(1), cells } => Some(cells.clone()),
            _ => None,
        })
        .expect("disconnect detected");
    assert!(cells.contains(&c(3, 2)), "{cells:?}");
    let epochs = frames
        .iter()
        .flat_map(|f| &f.events)
        .filter(|e| matches!(e, Event::Planned { .. }))
        .count();
    assert!(epochs >= 2, "expected a replan");
    assert_eq!(srv.mode_of(RobotId(1)), Some(RobotMode::Disconnected));
    let report = srv.report();
    assert_eq!(report.fleet.violations, 0);
    assert_eq!(report.goals[1].status, GoalStatus::Reached);
    assert_eq!(report.goals[0].status, GoalStatus::Failed);
    // Robot 2 never entered a cell held by the lost robot.
    let lost_at = frames.iter().position(|f| f.events.iter().any(|e| matches!(e, Event::Disconnected { .. }))).unwrap();
    for f in &frames[lost_at..] {
        let r2 = f.robots.iter().find(|r| r.id == RobotId(2)).unwrap();
        let truth = gridswarm_core::geometry::Vec3::new(r2.truth.x, r2.truth.y, 0.0);
        let cell = srv.scenario().grid.local_to_cell(truth).unwrap();
        assert!(!cells.contains(&cell), "{cell}");
    }
}

#[test]
fn idle_robot_disconnect_does_not_replan() {
    let s = scenario(
        vec![robot(1, [5, 0]), robot(2, [0, 2])],
        vec![goal(Some(2), [7, 2], 0)],
        false,
    );
    let mut srv = FleetServer::new(s);
    let mut frames = run_ticks(&mut srv, 5);
    srv.inject_fault(&Fault::Disconnect { robot: 1, ticks: None }).unwrap();
    frames.extend(run(&mut srv, 1500));
    assert!(has_event(&frames, |e| matches!(e, Event::Disconnected { robot: RobotId(1), .. })));
    let plans = frames.iter().flat_map(|f| &f.events).filter(|e| matches!(e, Event::Planned { .. })).count();
    assert_eq!(plans, 1);
    assert!(srv.report().goals[0].status == GoalStatus::Reached);
}

fn run_ticks(srv: &mut FleetServer, n: u64) -> Vec<gridswarm_fleet::telemetry::TelemetryFrame> {
    (0..n).map(|_| srv.tick()).collect()
}

#[test]
fn reconnect_restores_robot() {
    let mut file = common::quiet(Scenario::bundled_arena().file);
    file.goals.clear();
    file.interactive = true;
    let mut srv = FleetServer::new(file.validate().unwrap());
    run_ticks(&mut srv, 3);
    srv.inject_fault(&Fault::Disconnect { robot: 2, ticks: Some(30) }).unwrap();
    let frames = run_ticks(&mut srv, 60);
    assert!(has_event(&frames, |e| matches!(e, Event::Disconnected { robot: RobotId(2), .. })));
    assert!(has_event(&frames, |e| matches!(e, Event::Reconnected { robot: RobotId(2), cell: Some(_) })));
    assert_eq!(srv.mode_of(RobotId(2)), Some(RobotMode::Idle));
    assert_eq!(srv.committed_cell(RobotId(2)), Some(c(0, 4)));
    srv.dispatch_goal(Some(RobotId(2)), c(4, 4), false).unwrap();
    run(&mut srv, 800);
    assert_eq!(srv.goal_records()[0].status, GoalStatus::Reached);
}

#[test]
fn camera_nudge_keeps_final_cells() {
    let baseline = {
        let mut srv = FleetServer::new(Scenario::bundled_arena());
        run(&mut srv, 6000);
        srv.report()
    };
    let mut file = Scenario::bundled_arena().file;
    file.faults.push(gridswarm_fleet::scenario::ScriptedFault {
        at_tick: 60,
        fault: Fault::CameraNudge { camera: 0, dx: 0.02, dy: -0.01, dz: 0.01, dyaw: 0.01 },
    });
    let mut srv = FleetServer::new(file.validate().unwrap());
    let frames = run(&mut srv, 6000);
    assert!(has_event(&frames, |e| matches!(e, Event::FaultInjected { .. })));
    let nudged = srv.report();
    assert!(nudged.passed, "{nudged:#?}");
    for (a, b) in baseline.goals.iter().zip(&nudged.goals) {
        assert_eq!((a.cell, a.robot), (b.cell, b.robot));
    }
    for id in 1..=4 {
        let truth = srv.true_pose(RobotId(id)).unwrap();
        let cell = srv.scenario().grid.local_to_cell(gridswarm_core::geometry::Vec3::new(truth.x, truth.y, 0.0)).unwrap();
        assert_eq!(Some(cell), srv.committed_cell(RobotId(id)));
    }
}

#[test]
fn ground_loss_stops_and_recovers() {
    let mut srv = FleetServer::new(Scenario::bundled_arena());
    let mut frames = run_ticks(&mut srv, 40);
    // Swing the camera away from the arena, then back.
    srv.inject_fault(&Fault::CameraNudge { camera: 0, dx: 0.0, dy: 0.0, dz: 0.0, dyaw: std::f64::consts::PI }).unwrap();
    // The last ground fix is trusted for a while before the loss is declared.
    frames.extend(run_ticks(&mut srv, gridswarm_core::localization::GROUND_LATCH_TICKS + 5));
    assert!(frames.last().unwrap().ground_lost);
    let frozen: Vec<PlanarPose> = (1..=4).map(|i| srv.true_pose(RobotId(i)).unwrap()).collect();
    frames.extend(run_ticks(&mut srv, 10));
    for (i, p) in frozen.iter().enumerate() {
        assert!(srv.true_pose(RobotId(i as u32 + 1)).unwrap().distance_to(gridswarm_core::geometry::Vec3::new(p.x, p.y, 0.0)) < 1e-9);
    }
    srv.inject_fault(&Fault::CameraNudge { camera: 0, dx: 0.0, dy: 0.0, dz: 0.0, dyaw: -std::f64::consts::PI }).unwrap();
    frames.extend(run(&mut srv, 6000));
    assert!(has_event(&frames, |e| matches!(e, Event::GroundReferenceLost)));
    assert!(has_event(&frames, |e| matches!(e, Event::GroundReferenceRestored)));
    let report = srv.report();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn hardware_fault_abandons_goal() {
    let mut file = Scenario::bundled_arena().file;
    file.faults.push(gridswarm_fleet::scenario::ScriptedFault {
        at_tick: 30,
        fault: Fault::Hardware { robot: 1 },
    });
    let mut srv = FleetServer::new(file.validate().unwrap());
    let frames = run(&mut srv, 6000);
    assert!(has_event(&frames, |e| matches!(e, Event::RobotFault { robot: RobotId(1) })));
    assert_eq!(srv.mode_of(RobotId(1)), Some(RobotMode::Fault));
    let report = srv.report();
    assert_eq!(report.fleet.violations, 0);
    assert_eq!(report.fleet.goals_reached, 3);
    assert!(!report.passed);
}

#[test]
fn pause_holds_the_barrier() {
    let mut srv = FleetServer::new(Scenario::bundled_arena());
    run_ticks(&mut srv, 20);
    srv.pause();
    run_ticks(&mut srv, 40);
    let held: Vec<_> = (1..=4).map(|i| srv.committed_cell(RobotId(i))).collect();
    let frames = run_ticks(&mut srv, 60);
    assert!(frames.iter().all(|f| f.paused));
    assert_eq!(held, (1..=4).map(|i| srv.committed_cell(RobotId(i))).collect::<Vec<_>>());
    srv.resume();
    run(&mut srv, 6000);
    assert!(srv.report().passed);
}

#[test]
fn slip_burst_is_absorbed() {
    let mut file = Scenario::bundled_arena().file;
    file.faults.push(gridswarm_fleet::scenario::ScriptedFault {
        at_tick: 10,
        fault: Fault::SlipBurst { robot: 2, sigma: 0.15, ticks: 100 },
    });
    let mut srv = FleetServer::new(file.validate().unwrap());
    run(&mut srv, 6000);
    let report = srv.report();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn unknown_fault_targets_are_rejected() {
    let mut srv = FleetServer::new(Scenario::bundled_arena());
    assert!(srv.inject_fault(&Fault::Hardware { robot: 77 }).is_err());
    assert!(srv
        .inject_fault(&Fault::CameraNudge { camera: 3, dx: 0.0, dy: 0.0, dz: 0.0, dyaw: 0.0 })
        .is_err());
}
