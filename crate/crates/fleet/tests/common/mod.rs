#![allow(dead_code)]

use gridswarm_core::geometry::CellCoord;
use gridswarm_core::robot::Tray;
use gridswarm_fleet::scenario::{GoalConfig, RobotConfig, Scenario, ScenarioFile};
use gridswarm_fleet::server::FleetServer;
use gridswarm_fleet::telemetry::TelemetryFrame;

/// Bundled arena with all noise, slip and loss switched off.
pub fn quiet(mut file: ScenarioFile) -> ScenarioFile {
    for c in &mut file.cameras {
        c.noise.translation_sigma = 0.0;
        c.noise.rotation_sigma = 0.0;
        c.noise.occlusion_probability = 0.0;
    }
    file.robot_defaults.slip_sigma = 0.0;
    file.network.drop_probability = 0.0;
    file
}

pub fn robot(id: u32, start: [u32; 2]) -> RobotConfig {
    RobotConfig {
        id,
        address: format!("192.168.1.{}", 3 + id),
        tags: vec![10 * id, 10 * id + 1],
        start,
        heading: 0.0,
        tray: Tray::Loaded,
    }
}

pub fn goal(robot: Option<u32>, cell: [u32; 2], at_tick: u64) -> GoalConfig {
    GoalConfig {
        robot,
        cell,
        at_tick,
        drop: false,
    }
}

/// Arena with the given robots and goals; `noisy` keeps the bundled noise.
pub fn scenario(robots: Vec<RobotConfig>, goals: Vec<GoalConfig>, noisy: bool) -> Scenario {
    let mut file = Scenario::bundled_arena().file;
    if !noisy {
        file = quiet(file);
    }
    file.id = "test".into();
    file.robots = robots;
    file.goals = goals;
    file.validate().expect("test scenario is valid")
}

pub fn run(server: &mut FleetServer, ticks: u64) -> Vec<TelemetryFrame> {
    let mut frames = Vec::new();
    server.run(ticks, |f| frames.push(f.clone()));
    frames
}

pub fn c(col: u32, row: u32) -> CellCoord {
    CellCoord::new(col, row)
}
