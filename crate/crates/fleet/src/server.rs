//! The central tick loop.
//!
//! Each tick: (1) synthesize detections, (2) localize in the ground frame,
//! (3) drive plan execution, (4) react to deviations, (5) deliver LAN
//! traffic, (6) advance robot dynamics, (7) check ground truth and emit a
//! telemetry frame.
//!
//! Plans advance in lockstep: step `s + 1` is commanded only once every
//! executing robot has reached its step-`s` cell. Replanning happens at those
//! barriers, from each robot's committed cell.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use gridswarm_core::geometry::{grid_overlay, CellCoord, GridSpec, Pose, Quat, Vec3};
use gridswarm_core::localization::{simulate_detections, LocalizationError, Localizer, SceneTruth};
use gridswarm_core::planner::{plan_fleet_with_obstacles, Plan, PlanRequest};
use gridswarm_core::robot::{waypoint_to_motion, Indicator, PlanarPose, Robot, RobotEvent, Tray};
use gridswarm_core::{rng, RobotId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lan::{Lan, LanStats};
use crate::messages::{FleetMessage, Payload, RobotCommand, RobotStatus};
use crate::protocol::{ClientMessage, HelloRobot, ServerMessage, PROTOCOL_VERSION};
use crate::scenario::{CameraSetup, Fault, Goal, Scenario};
use crate::telemetry::{
    Event, PoseRecord, RobotFrame, RobotMode, SafetyKind, SafetyViolation, TelemetryFrame,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("cell {0} lies outside the grid")]
    OutOfGrid(CellCoord),
    #[error("unknown robot {0}")]
    UnknownRobot(RobotId),
    #[error("{0} is not idle")]
    RobotUnavailable(RobotId),
    #[error("no idle robot available")]
    NoRobotAvailable,
    #[error("cell {0} is already taken")]
    GoalTaken(CellCoord),
    #[error("no path for {robot} to {goal}")]
    PlanInfeasible { robot: RobotId, goal: CellCoord },
}

impl DispatchError {
    pub fn code(&self) -> &'static str {
        match self {
            DispatchError::OutOfGrid(_) => "OutOfGrid",
            DispatchError::UnknownRobot(_) => "UnknownRobot",
            DispatchError::RobotUnavailable(_) => "RobotUnavailable",
            DispatchError::NoRobotAvailable => "NoRobotAvailable",
            DispatchError::GoalTaken(_) => "GoalTaken",
            DispatchError::PlanInfeasible { .. } => "PlanInfeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("unknown robot {0}")]
    UnknownRobot(u32),
    #[error("unknown camera {0}")]
    UnknownCamera(usize),
}

/// Consecutive failed planning attempts before a goal is abandoned.
const MAX_PLAN_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone)]
struct RobotNode {
    address: String,
    robot: Robot,
    accepted_seq: u64,
    completed_seq: u64,
    /// Sequence being executed by the motion queue or tray servo.
    running: Option<u64>,
}

#[derive(Debug, Clone)]
struct Outstanding {
    seq: u64,
    command: RobotCommand,
    sent: u64,
    acked: bool,
}

#[derive(Debug, Clone)]
struct ActiveGoal {
    cell: CellCoord,
    drop: bool,
    record: usize,
}

#[derive(Debug, Clone)]
struct Track {
    address: String,
    mode: RobotMode,
    localized: Option<PlanarPose>,
    seen_tick: Option<u64>,
    status: Option<RobotStatus>,
    last_heard: u64,
    goal: Option<ActiveGoal>,
    plan: Option<Plan>,
    committed: CellCoord,
    replan_from: Option<CellCoord>,
    outstanding: Option<Outstanding>,
    next_seq: u64,
    corrections: u32,
    deviation_ticks: u32,
    plan_attempts: u32,
    path_cells: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalStatus {
    Pending,
    Active,
    Reached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRecord {
    pub cell: CellCoord,
    pub robot: Option<RobotId>,
    pub status: GoalStatus,
    pub dispatched_tick: Option<u64>,
    pub reached_tick: Option<u64>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotReport {
    pub id: RobotId,
    pub address: String,
    pub goals_assigned: u32,
    pub goals_reached: u32,
    pub goal_reached: bool,
    pub final_error_m: f64,
    pub path_length_cells: u32,
    pub makespan_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub ticks: u64,
    pub goals: usize,
    pub goals_reached: usize,
    pub violations: u64,
    pub messages_sent: u64,
    pub messages_lost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub fleet: FleetReport,
    pub robots: Vec<RobotReport>,
    pub goals: Vec<GoalRecord>,
}

pub struct FleetServer {
    scenario: Scenario,
    tick: u64,
    nodes: BTreeMap<RobotId, RobotNode>,
    cameras: Vec<CameraSetup>,
    lan: Lan,
    inbox: Vec<FleetMessage>,
    localizer: Localizer,
    tracks: BTreeMap<RobotId, Track>,
    step: u32,
    epoch: u64,
    replan: Option<&'static str>,
    obstacles: BTreeMap<RobotId, Vec<CellCoord>>,
    paused: bool,
    ground_lost: bool,
    scripted: VecDeque<(Goal, usize)>,
    waiting: VecDeque<(Goal, usize)>,
    goals: Vec<GoalRecord>,
    next_plan_id: u64,
    events: Vec<Event>,
    violations: u64,
    prev_truth_cells: BTreeMap<RobotId, Option<CellCoord>>,
    slip_restore: Vec<(u64, RobotId)>,
    heal_at: Vec<(u64, RobotId)>,
    faults: VecDeque<(u64, Fault)>,
}

fn center(grid: &GridSpec, c: CellCoord) -> Vec3 {
    grid.cell_center_local(c).expect("cell within grid")
}

impl FleetServer {
    pub fn new(scenario: Scenario) -> Self {
        let grid = scenario.grid.clone();
        let defaults = scenario.robot_defaults().clone();
        let mut nodes = BTreeMap::new();
        let mut tracks = BTreeMap::new();
        let origin_yaw = grid.origin.yaw();
        for entry in scenario.registry.entries() {
            let start = &scenario.starts[&entry.id];
            let world = gridswarm_core::geometry::grid_to_world(&grid, start.cell).expect("validated");
            let pose = PlanarPose::new(world.x, world.y, origin_yaw + start.heading);
            let mut robot = Robot::new(
                entry.id,
                entry.params,
                defaults.gains,
                pose,
                defaults.slip_sigma,
                rng::mix64(scenario.seed() ^ rng::mix64(u64::from(entry.id.0))),
            );
            robot.state_mut().tray = start.tray;
            nodes.insert(
                entry.id,
                RobotNode {
                    address: entry.address.clone(),
                    robot,
                    accepted_seq: 0,
                    completed_seq: 0,
                    running: None,
                },
            );
            tracks.insert(
                entry.id,
                Track {
                    address: entry.address.clone(),
                    mode: RobotMode::Idle,
                    localized: None,
                    seen_tick: None,
                    status: None,
                    last_heard: 0,
                    goal: None,
                    plan: None,
                    committed: start.cell,
                    replan_from: None,
                    outstanding: None,
                    next_seq: 1,
                    corrections: 0,
                    deviation_ticks: 0,
                    plan_attempts: 0,
                    path_cells: 0,
                },
            );
        }
        let mut scripted: Vec<(Goal, usize)> = Vec::new();
        let mut goals = Vec::new();
        for g in &scenario.goals {
            scripted.push((g.clone(), goals.len()));
            goals.push(GoalRecord {
                cell: g.cell,
                robot: g.robot,
                status: GoalStatus::Pending,
                dispatched_tick: None,
                reached_tick: None,
                reason: None,
            });
        }
        scripted.sort_by_key(|(g, i)| (g.at_tick, *i));
        let mut faults: Vec<(u64, Fault)> = scenario
            .faults()
            .iter()
            .map(|f| (f.at_tick, f.fault.clone()))
            .collect();
        faults.sort_by_key(|(t, _)| *t);
        Self {
            localizer: Localizer::new(scenario.tags.clone(), scenario.cameras.len()),
            cameras: scenario.cameras.clone(),
            lan: Lan::new(scenario.network.clone()),
            scenario,
            tick: 0,
            nodes,
            inbox: Vec::new(),
            tracks,
            step: 0,
            epoch: 0,
            replan: None,
            obstacles: BTreeMap::new(),
            paused: false,
            ground_lost: false,
            scripted: scripted.into(),
            waiting: VecDeque::new(),
            goals,
            next_plan_id: 1,
            events: Vec::new(),
            violations: 0,
            prev_truth_cells: BTreeMap::new(),
            slip_restore: Vec::new(),
            heal_at: Vec::new(),
            faults: faults.into(),
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    pub fn lan_stats(&self) -> LanStats {
        self.lan.stats()
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn goal_records(&self) -> &[GoalRecord] {
        &self.goals
    }

    pub fn plan_of(&self, robot: RobotId) -> Option<&Plan> {
        self.tracks.get(&robot).and_then(|t| t.plan.as_ref())
    }

    pub fn mode_of(&self, robot: RobotId) -> Option<RobotMode> {
        self.tracks.get(&robot).map(|t| t.mode)
    }

    pub fn committed_cell(&self, robot: RobotId) -> Option<CellCoord> {
        self.tracks.get(&robot).map(|t| t.committed)
    }

    /// Simulated ground-truth pose in the ground frame.
    pub fn true_pose(&self, robot: RobotId) -> Option<PlanarPose> {
        self.nodes.get(&robot).map(|n| self.to_ground(&n.robot.state().pose))
    }

    pub fn robot_state(&self, robot: RobotId) -> Option<&gridswarm_core::robot::RobotState> {
        self.nodes.get(&robot).map(|n| n.robot.state())
    }

    /// Test hook: teleports a robot's simulated body (ground frame).
    pub fn set_true_pose(&mut self, robot: RobotId, pose: PlanarPose) {
        let world = self.to_world(&pose);
        if let Some(n) = self.nodes.get_mut(&robot) {
            n.robot.state_mut().pose = world;
        }
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            protocol: PROTOCOL_VERSION,
            scenario: self.scenario.id().to_owned(),
            tick_rate_hz: self.scenario.file.tick_rate_hz,
            cols: self.scenario.grid.cols,
            rows: self.scenario.grid.rows,
            cell_size: self.scenario.grid.cell_size,
            robots: self
                .tracks
                .iter()
                .map(|(id, t)| HelloRobot {
                    id: *id,
                    address: t.address.clone(),
                })
                .collect(),
        }
    }

    fn to_ground(&self, p: &PlanarPose) -> PlanarPose {
        let o = &self.scenario.grid.origin;
        let local = o.inverse().transform_point(Vec3::new(p.x, p.y, 0.0));
        PlanarPose::new(local.x, local.y, p.heading - o.yaw())
    }

    fn to_world(&self, p: &PlanarPose) -> PlanarPose {
        let o = &self.scenario.grid.origin;
        let w = o.transform_point(Vec3::new(p.x, p.y, 0.0));
        PlanarPose::new(w.x, w.y, p.heading + o.yaw())
    }

    fn truth_cell(&self, robot: RobotId) -> Option<CellCoord> {
        let p = self.true_pose(robot)?;
        self.scenario.grid.local_to_cell(Vec3::new(p.x, p.y, 0.0)).ok()
    }

    /// True when no goal is pending or executing and all commands are done.
    pub fn is_settled(&self) -> bool {
        self.scripted.is_empty()
            && self.waiting.is_empty()
            && self
                .tracks
                .values()
                .all(|t| t.goal.is_none() && t.outstanding.is_none())
            && self.nodes.values().all(|n| !n.robot.is_busy())
    }

    /// Runs until settled (unless interactive) or `max_ticks` ticks have run.
    pub fn run(&mut self, max_ticks: u64, mut on_frame: impl FnMut(&TelemetryFrame)) {
        for _ in 0..max_ticks {
            if !self.scenario.file.interactive && self.tick > 0 && self.is_settled() {
                break;
            }
            let frame = self.tick();
            on_frame(&frame);
        }
    }

    pub fn tick(&mut self) -> TelemetryFrame {
        let t = self.tick;
        self.apply_scripted(t);

        // (1) perception, (2) localization.
        let scene = self.scene_truth();
        let detections: Vec<_> = self
            .cameras
            .iter()
            .map(|c| simulate_detections(&scene, &c.camera, &c.noise, t))
            .collect();
        match self.localizer.localize(t, &detections) {
            Ok(frame) => {
                if self.ground_lost {
                    self.ground_lost = false;
                    self.events.push(Event::GroundReferenceRestored);
                }
                for (id, loc) in &frame.robots {
                    if let Some(track) = self.tracks.get_mut(id) {
                        let p = &loc.pose.pose;
                        track.localized = Some(PlanarPose::new(p.position.x, p.position.y, p.yaw()));
                        track.seen_tick = Some(t);
                    }
                }
            }
            Err(LocalizationError::GroundReferenceLost) | Err(_) => self.on_ground_lost(t),
        }

        // (3) execution and (4) deviation handling.
        let inbox = std::mem::take(&mut self.inbox);
        for msg in inbox {
            self.handle_server_message(msg, t);
        }
        self.check_heartbeats(t);
        self.dispatch_waiting(t);
        self.check_deviation(t);
        self.drive(t);

        // (5) LAN delivery.
        let server = self.scenario.server().address.clone();
        for msg in self.lan.deliver(t) {
            if msg.receiver == server {
                self.inbox.push(msg);
            } else if let Some(id) = self.node_by_address(&msg.receiver) {
                self.robot_receive(id, msg, t);
            }
        }

        // (6) dynamics and robot status.
        let dt = self.scenario.tick_period();
        let ids: Vec<RobotId> = self.nodes.keys().copied().collect();
        for id in ids {
            let node = self.nodes.get_mut(&id).expect("node");
            node.robot.advance(dt);
            for ev in node.robot.take_events() {
                if let RobotEvent::Dropped { x, y } = ev {
                    let g = self.to_ground(&PlanarPose::new(x, y, 0.0));
                    self.events.push(Event::Dropped { robot: id, x: g.x, y: g.y });
                }
            }
            let node = self.nodes.get_mut(&id).expect("node");
            if node.running.is_some() && !node.robot.is_busy() {
                node.completed_seq = node.completed_seq.max(node.running.take().unwrap_or(0));
            }
            let st = node.robot.state();
            let status = RobotStatus {
                encoders: st.encoders,
                battery: st.battery,
                indicator: st.indicator,
                tray: st.tray,
                accepted_seq: node.accepted_seq,
                completed_seq: node.completed_seq,
            };
            let msg = FleetMessage::new(&node.address, &server, t, Payload::Status(status));
            self.lan.send(msg, t);
        }

        // (7) safety on ground truth, telemetry.
        let violations = self.check_safety();
        self.violations += violations.len() as u64;
        let frame = self.frame(t, violations);
        self.tick += 1;
        frame
    }

    fn scene_truth(&self) -> SceneTruth {
        let robots = self
            .nodes
            .iter()
            .map(|(id, n)| {
                let p = n.robot.state().pose;
                (*id, Pose::planar(p.x, p.y, p.heading))
            })
            .collect();
        SceneTruth::new(self.scenario.tags.clone(), robots).expect("validated scene")
    }

    fn node_by_address(&self, address: &str) -> Option<RobotId> {
        self.nodes.iter().find(|(_, n)| n.address == address).map(|(id, _)| *id)
    }

    // ----- robot firmware -------------------------------------------------

    fn robot_receive(&mut self, id: RobotId, msg: FleetMessage, t: u64) {
        let Payload::Command { seq, command } = msg.payload else {
            return;
        };
        let node = self.nodes.get_mut(&id).expect("node");
        let reply = if seq <= node.accepted_seq {
            Payload::Ack { seq }
        } else {
            node.accepted_seq = seq;
            match command {
                RobotCommand::Motion { commands } => {
                    node.robot.enqueue(commands);
                    node.running = Some(seq);
                    Payload::Ack { seq }
                }
                RobotCommand::Stop => {
                    node.robot.stop();
                    node.running = None;
                    node.completed_seq = seq;
                    Payload::Ack { seq }
                }
                RobotCommand::Drop => match node.robot.request_drop() {
                    Ok(_) => {
                        node.running = Some(seq);
                        Payload::Ack { seq }
                    }
                    Err(e) => {
                        node.completed_seq = seq;
                        Payload::Error {
                            seq,
                            message: e.to_string(),
                        }
                    }
                },
            }
        };
        let m = FleetMessage::new(&node.address, &msg.sender, t, reply);
        self.lan.send(m, t);
    }

    // ----- server side ----------------------------------------------------

    fn send(&mut self, id: RobotId, command: RobotCommand, t: u64) {
        let server = self.scenario.server().address.clone();
        let track = self.tracks.get_mut(&id).expect("track");
        let seq = track.next_seq;
        track.next_seq += 1;
        track.outstanding = Some(Outstanding {
            seq,
            command: command.clone(),
            sent: t,
            acked: false,
        });
        let msg = FleetMessage::new(&server, &track.address, t, Payload::Command { seq, command });
        self.lan.send(msg, t);
    }

    fn handle_server_message(&mut self, msg: FleetMessage, t: u64) {
        let Some(id) = self.node_by_address(&msg.sender) else {
            return;
        };
        let reconnect = {
            let track = self.tracks.get_mut(&id).expect("track");
            track.last_heard = t;
            match &msg.payload {
                Payload::Ack { seq } => {
                    if let Some(o) = track.outstanding.as_mut().filter(|o| o.seq == *seq) {
                        o.acked = true;
                    }
                }
                Payload::Error { seq, message } => {
                    if track.outstanding.as_ref().is_some_and(|o| o.seq == *seq) {
                        track.outstanding = None;
                        self.events.push(Event::DropSkipped {
                            robot: id,
                            reason: message.clone(),
                        });
                    }
                }
                Payload::Status(s) => {
                    if track.outstanding.as_ref().is_some_and(|o| s.completed_seq >= o.seq) {
                        track.outstanding = None;
                    }
                    track.status = Some(s.clone());
                }
                _ => {}
            }
            track.mode == RobotMode::Disconnected
        };
        let faulted = matches!(&msg.payload, Payload::Status(s) if s.indicator == Indicator::Fault);
        if faulted && self.tracks[&id].mode != RobotMode::Fault {
            self.events.push(Event::RobotFault { robot: id });
            self.isolate(id, RobotMode::Fault, t);
        } else if reconnect && !faulted {
            self.handle_reconnect(id);
        }
    }

    fn check_heartbeats(&mut self, t: u64) {
        let timeout = self.scenario.server().heartbeat_timeout_ticks;
        let lost: Vec<RobotId> = self
            .tracks
            .iter()
            .filter(|(_, tr)| {
                matches!(tr.mode, RobotMode::Idle | RobotMode::Executing)
                    && t.saturating_sub(tr.last_heard) > timeout
            })
            .map(|(id, _)| *id)
            .collect();
        for id in lost {
            self.handle_disconnect(id, t);
        }
    }

    /// Marks a silent robot as lost: its cells become obstacles and plans
    /// crossing them are replanned at the next barrier.
    pub fn handle_disconnect(&mut self, id: RobotId, t: u64) {
        let cells = self.isolate(id, RobotMode::Disconnected, t);
        self.events.push(Event::Disconnected { robot: id, cells });
    }

    fn isolate(&mut self, id: RobotId, mode: RobotMode, t: u64) -> Vec<CellCoord> {
        let grid = self.scenario.grid.clone();
        let step = self.step;
        let track = self.tracks.get_mut(&id).expect("track");
        let mut cells = BTreeSet::new();
        cells.insert(track.committed);
        if let Some(p) = track.localized {
            if let Ok(c) = grid.local_to_cell(Vec3::new(p.x, p.y, 0.0)) {
                cells.insert(c);
            }
        }
        if let Some(plan) = &track.plan {
            cells.insert(plan.cell_at(step));
            cells.insert(plan.cell_at(step.saturating_sub(1)));
        }
        track.mode = mode;
        track.plan = None;
        track.outstanding = None;
        track.replan_from = None;
        if let Some(goal) = track.goal.take() {
            let rec = &mut self.goals[goal.record];
            rec.status = GoalStatus::Failed;
            rec.reason = Some(format!("{id} lost ({mode:?})").to_lowercase());
            self.events.push(Event::PlanFailed {
                robot: id,
                goal: goal.cell,
                reason: "robot lost".into(),
            });
        }
        let cells: Vec<CellCoord> = cells.into_iter().collect();
        self.obstacles.insert(id, cells.clone());
        let crossing = self.tracks.values().any(|tr| {
            tr.mode == RobotMode::Executing
                && tr.plan.as_ref().is_some_and(|p| {
                    p.waypoints
                        .iter()
                        .filter(|w| w.t >= step)
                        .any(|w| cells.contains(&w.cell))
                })
        });
        if crossing {
            self.replan.get_or_insert("obstacle");
        }
        let _ = t;
        cells
    }

    fn handle_reconnect(&mut self, id: RobotId) {
        let grid = self.scenario.grid.clone();
        let track = self.tracks.get_mut(&id).expect("track");
        let cell = track
            .localized
            .and_then(|p| grid.local_to_cell(Vec3::new(p.x, p.y, 0.0)).ok());
        if let Some(c) = cell {
            track.committed = c;
        }
        track.mode = RobotMode::Idle;
        track.corrections = 0;
        track.deviation_ticks = 0;
        self.obstacles.remove(&id);
        self.events.push(Event::Reconnected { robot: id, cell });
    }

    fn on_ground_lost(&mut self, t: u64) {
        if self.ground_lost {
            return;
        }
        self.ground_lost = true;
        self.events.push(Event::GroundReferenceLost);
        let ids: Vec<RobotId> = self
            .tracks
            .iter()
            .filter(|(_, tr)| matches!(tr.mode, RobotMode::Idle | RobotMode::Executing))
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            self.send(id, RobotCommand::Stop, t);
        }
    }

    fn is_idle(&self, id: RobotId) -> bool {
        self.tracks.get(&id).is_some_and(|t| {
            t.mode == RobotMode::Idle && t.goal.is_none() && t.outstanding.is_none()
        })
    }

    /// Cells nobody may plan through: parked robots and lost robots.
    fn static_obstacles(&self, except: Option<RobotId>) -> BTreeSet<CellCoord> {
        let mut cells: BTreeSet<CellCoord> = self.obstacles.values().flatten().copied().collect();
        for (id, t) in &self.tracks {
            if Some(*id) != except && t.mode == RobotMode::Idle && t.goal.is_none() {
                cells.insert(t.committed);
            }
        }
        cells
    }

    /// Assigns `goal` to `robot`, or to the nearest idle robot.
    pub fn dispatch_goal(
        &mut self,
        robot: Option<RobotId>,
        goal: CellCoord,
        drop: bool,
    ) -> Result<u64, DispatchError> {
        let record = self.goals.len();
        self.goals.push(GoalRecord {
            cell: goal,
            robot,
            status: GoalStatus::Pending,
            dispatched_tick: None,
            reached_tick: None,
            reason: None,
        });
        let result = self.try_dispatch(robot, goal, drop, record);
        if let Err(e) = &result {
            let rec = &mut self.goals[record];
            rec.status = GoalStatus::Failed;
            rec.reason = Some(e.to_string());
        }
        result
    }

    fn try_dispatch(
        &mut self,
        robot: Option<RobotId>,
        goal: CellCoord,
        drop: bool,
        record: usize,
    ) -> Result<u64, DispatchError> {
        let grid = &self.scenario.grid;
        if !grid.contains(goal) {
            return Err(DispatchError::OutOfGrid(goal));
        }
        for (id, t) in &self.tracks {
            let taken = t.goal.as_ref().is_some_and(|g| g.cell == goal)
                || (Some(*id) != robot && t.mode != RobotMode::Executing && t.committed == goal)
                || self.obstacles.get(id).is_some_and(|c| c.contains(&goal));
            if taken && Some(*id) != robot.filter(|_| t.goal.is_none()) {
                return Err(DispatchError::GoalTaken(goal));
            }
        }
        let id = match robot {
            Some(id) => {
                if !self.tracks.contains_key(&id) {
                    return Err(DispatchError::UnknownRobot(id));
                }
                if !self.is_idle(id) {
                    return Err(DispatchError::RobotUnavailable(id));
                }
                id
            }
            None => self
                .tracks
                .iter()
                .filter(|(id, _)| self.is_idle(**id))
                .min_by_key(|(id, t)| (t.committed.manhattan(goal), **id))
                .map(|(id, _)| *id)
                .ok_or(DispatchError::NoRobotAvailable)?,
        };
        let start = self.tracks[&id].committed;
        if !reachable(&self.scenario.grid, start, goal, &self.static_obstacles(Some(id))) {
            return Err(DispatchError::PlanInfeasible { robot: id, goal });
        }
        let plan_id = self.next_plan_id;
        self.next_plan_id += 1;
        let t = self.tick;
        let track = self.tracks.get_mut(&id).expect("track");
        track.goal = Some(ActiveGoal { cell: goal, drop, record });
        track.mode = RobotMode::Executing;
        track.plan = None;
        track.plan_attempts = 0;
        let rec = &mut self.goals[record];
        rec.robot = Some(id);
        rec.status = GoalStatus::Active;
        rec.dispatched_tick = Some(t);
        self.replan.get_or_insert("dispatch");
        self.events.push(Event::Dispatched {
            robot: id,
            goal,
            plan_id,
        });
        Ok(plan_id)
    }

    fn dispatch_waiting(&mut self, _t: u64) {
        while let Some((goal, record)) = self.waiting.pop_front() {
            match self.try_dispatch(goal.robot, goal.cell, goal.drop, record) {
                Ok(_) => {}
                Err(DispatchError::NoRobotAvailable) | Err(DispatchError::RobotUnavailable(_)) => {
                    self.waiting.push_front((goal, record));
                    break;
                }
                Err(e) => {
                    let rec = &mut self.goals[record];
                    rec.status = GoalStatus::Failed;
                    rec.reason = Some(e.to_string());
                    self.events.push(Event::PlanFailed {
                        robot: goal.robot.unwrap_or(RobotId(0)),
                        goal: goal.cell,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }

    fn apply_scripted(&mut self, t: u64) {
        while self.scripted.front().is_some_and(|(g, _)| g.at_tick <= t) {
            let item = self.scripted.pop_front().expect("front");
            self.waiting.push_back(item);
        }
        while self.faults.front().is_some_and(|(at, _)| *at <= t) {
            let (_, f) = self.faults.pop_front().expect("front");
            self.inject_fault(&f).expect("validated fault");
        }
        let due: Vec<(u64, RobotId)> = self.heal_at.iter().filter(|(at, _)| *at <= t).copied().collect();
        self.heal_at.retain(|(at, _)| *at > t);
        for (_, id) in due {
            let address = self.tracks[&id].address.clone();
            self.lan.heal(&address);
        }
        let due: Vec<(u64, RobotId)> =
            self.slip_restore.iter().filter(|(at, _)| *at <= t).copied().collect();
        self.slip_restore.retain(|(at, _)| *at > t);
        let sigma = self.scenario.robot_defaults().slip_sigma;
        for (_, id) in due {
            if let Some(n) = self.nodes.get_mut(&id) {
                n.robot.set_slip_sigma(sigma);
            }
        }
    }

    pub fn inject_fault(&mut self, fault: &Fault) -> Result<(), FaultError> {
        let t = self.tick;
        let robot_of = |r: u32| -> Result<RobotId, FaultError> {
            let id = RobotId(r);
            if self.nodes.contains_key(&id) {
                Ok(id)
            } else {
                Err(FaultError::UnknownRobot(r))
            }
        };
        match *fault {
            Fault::SlipBurst { robot, sigma, ticks } => {
                let id = robot_of(robot)?;
                self.nodes.get_mut(&id).expect("node").robot.set_slip_sigma(sigma);
                self.slip_restore.push((t + ticks, id));
            }
            Fault::Disconnect { robot, ticks } => {
                let id = robot_of(robot)?;
                let address = self.tracks[&id].address.clone();
                self.lan.partition(&address);
                if let Some(n) = ticks {
                    self.heal_at.push((t + n, id));
                }
            }
            Fault::Reconnect { robot } => {
                let id = robot_of(robot)?;
                let address = self.tracks[&id].address.clone();
                self.lan.heal(&address);
            }
            Fault::CameraNudge { camera, dx, dy, dz, dyaw } => {
                let cam = self
                    .cameras
                    .get_mut(camera)
                    .ok_or(FaultError::UnknownCamera(camera))?;
                let p = &mut cam.camera.pose;
                p.position += Vec3::new(dx, dy, dz);
                p.orientation = (Quat::from_yaw(dyaw) * p.orientation).normalized();
            }
            Fault::Hardware { robot } => {
                let id = robot_of(robot)?;
                self.nodes.get_mut(&id).expect("node").robot.fail();
            }
        }
        self.events.push(Event::FaultInjected {
            description: serde_json::to_string(fault).expect("fault serializes"),
        });
        Ok(())
    }

    pub fn pause(&mut self) {
        if !self.paused {
            self.paused = true;
            self.events.push(Event::Paused);
        }
    }

    pub fn resume(&mut self) {
        if self.paused {
            self.paused = false;
            self.events.push(Event::Resumed);
        }
    }

    /// Applies one operator message; the reply goes back to its sender.
    pub fn handle_client(&mut self, msg: ClientMessage) -> ServerMessage {
        let request_id = msg.request_id().map(str::to_owned);
        match msg {
            ClientMessage::Dispatch { robot, cell, drop, .. } => {
                match self.dispatch_goal(robot, cell, drop) {
                    Ok(plan_id) => ServerMessage::Ack {
                        request_id,
                        plan_id: Some(plan_id),
                    },
                    Err(e) => ServerMessage::Error {
                        request_id,
                        code: e.code().into(),
                        message: e.to_string(),
                    },
                }
            }
            ClientMessage::Pause { .. } => {
                self.pause();
                ServerMessage::Ack { request_id, plan_id: None }
            }
            ClientMessage::Resume { .. } => {
                self.resume();
                ServerMessage::Ack { request_id, plan_id: None }
            }
            ClientMessage::InjectFault { fault, .. } => match self.inject_fault(&fault) {
                Ok(()) => ServerMessage::Ack { request_id, plan_id: None },
                Err(e) => ServerMessage::Error {
                    request_id,
                    code: match e {
                        FaultError::UnknownRobot(_) => "UnknownRobot".into(),
                        FaultError::UnknownCamera(_) => "UnknownCamera".into(),
                    },
                    message: e.to_string(),
                },
            },
        }
    }

    fn localized_cell(&self, id: RobotId, t: u64) -> Option<CellCoord> {
        let tr = &self.tracks[&id];
        if tr.seen_tick != Some(t) {
            return None;
        }
        let p = tr.localized?;
        self.scenario.grid.local_to_cell(Vec3::new(p.x, p.y, 0.0)).ok()
    }

    fn check_deviation(&mut self, t: u64) {
        let limit = self.scenario.server().deviation_ticks;
        let step = self.step;
        let ids: Vec<RobotId> = self.tracks.keys().copied().collect();
        for id in ids {
            let cell = self.localized_cell(id, t);
            let track = self.tracks.get_mut(&id).expect("track");
            let (Some(plan), Some(cell)) = (&track.plan, cell) else {
                continue;
            };
            if track.mode != RobotMode::Executing {
                continue;
            }
            let expected = [plan.cell_at(step), plan.cell_at(step.saturating_sub(1))];
            if expected.contains(&cell) {
                track.deviation_ticks = 0;
                continue;
            }
            track.deviation_ticks += 1;
            if track.deviation_ticks == limit {
                track.replan_from = Some(cell);
                self.replan.get_or_insert("deviation");
                self.events.push(Event::Deviation { robot: id, cell });
            }
        }
    }

    /// Whether `id` stands on its step cell; issues a correction if not.
    fn ready(&mut self, id: RobotId, t: u64) -> bool {
        let grid = self.scenario.grid.clone();
        let tolerance = self.scenario.server().waypoint_tolerance * grid.cell_size;
        let max_corrections = self.scenario.server().max_corrections;
        let step = self.step;
        let params = self.scenario.registry.get(id).expect("registered").params;
        let fresh = self.tracks[&id].seen_tick == Some(t);
        let track = &self.tracks[&id];
        if track.outstanding.is_some() || self.nodes[&id].robot.is_busy() && track.status.is_none() {
            return false;
        }
        let target = match (&track.replan_from, &track.plan) {
            (Some(c), _) => *c,
            (None, Some(p)) => p.cell_at(step),
            (None, None) => track.committed,
        };
        let Some(pose) = track.localized.filter(|_| fresh) else {
            return false;
        };
        let goal = center(&grid, target);
        if pose.distance_to(goal) <= tolerance {
            self.tracks.get_mut(&id).expect("track").corrections = 0;
            return true;
        }
        let in_cell = grid.local_to_cell(Vec3::new(pose.x, pose.y, 0.0)).ok() == Some(target);
        if in_cell && track.corrections >= max_corrections {
            return true;
        }
        let commands = waypoint_to_motion(&pose, goal, &params);
        self.tracks.get_mut(&id).expect("track").corrections += 1;
        if commands.is_empty() {
            return in_cell;
        }
        self.send(id, RobotCommand::Motion { commands }, t);
        false
    }

    fn resend(&mut self, t: u64) {
        let timeout = self.scenario.server().ack_timeout_ticks;
        let server = self.scenario.server().address.clone();
        let mut resent = Vec::new();
        for (id, track) in self.tracks.iter_mut() {
            if let Some(o) = track.outstanding.as_mut() {
                if !o.acked && t.saturating_sub(o.sent) >= timeout {
                    o.sent = t;
                    let msg = FleetMessage::new(
                        &server,
                        &track.address,
                        t,
                        Payload::Command {
                            seq: o.seq,
                            command: o.command.clone(),
                        },
                    );
                    resent.push((*id, o.seq, msg));
                }
            }
        }
        for (id, seq, msg) in resent {
            self.lan.send(msg, t);
            self.events.push(Event::CommandResent { robot: id, seq });
        }
    }

    fn drive(&mut self, t: u64) {
        self.resend(t);
        if self.ground_lost || self.paused {
            return;
        }
        let active: Vec<RobotId> = self
            .tracks
            .iter()
            .filter(|(_, tr)| tr.mode == RobotMode::Executing)
            .map(|(id, _)| *id)
            .collect();
        let mut all_ready = true;
        for id in &active {
            // Every robot gets the chance to start its own correction.
            all_ready &= self.ready(*id, t);
        }
        if !all_ready {
            return;
        }
        self.complete_goals(t, &active);
        if self.replan.is_some() {
            self.replan_fleet(t);
        }
        let active: Vec<RobotId> = self
            .tracks
            .iter()
            .filter(|(_, tr)| tr.mode == RobotMode::Executing && tr.plan.is_some())
            .map(|(id, _)| *id)
            .collect();
        if active.is_empty() {
            return;
        }
        let horizon = active
            .iter()
            .map(|id| self.tracks[id].plan.as_ref().expect("plan").makespan())
            .max()
            .unwrap_or(0);
        if self.step >= horizon {
            return;
        }
        self.step += 1;
        let grid = self.scenario.grid.clone();
        for id in active {
            let step = self.step;
            let params = self.scenario.registry.get(id).expect("registered").params;
            let track = self.tracks.get_mut(&id).expect("track");
            let plan = track.plan.as_ref().expect("plan");
            let (from, to) = (plan.cell_at(step - 1), plan.cell_at(step));
            track.committed = to;
            track.corrections = 0;
            if from == to {
                continue;
            }
            track.path_cells += 1;
            let pose = track.localized.expect("ready implies localized");
            let commands = waypoint_to_motion(&pose, center(&grid, to), &params);
            if !commands.is_empty() {
                self.send(id, RobotCommand::Motion { commands }, t);
            }
        }
    }

    fn complete_goals(&mut self, t: u64, active: &[RobotId]) {
        let step = self.step;
        for id in active {
            let track = self.tracks.get_mut(id).expect("track");
            let (Some(plan), Some(goal)) = (&track.plan, &track.goal) else {
                continue;
            };
            if step < plan.makespan() || track.replan_from.is_some() {
                continue;
            }
            if plan.goal() != goal.cell {
                // Frozen by a failed plan: retry at this barrier.
                self.replan.get_or_insert("retry");
                continue;
            }
            let goal = track.goal.take().expect("goal");
            track.plan = None;
            track.mode = RobotMode::Idle;
            track.committed = goal.cell;
            let rec = &mut self.goals[goal.record];
            rec.status = GoalStatus::Reached;
            rec.reached_tick = Some(t);
            self.events.push(Event::GoalReached {
                robot: *id,
                goal: goal.cell,
            });
            if goal.drop {
                if self.nodes[id].robot.state().tray == Tray::Loaded {
                    self.send(*id, RobotCommand::Drop, t);
                } else {
                    self.events.push(Event::DropSkipped {
                        robot: *id,
                        reason: "tray is already empty".into(),
                    });
                }
            }
        }
    }

    fn replan_fleet(&mut self, _t: u64) {
        self.replan = None;
        let grid = self.scenario.grid.clone();
        let obstacles: Vec<CellCoord> = self.static_obstacles(None).into_iter().collect();
        let mut requests = Vec::new();
        let mut starts = BTreeSet::new();
        for (id, tr) in &self.tracks {
            let (RobotMode::Executing, Some(goal)) = (tr.mode, &tr.goal) else {
                continue;
            };
            let start = tr
                .replan_from
                .filter(|c| !obstacles.contains(c) && !starts.contains(c))
                .unwrap_or(tr.committed);
            starts.insert(start);
            requests.push(PlanRequest::new(*id, start, goal.cell));
        }
        for tr in self.tracks.values_mut() {
            tr.replan_from = None;
        }
        if requests.is_empty() {
            return;
        }
        self.epoch += 1;
        self.step = 0;
        let mut fleet = match plan_fleet_with_obstacles(&requests, &grid, &obstacles) {
            Ok(f) => f,
            Err(e) => {
                for r in &requests {
                    self.abandon(r.robot, &e.to_string());
                }
                return;
            }
        };
        let mut planned = Vec::new();
        for plan in std::mem::take(&mut fleet.plans) {
            let id = plan.robot;
            let failed = fleet.failed(id);
            let track = self.tracks.get_mut(&id).expect("track");
            track.committed = plan.start();
            track.plan = Some(plan);
            track.deviation_ticks = 0;
            if failed {
                track.plan_attempts += 1;
                if track.plan_attempts >= MAX_PLAN_ATTEMPTS {
                    self.abandon(id, "no conflict-free path");
                }
            } else {
                track.plan_attempts = 0;
                planned.push(id);
            }
        }
        if planned.is_empty() && !fleet.failures.is_empty() {
            // Nobody can move, so retrying cannot help.
            for f in fleet.failures {
                if self.tracks[&f.robot].goal.is_some() {
                    self.abandon(f.robot, &f.error.to_string());
                }
            }
        }
        self.events.push(Event::Planned {
            epoch: self.epoch,
            robots: planned,
        });
    }

    fn abandon(&mut self, id: RobotId, reason: &str) {
        let track = self.tracks.get_mut(&id).expect("track");
        track.plan = None;
        track.mode = RobotMode::Idle;
        if let Some(goal) = track.goal.take() {
            let rec = &mut self.goals[goal.record];
            rec.status = GoalStatus::Failed;
            rec.reason = Some(reason.to_owned());
            self.events.push(Event::PlanFailed {
                robot: id,
                goal: goal.cell,
                reason: reason.to_owned(),
            });
        }
    }

    fn check_safety(&mut self) -> Vec<SafetyViolation> {
        let now: BTreeMap<RobotId, Option<CellCoord>> =
            self.nodes.keys().map(|id| (*id, self.truth_cell(*id))).collect();
        let mut out = Vec::new();
        let ids: Vec<RobotId> = now.keys().copied().collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let (Some(ca), Some(cb)) = (now[a], now[b]) else {
                    continue;
                };
                if ca == cb {
                    out.push(SafetyViolation {
                        kind: SafetyKind::SameCell,
                        robots: (*a, *b),
                        cell: ca,
                    });
                    continue;
                }
                let pa = self.prev_truth_cells.get(a).copied().flatten();
                let pb = self.prev_truth_cells.get(b).copied().flatten();
                if pa == Some(cb) && pb == Some(ca) {
                    out.push(SafetyViolation {
                        kind: SafetyKind::Swap,
                        robots: (*a, *b),
                        cell: ca,
                    });
                }
            }
        }
        self.prev_truth_cells = now;
        out
    }

    fn frame(&mut self, t: u64, violations: Vec<SafetyViolation>) -> TelemetryFrame {
        let grid = &self.scenario.grid;
        let robots = self
            .tracks
            .iter()
            .map(|(id, tr)| {
                let st = self.nodes[id].robot.state();
                let truth = self.to_ground(&st.pose);
                let cell = tr
                    .localized
                    .and_then(|p| grid.local_to_cell(Vec3::new(p.x, p.y, 0.0)).ok());
                let mut plan: Vec<CellCoord> = Vec::new();
                if let Some(p) = &tr.plan {
                    for w in p.waypoints.iter().filter(|w| w.t >= self.step) {
                        if plan.last() != Some(&w.cell) {
                            plan.push(w.cell);
                        }
                    }
                }
                RobotFrame {
                    id: *id,
                    address: tr.address.clone(),
                    mode: tr.mode,
                    pose: tr.localized.map(|p| PoseRecord {
                        x: p.x,
                        y: p.y,
                        heading: p.heading,
                    }),
                    cell,
                    truth: PoseRecord {
                        x: truth.x,
                        y: truth.y,
                        heading: truth.heading,
                    },
                    indicator: st.indicator,
                    battery: st.battery,
                    tray: st.tray,
                    encoders: st.encoders,
                    goal: tr.goal.as_ref().map(|g| g.cell),
                    plan,
                }
            })
            .collect();
        let cam = &self.cameras[0];
        let overlay = grid_overlay(grid, &cam.camera.intrinsics, &cam.camera.in_world()).unwrap_or_default();
        TelemetryFrame {
            tick: t,
            time: t as f64 * self.scenario.tick_period(),
            paused: self.paused,
            ground_lost: self.ground_lost,
            robots,
            overlay,
            violations,
            events: std::mem::take(&mut self.events),
        }
    }

    pub fn report(&self) -> RunReport {
        let grid = &self.scenario.grid;
        let robots: Vec<RobotReport> = self
            .tracks
            .iter()
            .map(|(id, tr)| {
                let mine: Vec<&GoalRecord> =
                    self.goals.iter().filter(|g| g.robot == Some(*id) && g.dispatched_tick.is_some()).collect();
                let reached = mine.iter().filter(|g| g.status == GoalStatus::Reached).count() as u32;
                let target = mine.last().map(|g| g.cell).unwrap_or(tr.committed);
                let truth = self.true_pose(*id).expect("node");
                let first = mine.iter().filter_map(|g| g.dispatched_tick).min();
                let last = mine.iter().filter_map(|g| g.reached_tick).max();
                RobotReport {
                    id: *id,
                    address: tr.address.clone(),
                    goals_assigned: mine.len() as u32,
                    goals_reached: reached,
                    goal_reached: reached as usize == mine.len(),
                    final_error_m: truth.distance_to(center(grid, target)),
                    path_length_cells: tr.path_cells,
                    makespan_ticks: match (first, last) {
                        (Some(a), Some(b)) => b - a,
                        _ => 0,
                    },
                }
            })
            .collect();
        let reached = self.goals.iter().filter(|g| g.status == GoalStatus::Reached).count();
        let stats = self.lan.stats();
        RunReport {
            scenario: self.scenario.id().to_owned(),
            seed: self.scenario.seed(),
            passed: reached == self.goals.len() && self.violations == 0,
            fleet: FleetReport {
                ticks: self.tick,
                goals: self.goals.len(),
                goals_reached: reached,
                violations: self.violations,
                messages_sent: stats.sent,
                messages_lost: stats.lost + stats.partitioned,
            },
            robots,
            goals: self.goals.clone(),
        }
    }
}

/// Static 4-connected reachability avoiding `blocked` (goal included).
fn reachable(grid: &GridSpec, start: CellCoord, goal: CellCoord, blocked: &BTreeSet<CellCoord>) -> bool {
    if blocked.contains(&goal) {
        return false;
    }
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        if c == goal {
            return true;
        }
        for n in grid.neighbors(c) {
            if !blocked.contains(&n) && seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    false
}
