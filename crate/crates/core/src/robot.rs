//! Simulated differential-drive robot.
//!
//! Motion toward a waypoint is split into an in-place rotation followed by a
//! straight translation. Each phase is expressed as encoder-tick targets for
//! the two wheels, and each wheel runs its own PID loop against a first-order
//! lag motor. Slip perturbs ground motion only; encoders measure the motor.

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Vec3};
use crate::{rng, RobotId};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// A phase is done once both wheel errors stay within this many ticks…
pub const COMPLETION_TOLERANCE_TICKS: i64 = 3;
/// …for this many consecutive control periods.
pub const COMPLETION_HOLD_STEPS: u32 = 10;
/// Hard cap on a single phase, seconds.
pub const PHASE_TIMEOUT_S: f64 = 10.0;
/// Servo time to tip the tray, seconds.
pub const DROP_DURATION_S: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobotError {
    #[error("tray is already empty")]
    TrayEmpty,
    #[error("robot is moving")]
    NotStationary,
    #[error("robot is in fault state")]
    Faulted,
    #[error("invalid robot parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotParams {
    pub wheel_radius: f64,
    pub wheel_base: f64,
    pub ticks_per_rev: u32,
    /// Wheel speed at full command, rad/s.
    pub max_wheel_speed: f64,
    /// Side of the square footprint, meters.
    pub footprint: f64,
    /// Runtime on a full charge with motors active, hours.
    pub battery_hours: f64,
    /// First-order motor lag, seconds.
    pub motor_time_constant: f64,
    /// Period of the on-board PID loop, seconds.
    pub control_period: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            wheel_radius: 0.03,
            wheel_base: 0.12,
            ticks_per_rev: 1440,
            max_wheel_speed: 12.0,
            footprint: 0.1524,
            battery_hours: 4.0,
            motor_time_constant: 0.05,
            control_period: 0.005,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<(), RobotError> {
        let positive = [
            self.wheel_radius,
            self.wheel_base,
            self.max_wheel_speed,
            self.footprint,
            self.battery_hours,
            self.motor_time_constant,
            self.control_period,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.ticks_per_rev == 0 {
            return Err(RobotError::InvalidParams("all parameters must be positive"));
        }
        Ok(())
    }

    pub fn ticks_per_radian(&self) -> f64 {
        self.ticks_per_rev as f64 / TAU
    }

    /// Ticks per meter of wheel travel.
    pub fn ticks_per_meter(&self) -> f64 {
        self.ticks_per_rev as f64 / (TAU * self.wheel_radius)
    }
}

/// Heading wrapped to (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, 0.0)
    }

    pub fn distance_to(&self, p: Vec3) -> f64 {
        (p.x - self.x).hypot(p.y - self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Idle,
    Aligning,
    Moving,
    Dropping,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tray {
    Loaded,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: PlanarPose,
    /// Encoder counts (left, right).
    pub encoders: (i64, i64),
    /// Continuous wheel angles (left, right), radians.
    pub wheel_angles: (f64, f64),
    /// Motor speeds (left, right), rad/s.
    pub wheel_speeds: (f64, f64),
    pub battery: f64,
    pub indicator: Indicator,
    pub tray: Tray,
}

impl RobotState {
    pub fn at(pose: PlanarPose) -> Self {
        Self {
            pose,
            encoders: (0, 0),
            wheel_angles: (0.0, 0.0),
            wheel_speeds: (0.0, 0.0),
            battery: 1.0,
            indicator: Indicator::Idle,
            tray: Tray::Empty,
        }
    }

    pub fn is_stationary(&self) -> bool {
        matches!(self.indicator, Indicator::Idle | Indicator::Fault)
            && self.wheel_speeds == (0.0, 0.0)
    }

    fn motors_active(&self) -> bool {
        matches!(
            self.indicator,
            Indicator::Aligning | Indicator::Moving | Indicator::Dropping
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the error integral, tick·s.
    pub integral_clamp: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.004,
            ki: 0.0005,
            kd: 0.0008,
            integral_clamp: 10.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<(), RobotError> {
        if !(self.kp >= 0.0 && self.ki >= 0.0 && self.kd >= 0.0 && self.integral_clamp >= 0.0) {
            return Err(RobotError::InvalidParams("PID gains must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub previous_error: Option<f64>,
}

/// One PID update. Returns the saturated command in [−1, 1].
pub fn pid_step(
    gains: &PidGains,
    target: i64,
    current: i64,
    state: PidState,
    dt: f64,
) -> (f64, PidState) {
    let error = (target - current) as f64;
    let integral = (state.integral + error * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
    let derivative = state.previous_error.map_or(0.0, |p| (error - p) / dt);
    let command = (gains.kp * error + gains.ki * integral + gains.kd * derivative).clamp(-1.0, 1.0);
    (
        command,
        PidState {
            integral,
            previous_error: Some(error),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionPhase {
    Rotate,
    Translate,
}

/// Tick targets relative to the counts at the start of the phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionCommand {
    pub phase: MotionPhase,
    pub left: i64,
    pub right: i64,
}

/// Align-then-move: at most a rotation followed by a translation.
pub fn waypoint_to_motion(
    pose: &PlanarPose,
    target: Vec3,
    params: &RobotParams,
) -> Vec<MotionCommand> {
    let (dx, dy) = (target.x - pose.x, target.y - pose.y);
    let distance = dx.hypot(dy);
    let translate = (distance * params.ticks_per_meter()).round() as i64;
    if translate == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(2);
    let turn = wrap_angle(dy.atan2(dx) - pose.heading);
    let rotate = (turn * params.wheel_base / 2.0 * params.ticks_per_meter()).round() as i64;
    if rotate != 0 {
        out.push(MotionCommand {
            phase: MotionPhase::Rotate,
            left: -rotate,
            right: rotate,
        });
    }
    out.push(MotionCommand {
        phase: MotionPhase::Translate,
        left: translate,
        right: translate,
    });
    out
}

/// Multiplicative slip on ground displacement; `epsilon` is held for a
/// whole motion phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlipModel {
    pub sigma: f64,
    pub epsilon: f64,
}

impl SlipModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            epsilon: 0.0,
        }
    }

    pub fn resample(&mut self, rng: &mut impl Rng) {
        let z: f64 = rng.sample(StandardNormal);
        self.epsilon = (z * self.sigma).max(-0.9);
    }
}

/// Differential-drive update with constant wheel speeds over `dt`.
///
/// Encoders follow the wheels; slip scales the resulting ground motion.
pub fn integrate_dynamics(
    state: &RobotState,
    wheel_speeds: (f64, f64),
    params: &RobotParams,
    dt: f64,
    slip: &SlipModel,
) -> RobotState {
    let mut next = state.clone();
    let (dl, dr) = (wheel_speeds.0 * dt, wheel_speeds.1 * dt);
    next.wheel_angles = (state.wheel_angles.0 + dl, state.wheel_angles.1 + dr);
    let k = params.ticks_per_radian();
    next.encoders = (
        (next.wheel_angles.0 * k).trunc() as i64,
        (next.wheel_angles.1 * k).trunc() as i64,
    );
    let scale = 1.0 + slip.epsilon;
    let ds = params.wheel_radius * (dl + dr) / 2.0 * scale;
    let dtheta = params.wheel_radius * (dr - dl) / params.wheel_base * scale;
    let PlanarPose { x, y, heading } = state.pose;
    next.pose = if dtheta.abs() < 1e-12 {
        let mid = heading + dtheta / 2.0;
        PlanarPose::new(x + ds * mid.cos(), y + ds * mid.sin(), heading + dtheta)
    } else {
        let radius = ds / dtheta;
        PlanarPose::new(
            x + radius * ((heading + dtheta).sin() - heading.sin()),
            y - radius * ((heading + dtheta).cos() - heading.cos()),
            heading + dtheta,
        )
    };
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropEvent {
    pub x: f64,
    pub y: f64,
}

pub fn drop_parcel(state: &RobotState) -> Result<(RobotState, DropEvent), RobotError> {
    if state.indicator == Indicator::Fault {
        return Err(RobotError::Faulted);
    }
    if !state.is_stationary() {
        return Err(RobotError::NotStationary);
    }
    if state.tray == Tray::Empty {
        return Err(RobotError::TrayEmpty);
    }
    let mut next = state.clone();
    next.tray = Tray::Empty;
    Ok((
        next,
        DropEvent {
            x: state.pose.x,
            y: state.pose.y,
        },
    ))
}

/// Linear drain while motors are active; an empty battery faults the robot.
pub fn battery_update(state: &RobotState, dt: f64, params: &RobotParams) -> RobotState {
    let mut next = state.clone();
    if state.motors_active() && dt > 0.0 {
        next.battery = (state.battery - dt / (params.battery_hours * SECONDS_PER_HOUR)).max(0.0);
    }
    if next.battery <= 0.0 {
        next.battery = 0.0;
        next.indicator = Indicator::Fault;
    }
    next
}

/// Single-wheel motor: command in [−1, 1] drives a first-order lag.
/// Returns (new speed, angle travelled) after `dt`.
pub fn motor_step(speed: f64, command: f64, params: &RobotParams, dt: f64) -> (f64, f64) {
    let target = command * params.max_wheel_speed;
    let decay = (-dt / params.motor_time_constant).exp();
    let travelled = target * dt + (speed - target) * params.motor_time_constant * (1.0 - decay);
    (target + (speed - target) * decay, travelled)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ActivePhase {
    command: MotionCommand,
    start_angles: (f64, f64),
    pid: (PidState, PidState),
    settled_steps: u32,
    elapsed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RobotEvent {
    PhaseDone { phase: MotionPhase, timed_out: bool },
    Dropped { x: f64, y: f64 },
    BatteryDepleted,
}

/// One robot: command queue, per-wheel PID, motor lag, slip and battery.
#[derive(Debug, Clone)]
pub struct Robot {
    pub id: RobotId,
    pub params: RobotParams,
    pub gains: PidGains,
    state: RobotState,
    queue: VecDeque<MotionCommand>,
    active: Option<ActivePhase>,
    slip: SlipModel,
    rng: ChaCha8Rng,
    drop_remaining: f64,
    events: Vec<RobotEvent>,
}

impl Robot {
    pub fn new(
        id: RobotId,
        params: RobotParams,
        gains: PidGains,
        pose: PlanarPose,
        slip_sigma: f64,
        seed: u64,
    ) -> Self {
        Self {
            id,
            params,
            gains,
            state: RobotState::at(pose),
            queue: VecDeque::new(),
            active: None,
            slip: SlipModel::with_sigma(slip_sigma),
            rng: rng::stream(seed, &[0x5113, id.0 as u64]),
            drop_remaining: 0.0,
            events: Vec::new(),
        }
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut RobotState {
        &mut self.state
    }

    pub fn set_slip_sigma(&mut self, sigma: f64) {
        self.slip.sigma = sigma;
    }

    pub fn enqueue(&mut self, commands: impl IntoIterator<Item = MotionCommand>) {
        self.queue.extend(commands);
    }

    /// Drops queued motion and brakes.
    pub fn stop(&mut self) {
        self.queue.clear();
        self.active = None;
        self.state.wheel_speeds = (0.0, 0.0);
        if matches!(self.state.indicator, Indicator::Aligning | Indicator::Moving) {
            self.state.indicator = Indicator::Idle;
        }
    }

    pub fn is_busy(&self) -> bool {
        self.active.is_some() || !self.queue.is_empty() || self.drop_remaining > 0.0
    }

    pub fn request_drop(&mut self) -> Result<DropEvent, RobotError> {
        if self.is_busy() {
            return Err(RobotError::NotStationary);
        }
        let (next, ev) = drop_parcel(&self.state)?;
        self.state = next;
        self.state.indicator = Indicator::Dropping;
        self.drop_remaining = DROP_DURATION_S;
        self.events.push(RobotEvent::Dropped { x: ev.x, y: ev.y });
        Ok(ev)
    }

    /// Forces the fault indicator (hardware failure).
    pub fn fail(&mut self) {
        self.stop();
        self.state.indicator = Indicator::Fault;
    }

    pub fn take_events(&mut self) -> Vec<RobotEvent> {
        std::mem::take(&mut self.events)
    }

    /// Advances by `dt` seconds in whole control periods.
    pub fn advance(&mut self, dt: f64) {
        let steps = (dt / self.params.control_period).round() as u64;
        for _ in 0..steps {
            self.control_step();
        }
    }

    fn control_step(&mut self) {
        let dt = self.params.control_period;
        if self.state.indicator == Indicator::Fault {
            self.state.wheel_speeds = (0.0, 0.0);
            return;
        }
        if self.drop_remaining > 0.0 {
            self.drop_remaining -= dt;
            self.state = battery_update(&self.state, dt, &self.params);
            if self.drop_remaining <= 1e-12 {
                self.drop_remaining = 0.0;
                if self.state.indicator == Indicator::Dropping {
                    self.state.indicator = Indicator::Idle;
                }
            }
            self.check_battery();
            return;
        }
        if self.active.is_none() {
            if let Some(command) = self.queue.pop_front() {
                self.slip.resample(&mut self.rng);
                self.active = Some(ActivePhase {
                    command,
                    start_angles: self.state.wheel_angles,
                    pid: Default::default(),
                    settled_steps: 0,
                    elapsed: 0.0,
                });
                self.state.indicator = match command.phase {
                    MotionPhase::Rotate => Indicator::Aligning,
                    MotionPhase::Translate => Indicator::Moving,
                };
            }
        }
        let Some(mut phase) = self.active else {
            return;
        };

        // Counts relative to phase start, so a symmetric rotation stays
        // symmetric regardless of sub-tick residue from earlier phases.
        let k = self.params.ticks_per_radian();
        let rel = (
            ((self.state.wheel_angles.0 - phase.start_angles.0) * k).trunc() as i64,
            ((self.state.wheel_angles.1 - phase.start_angles.1) * k).trunc() as i64,
        );
        let (ul, pl) = pid_step(&self.gains, phase.command.left, rel.0, phase.pid.0, dt);
        let (ur, pr) = pid_step(&self.gains, phase.command.right, rel.1, phase.pid.1, dt);
        phase.pid = (pl, pr);

        let (wl, al) = motor_step(self.state.wheel_speeds.0, ul, &self.params, dt);
        let (wr, ar) = motor_step(self.state.wheel_speeds.1, ur, &self.params, dt);
        self.state = integrate_dynamics(&self.state, (al / dt, ar / dt), &self.params, dt, &self.slip);
        self.state.wheel_speeds = (wl, wr);
        self.state = battery_update(&self.state, dt, &self.params);
        phase.elapsed += dt;

        let rel = (
            ((self.state.wheel_angles.0 - phase.start_angles.0) * k).trunc() as i64,
            ((self.state.wheel_angles.1 - phase.start_angles.1) * k).trunc() as i64,
        );
        let within = (phase.command.left - rel.0).abs() <= COMPLETION_TOLERANCE_TICKS
            && (phase.command.right - rel.1).abs() <= COMPLETION_TOLERANCE_TICKS;
        phase.settled_steps = if within { phase.settled_steps + 1 } else { 0 };
        let timed_out = phase.elapsed >= PHASE_TIMEOUT_S;
        if phase.settled_steps >= COMPLETION_HOLD_STEPS || timed_out {
            self.active = None;
            self.state.wheel_speeds = (0.0, 0.0);
            self.events.push(RobotEvent::PhaseDone {
                phase: phase.command.phase,
                timed_out,
            });
            if self.queue.is_empty() && self.state.indicator != Indicator::Fault {
                self.state.indicator = Indicator::Idle;
            }
        } else {
            self.active = Some(phase);
        }
        self.check_battery();
    }

    fn check_battery(&mut self) {
        if self.state.indicator == Indicator::Fault {
            self.queue.clear();
            self.active = None;
            self.state.wheel_speeds = (0.0, 0.0);
            self.events.push(RobotEvent::BatteryDepleted);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepSample {
    pub t: f64,
    pub error: i64,
    pub command: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResponse {
    pub samples: Vec<StepSample>,
    /// Time after which |error| stays within the band, if it does.
    pub settling_time: Option<f64>,
    /// Peak travel past the target as a fraction of the target.
    pub overshoot: f64,
}

/// Band used by [`step_response`] for settling, ticks.
pub const SETTLING_BAND_TICKS: i64 = 5;

/// Closed-loop step response of one wheel: the tuning harness.
pub fn step_response(
    gains: &PidGains,
    params: &RobotParams,
    target: i64,
    duration: f64,
) -> StepResponse {
    let dt = params.control_period;
    let k = params.ticks_per_radian();
    let steps = (duration / dt).round() as u64;
    let (mut speed, mut angle) = (0.0, 0.0);
    let mut pid = PidState::default();
    let mut samples = Vec::with_capacity(steps as usize);
    let mut peak = 0i64;
    for i in 0..steps {
        let count = (angle * k).trunc() as i64;
        let (command, next) = pid_step(gains, target, count, pid, dt);
        pid = next;
        let (s, travelled) = motor_step(speed, command, params, dt);
        speed = s;
        angle += travelled;
        let count = (angle * k).trunc() as i64;
        peak = if target >= 0 { peak.max(count) } else { peak.min(count) };
        samples.push(StepSample {
            t: (i + 1) as f64 * dt,
            error: target - count,
            command,
        });
    }
    let settling_time = match samples.iter().rposition(|s| s.error.abs() > SETTLING_BAND_TICKS) {
        None => Some(0.0),
        Some(i) if i + 1 < samples.len() => Some(samples[i].t),
        Some(_) => None,
    };
    let overshoot = if target == 0 {
        0.0
    } else {
        ((peak - target) as f64 / target as f64).max(0.0)
    };
    StepResponse {
        samples,
        settling_time,
        overshoot,
    }
}

/// Pose rebuilt from per-step wheel angle increments (dead reckoning).
pub fn odometry(start: PlanarPose, increments: &[(f64, f64)], params: &RobotParams) -> PlanarPose {
    let mut pose = start;
    for &(dl, dr) in increments {
        let ds = params.wheel_radius * (dl + dr) / 2.0;
        let dth = params.wheel_radius * (dr - dl) / params.wheel_base;
        // Midpoint-heading update; exact for straight and in-place motion.
        let mid = pose.heading + dth / 2.0;
        let chord = if dth.abs() < 1e-12 {
            ds
        } else {
            ds * (dth / 2.0).sin() / (dth / 2.0)
        };
        pose = PlanarPose::new(
            pose.x + chord * mid.cos(),
            pose.y + chord * mid.sin(),
            pose.heading + dth,
        );
    }
    pose
}

/// Shortest signed turn from `heading` toward `bearing`.
pub fn turn_angle(heading: f64, bearing: f64) -> f64 {
    let d = wrap_angle(bearing - heading);
    if (d - PI).abs() < 1e-15 {
        PI
    } else {
        d
    }
}
