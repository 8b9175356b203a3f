//! Per-tick telemetry frames and the append-only replay log (JSON lines).

use std::io::{BufRead, Write};

use gridswarm_core::geometry::{CellCoord, Polyline};
use gridswarm_core::robot::{Indicator, Tray};
use gridswarm_core::RobotId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotMode {
    Idle,
    Executing,
    Disconnected,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotFrame {
    pub id: RobotId,
    pub address: String,
    pub mode: RobotMode,
    /// Localized pose in the ground frame; absent until first seen.
    pub pose: Option<PoseRecord>,
    pub cell: Option<CellCoord>,
    /// Simulated ground-truth pose in the ground frame.
    pub truth: PoseRecord,
    pub indicator: Indicator,
    pub battery: f64,
    pub tray: Tray,
    pub encoders: (i64, i64),
    pub goal: Option<CellCoord>,
    /// Remaining planned cells, current cell first.
    pub plan: Vec<CellCoord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyKind {
    SameCell,
    Swap,
}

/// A conflict observed on simulated ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyViolation {
    pub kind: SafetyKind,
    pub robots: (RobotId, RobotId),
    pub cell: CellCoord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Dispatched { robot: RobotId, goal: CellCoord, plan_id: u64 },
    Planned { epoch: u64, robots: Vec<RobotId> },
    PlanFailed { robot: RobotId, goal: CellCoord, reason: String },
    GoalReached { robot: RobotId, goal: CellCoord },
    Deviation { robot: RobotId, cell: CellCoord },
    Disconnected { robot: RobotId, cells: Vec<CellCoord> },
    Reconnected { robot: RobotId, cell: Option<CellCoord> },
    RobotFault { robot: RobotId },
    GroundReferenceLost,
    GroundReferenceRestored,
    Paused,
    Resumed,
    Dropped { robot: RobotId, x: f64, y: f64 },
    DropSkipped { robot: RobotId, reason: String },
    CommandResent { robot: RobotId, seq: u64 },
    FaultInjected { description: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub tick: u64,
    pub time: f64,
    pub paused: bool,
    pub ground_lost: bool,
    pub robots: Vec<RobotFrame>,
    /// Grid overlay in the first camera's image.
    pub overlay: Vec<Polyline>,
    pub violations: Vec<SafetyViolation>,
    pub events: Vec<Event>,
}

impl TelemetryFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    pub fn from_json(line: &str) -> serde_json::Result<Self> {
        serde_json::from_str(line)
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{}: {message}", describe_last(*last_valid))]
    Corrupt {
        /// Zero-based index of the offending frame.
        index: usize,
        last_valid: Option<(usize, u64)>,
        message: String,
    },
    #[error("log contains no frames")]
    Empty,
}

fn describe_last(last: Option<(usize, u64)>) -> String {
    match last {
        Some((i, tick)) => format!("corrupt frame after last valid frame {i} (tick {tick})"),
        None => "corrupt first frame".to_string(),
    }
}

/// Writes frames one per line, flushing each.
pub struct Recorder<W: Write> {
    out: W,
}

impl<W: Write> Recorder<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, frame: &TelemetryFrame) -> std::io::Result<()> {
        self.out.write_all(frame.to_json().as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Reads a log, keeping each frame's exact line bytes for re-emission.
pub fn read_log(input: impl BufRead) -> Result<Vec<(String, TelemetryFrame)>, ReplayError> {
    let mut frames: Vec<(String, TelemetryFrame)> = Vec::new();
    let mut input = input;
    loop {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let last_valid = frames.last().map(|(_, f)| (frames.len() - 1, f.tick));
        let corrupt = |message: String| ReplayError::Corrupt {
            index: frames.len(),
            last_valid,
            message,
        };
        let Some(body) = line.strip_suffix('\n') else {
            return Err(corrupt("truncated line".into()));
        };
        let frame = TelemetryFrame::from_json(body).map_err(|e| corrupt(e.to_string()))?;
        if let Some((_, prev)) = frames.last() {
            if frame.tick <= prev.tick {
                return Err(corrupt(format!("tick {} does not follow {}", frame.tick, prev.tick)));
            }
        }
        frames.push((body.to_owned(), frame));
    }
    if frames.is_empty() {
        return Err(ReplayError::Empty);
    }
    Ok(frames)
}
