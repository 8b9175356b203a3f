//! Wire records exchanged over the simulated LAN.

use gridswarm_core::geometry::CellCoord;
use gridswarm_core::robot::{Indicator, MotionCommand, Tray};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Command,
    Status,
    Telemetry,
    Goal,
    Ack,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RobotCommand {
    Motion { commands: Vec<MotionCommand> },
    Stop,
    Drop,
}

/// Per-tick robot report; doubles as the heartbeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotStatus {
    pub encoders: (i64, i64),
    pub battery: f64,
    pub indicator: Indicator,
    pub tray: Tray,
    /// Highest command sequence accepted.
    pub accepted_seq: u64,
    /// Highest command sequence fully executed.
    pub completed_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Command { seq: u64, command: RobotCommand },
    Status(RobotStatus),
    /// Detection summary from a camera node.
    Telemetry { camera: String, detections: u32 },
    Goal { request_id: String, cell: CellCoord },
    Ack { seq: u64 },
    Error { seq: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetMessage {
    pub sender: String,
    pub receiver: String,
    pub tick: u64,
    pub payload: Payload,
}

impl FleetMessage {
    pub fn new(sender: &str, receiver: &str, tick: u64, payload: Payload) -> Self {
        Self {
            sender: sender.to_owned(),
            receiver: receiver.to_owned(),
            tick,
            payload,
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::Command { .. } => MessageKind::Command,
            Payload::Status(_) => MessageKind::Status,
            Payload::Telemetry { .. } => MessageKind::Telemetry,
            Payload::Goal { .. } => MessageKind::Goal,
            Payload::Ack { .. } => MessageKind::Ack,
            Payload::Error { .. } => MessageKind::Error,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}
