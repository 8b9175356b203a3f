//! Operator endpoint messages: one JSON object per line, tagged by `type`.

use gridswarm_core::geometry::CellCoord;
use gridswarm_core::RobotId;
use serde::{Deserialize, Serialize};

use crate::scenario::Fault;
use crate::telemetry::TelemetryFrame;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Dispatch {
        request_id: String,
        /// Omitted: nearest idle robot.
        #[serde(default)]
        robot: Option<RobotId>,
        cell: CellCoord,
        #[serde(default)]
        drop: bool,
    },
    Pause {
        #[serde(default)]
        request_id: Option<String>,
    },
    Resume {
        #[serde(default)]
        request_id: Option<String>,
    },
    InjectFault {
        #[serde(default)]
        request_id: Option<String>,
        fault: Fault,
    },
}

impl ClientMessage {
    pub fn request_id(&self) -> Option<&str> {
        match self {
            ClientMessage::Dispatch { request_id, .. } => Some(request_id),
            ClientMessage::Pause { request_id }
            | ClientMessage::Resume { request_id }
            | ClientMessage::InjectFault { request_id, .. } => request_id.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloRobot {
    pub id: RobotId,
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol: u32,
        scenario: String,
        tick_rate_hz: f64,
        cols: u32,
        rows: u32,
        cell_size: f64,
        robots: Vec<HelloRobot>,
    },
    Frame(TelemetryFrame),
    Ack {
        request_id: Option<String>,
        plan_id: Option<u64>,
    },
    Error {
        request_id: Option<String>,
        code: String,
        message: String,
    },
}

impl ServerMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("server messages serialize");
        s.push('\n');
        s
    }

    /// A `frame` line built from an already serialized frame, so replayed
    /// frames go out byte-for-byte as recorded.
    pub fn frame_line(frame_json: &str) -> String {
        debug_assert!(frame_json.starts_with('{'));
        format!("{{\"type\":\"frame\",{}\n", &frame_json[1..])
    }
}
