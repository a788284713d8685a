//! Typed headers carried inside [`Frame`]s.

use bytes::Bytes;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::frame::{Frame, MsgType, ProtocolError};
use crate::detection::Detection;
use crate::preprocess::{ImageFormat, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Fog,
    Cloud,
}

impl Tier {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Fog => "fog",
            Tier::Cloud => "cloud",
        }
    }
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fog" => Ok(Tier::Fog),
            "cloud" => Ok(Tier::Cloud),
            other => Err(format!("unknown tier {other:?} (expected fog or cloud)")),
        }
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Worker → master, first frame on a connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterMsg {
    pub worker_id: String,
    pub tier: Tier,
    #[serde(default = "default_slots")]
    pub slots: u32,
}

fn default_slots() -> u32 {
    1
}

/// Master → worker acknowledgement of a registration (same message type).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub worker_id: String,
    pub registered_seq: u64,
    pub heartbeat_interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatMsg {
    pub worker_id: String,
}

/// Header of a TASK frame; the payload is the prepared image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHeader {
    pub task_id: String,
    pub image_id: String,
    pub mode: Mode,
    pub attempt: u32,
    pub width: u32,
    pub height: u32,
    pub format: ImageFormat,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskEnvelope {
    pub header: TaskHeader,
    pub payload: Bytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope {
    pub task_id: String,
    pub worker_id: String,
    pub detections: Vec<Detection>,
    pub compute_ms: f64,
}

/// Error codes carried by ERROR frames.
pub mod codes {
    /// Registration refused: a live worker already uses this id.
    pub const DUPLICATE_WORKER: &str = "duplicate_worker";
    /// The detector failed on a task.
    pub const DETECTOR_FAILED: &str = "detector_failed";
    /// The worker received more tasks than it has slots.
    pub const NO_FREE_SLOT: &str = "no_free_slot";
    /// The master no longer considers this worker alive.
    pub const REREGISTER: &str = "reregister";
    pub const PROTOCOL: &str = "protocol";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_id: Option<String>,
}

/// Every message a master or worker can exchange, decoded.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register(RegisterMsg),
    RegisterAck(RegisterAck),
    Task(TaskEnvelope),
    Result(ResultEnvelope),
    Heartbeat(HeartbeatMsg),
    Error(ErrorMsg),
}

fn header_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("header types serialize infallibly")
}

fn parse<T: DeserializeOwned>(frame: &Frame) -> Result<T, ProtocolError> {
    serde_json::from_str(&frame.header).map_err(|e| ProtocolError::Schema {
        msg_type: frame.msg_type,
        reason: e.to_string(),
    })
}

impl Message {
    pub fn to_frame(&self) -> Frame {
        match self {
            Message::Register(m) => Frame::new(MsgType::Register, header_json(m), Bytes::new()),
            Message::RegisterAck(m) => Frame::new(MsgType::Register, header_json(m), Bytes::new()),
            Message::Task(t) => Frame::new(MsgType::Task, header_json(&t.header), t.payload.clone()),
            Message::Result(r) => Frame::new(MsgType::Result, header_json(r), Bytes::new()),
            Message::Heartbeat(h) => Frame::new(MsgType::Heartbeat, header_json(h), Bytes::new()),
            Message::Error(e) => Frame::new(MsgType::Error, header_json(e), Bytes::new()),
        }
    }

    /// Decodes a frame. REGISTER frames carrying `registered_seq` are acks.
    pub fn from_frame(frame: &Frame) -> Result<Self, ProtocolError> {
        Ok(match frame.msg_type {
            MsgType::Register => {
                let value: serde_json::Value = parse(frame)?;
                if value.get("registered_seq").is_some() {
                    Message::RegisterAck(parse(frame)?)
                } else {
                    Message::Register(parse(frame)?)
                }
            }
            MsgType::Task => Message::Task(TaskEnvelope {
                header: parse(frame)?,
                payload: frame.payload.clone(),
            }),
            MsgType::Result => Message::Result(parse(frame)?),
            MsgType::Heartbeat => Message::Heartbeat(parse(frame)?),
            MsgType::Error => Message::Error(parse(frame)?),
        })
    }

    /// Bytes this message occupies on the wire as a frame.
    pub fn wire_len(&self) -> usize {
        self.to_frame().wire_len()
    }
}
