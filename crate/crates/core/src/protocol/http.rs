//! Gateway-facing HTTP contract.
//!
//! `POST /v1/detect` carries the image as the body and describes it through
//! `X-*` headers. The response is the detection list plus timing. The
//! canonical HTTP/1.1 renderings below are also what the simulator charges
//! to the network, so simulated and real byte counts use one definition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::Detection;
use crate::preprocess::{ImageFormat, Mode};
use super::messages::Tier;

pub const DETECT_PATH: &str = "/v1/detect";
pub const HEALTH_PATH: &str = "/v1/health";

pub const H_IMAGE_ID: &str = "x-image-id";
pub const H_MODE: &str = "x-mode";
pub const H_WIDTH: &str = "x-width";
pub const H_HEIGHT: &str = "x-height";
pub const H_FORMAT: &str = "x-format";
/// Set to `1` when the gateway already rescaled the image for low-latency mode.
pub const H_CLIENT_RESCALED: &str = "x-client-rescaled";

const CANONICAL_HOST: &str = "master";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HeaderError {
    #[error("missing header {0}")]
    Missing(&'static str),
    #[error("invalid value {value:?} for header {name}")]
    Invalid { name: &'static str, value: String },
}

/// The metadata headers of a detect request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectHeaders {
    pub image_id: String,
    pub mode: Mode,
    pub width: u32,
    pub height: u32,
    pub format: ImageFormat,
    pub client_rescaled: bool,
}

impl DetectHeaders {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            (H_IMAGE_ID, self.image_id.clone()),
            (H_MODE, self.mode.to_string()),
            (H_WIDTH, self.width.to_string()),
            (H_HEIGHT, self.height.to_string()),
            (H_FORMAT, self.format.to_string()),
        ];
        if self.client_rescaled {
            v.push((H_CLIENT_RESCALED, "1".to_string()));
        }
        v
    }

    /// Parses headers through a case-insensitive lookup function. A missing
    /// `X-Mode` falls back to `default_mode`.
    pub fn parse<'a>(get: impl Fn(&str) -> Option<&'a str>, default_mode: Mode) -> Result<Self, HeaderError> {
        let required = |name: &'static str| get(name).ok_or(HeaderError::Missing(name));
        let invalid = |name: &'static str, value: &str| HeaderError::Invalid {
            name,
            value: value.to_string(),
        };

        let image_id = required(H_IMAGE_ID)?;
        if image_id.is_empty() {
            return Err(invalid(H_IMAGE_ID, image_id));
        }
        let mode = match get(H_MODE) {
            None => default_mode,
            Some(m) => m.parse().map_err(|_| invalid(H_MODE, m))?,
        };
        let dim = |name: &'static str| -> Result<u32, HeaderError> {
            let v = required(name)?;
            v.parse::<u32>().map_err(|_| invalid(name, v))
        };
        let width = dim(H_WIDTH)?;
        let height = dim(H_HEIGHT)?;
        let format_s = required(H_FORMAT)?;
        let format = format_s.parse().map_err(|_| invalid(H_FORMAT, format_s))?;
        let client_rescaled = match get(H_CLIENT_RESCALED) {
            None | Some("0") | Some("false") => false,
            Some("1") | Some("true") => true,
            Some(other) => return Err(invalid(H_CLIENT_RESCALED, other)),
        };
        Ok(Self {
            image_id: image_id.to_string(),
            mode,
            width,
            height,
            format,
            client_rescaled,
        })
    }

    /// Canonical HTTP/1.1 request head (request line through blank line).
    pub fn request_head(&self, body_len: usize) -> String {
        let mut head = format!(
            "POST {DETECT_PATH} HTTP/1.1\r\nhost: {CANONICAL_HOST}\r\ncontent-length: {body_len}\r\n"
        );
        for (k, v) in self.pairs() {
            head.push_str(k);
            head.push_str(": ");
            head.push_str(&v);
            head.push_str("\r\n");
        }
        head.push_str("\r\n");
        head
    }

    /// Request size on the wire, head plus body.
    pub fn request_wire_len(&self, body_len: usize) -> usize {
        self.request_head(body_len).len() + body_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub compute_ms: f64,
    pub worker_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub timing: Timing,
}

impl DetectResponse {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    /// Canonical `200 OK` response size on the wire.
    pub fn wire_len(&self) -> usize {
        response_wire_len(200, "OK", self.to_json().len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn response_wire_len(status: u16, reason: &str, body_len: usize) -> usize {
    format!(
        "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {body_len}\r\n\r\n"
    )
    .len()
        + body_len
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub worker_id: String,
    pub tier: Tier,
    pub alive: bool,
    pub outstanding: u32,
    pub registered_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub live_workers: usize,
    pub queued_tasks: usize,
    pub workers: Vec<WorkerSummary>,
}
