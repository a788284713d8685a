//! Per-message byte and timing log of a run.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::master::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    GatewayToMaster,
    MasterToWorker,
    WorkerToMaster,
    MasterToGateway,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::GatewayToMaster,
        Direction::MasterToWorker,
        Direction::WorkerToMaster,
        Direction::MasterToGateway,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::GatewayToMaster => "gateway_to_master",
            Direction::MasterToWorker => "master_to_worker",
            Direction::WorkerToMaster => "worker_to_master",
            Direction::MasterToGateway => "master_to_gateway",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown direction {s:?}"))
    }
}

/// One message on the wire. `bytes` counts the whole frame or HTTP message.
///
/// CSV column order: `task_id,image_id,direction,bytes,send_time_us,recv_time_us`.
/// Control traffic such as heartbeats has empty `task_id` and `image_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub task_id: String,
    pub image_id: String,
    #[serde(with = "direction_text")]
    pub direction: Direction,
    pub bytes: u64,
    pub send_time_us: Micros,
    pub recv_time_us: Micros,
}

mod direction_text {
    use super::Direction;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Direction, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(d.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Direction, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Gateway-observed outcome of one submission.
///
/// CSV column order: `task_id,image_id,submit_time_us,enqueue_time_us,done_time_us,recv_time_us,compute_ms,worker_id,status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub task_id: String,
    pub image_id: String,
    /// When the gateway sent the request.
    pub submit_time_us: Micros,
    /// When the master queued the task.
    pub enqueue_time_us: Micros,
    /// When the master resolved it (result or failure).
    pub done_time_us: Micros,
    /// When the gateway received the response.
    pub recv_time_us: Micros,
    pub compute_ms: f64,
    pub worker_id: String,
    /// HTTP status returned to the gateway.
    pub status: u16,
}

impl Completion {
    pub fn ok(&self) -> bool {
        self.status == 200
    }

    pub fn response_ms(&self) -> f64 {
        (self.recv_time_us - self.submit_time_us) as f64 / 1000.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLedger {
    pub entries: Vec<LedgerEntry>,
    pub completions: Vec<Completion>,
    /// Length of the run the rates are computed over.
    pub duration_us: Micros,
}

impl RunLedger {
    pub fn record(&mut self, entry: LedgerEntry) {
        debug_assert!(entry.recv_time_us >= entry.send_time_us);
        self.entries.push(entry);
    }

    pub fn write_entries_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        write_csv(out, &self.entries)
    }

    pub fn write_completions_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        write_csv(out, &self.completions)
    }

    pub fn read_entries_csv<R: Read>(input: R) -> Result<Vec<LedgerEntry>, MetricsError> {
        read_csv(input)
    }

    pub fn read_completions_csv<R: Read>(input: R) -> Result<Vec<Completion>, MetricsError> {
        read_csv(input)
    }
}

pub(crate) fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| MetricsError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Io(e.to_string()))
}

pub(crate) fn read_csv<R: Read, T: serde::de::DeserializeOwned>(input: R) -> Result<Vec<T>, MetricsError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| MetricsError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_csv_layout() {
        let ledger = RunLedger {
            entries: vec![LedgerEntry {
                task_id: "t000000".into(),
                image_id: "img-0000".into(),
                direction: Direction::GatewayToMaster,
                bytes: 1064,
                send_time_us: 0,
                recv_time_us: 2085,
            }],
            ..Default::default()
        };
        let mut buf = Vec::new();
        ledger.write_entries_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "task_id,image_id,direction,bytes,send_time_us,recv_time_us\nt000000,img-0000,gateway_to_master,1064,0,2085\n"
        );
        assert_eq!(RunLedger::read_entries_csv(text.as_bytes()).unwrap(), ledger.entries);
    }
}
