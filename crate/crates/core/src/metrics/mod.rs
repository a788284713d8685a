//! Run metrics computed from ground truth and ledgers.
//!
//! Everything here is a pure function over immutable inputs.

pub mod eval;
pub mod ledger;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::master::Micros;

pub use eval::{
    average_precision, evaluate_map, match_detections, mean_ap, Annotation, GroundTruth, MapReport, MatchOutcome,
    DEFAULT_MATCH_IOU,
};
pub use ledger::{Completion, Direction, LedgerEntry, RunLedger};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no class has a defined AP")]
    NoDefinedClasses,
    #[error("jitter needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("window must be positive")]
    EmptyWindow,
    #[error("no ledger entries match the filter")]
    EmptyFilter,
    #[error("invalid power model for {node}: need busy >= idle >= 0")]
    InvalidPower { node: String },
    #[error("no power model for node {0}")]
    UnknownNode(String),
    #[error("busy interval [{start}, {end}] of {node} lies outside [0, {duration}]")]
    IntervalOutOfRange {
        node: String,
        start: Micros,
        end: Micros,
        duration: Micros,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Completions inside `[start, start + window)` per minute of window.
pub fn fpm(completion_times: &[Micros], start: Micros, window_us: Micros) -> Result<f64, MetricsError> {
    if window_us == 0 {
        return Err(MetricsError::EmptyWindow);
    }
    let end = start + window_us;
    let n = completion_times.iter().filter(|&&t| t >= start && t < end).count();
    Ok(n as f64 / (window_us as f64 / 60e6))
}

/// Mean absolute difference between consecutive latencies.
pub fn jitter(latencies_ms: &[f64]) -> Result<f64, MetricsError> {
    if latencies_ms.len() < 2 {
        return Err(MetricsError::TooFewSamples(latencies_ms.len()));
    }
    let total: f64 = latencies_ms.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(total / (latencies_ms.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bandwidth {
    pub bytes: u64,
    pub messages: usize,
    /// Zero when the ledger has no duration.
    pub bytes_per_minute: f64,
}

/// Sums the entries whose direction is in `directions`.
pub fn bandwidth(ledger: &RunLedger, directions: &[Direction]) -> Result<Bandwidth, MetricsError> {
    let (bytes, messages) = ledger
        .entries
        .iter()
        .filter(|e| directions.contains(&e.direction))
        .fold((0u64, 0usize), |(b, n), e| (b + e.bytes, n + 1));
    if messages == 0 {
        return Err(MetricsError::EmptyFilter);
    }
    let bytes_per_minute = if ledger.duration_us == 0 {
        0.0
    } else {
        bytes as f64 / (ledger.duration_us as f64 / 60e6)
    };
    Ok(Bandwidth {
        bytes,
        messages,
        bytes_per_minute,
    })
}

/// Linear idle/busy power draw of one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodePower {
    pub idle_watts: f64,
    pub busy_watts: f64,
}

impl NodePower {
    pub fn is_valid(&self) -> bool {
        self.idle_watts >= 0.0 && self.busy_watts >= self.idle_watts
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub nodes: BTreeMap<String, NodePower>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EnergyReport {
    pub per_node: BTreeMap<String, f64>,
    pub total: f64,
}

/// Total length of the union of `intervals`.
pub fn union_length(intervals: &[(Micros, Micros)]) -> Micros {
    let mut sorted: Vec<(Micros, Micros)> = intervals.iter().copied().filter(|(s, e)| e > s).collect();
    sorted.sort_unstable();
    let mut total = 0;
    let mut current: Option<(Micros, Micros)> = None;
    for (s, e) in sorted {
        current = match current {
            Some((cs, ce)) if s <= ce => Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                Some((s, e))
            }
            None => Some((s, e)),
        };
    }
    if let Some((cs, ce)) = current {
        total += ce - cs;
    }
    total
}

/// `idle·duration + (busy − idle)·busy_time` per node. Overlapping busy
/// intervals on one node (several slots) count once. Every node of the power
/// model appears in the report, busy or not.
pub fn energy(
    busy: &BTreeMap<String, Vec<(Micros, Micros)>>,
    power: &PowerModel,
    duration_us: Micros,
) -> Result<EnergyReport, MetricsError> {
    for (node, p) in &power.nodes {
        if !p.is_valid() {
            return Err(MetricsError::InvalidPower { node: node.clone() });
        }
    }
    for (node, intervals) in busy {
        if !power.nodes.contains_key(node) {
            return Err(MetricsError::UnknownNode(node.clone()));
        }
        if let Some(&(start, end)) = intervals.iter().find(|(s, e)| s > e || *e > duration_us) {
            return Err(MetricsError::IntervalOutOfRange {
                node: node.clone(),
                start,
                end,
                duration: duration_us,
            });
        }
    }
    let seconds = |us: Micros| us as f64 / 1e6;
    let mut report = EnergyReport::default();
    for (node, p) in &power.nodes {
        let busy_us = busy.get(node).map_or(0, |iv| union_length(iv));
        let joules = p.idle_watts * seconds(duration_us) + (p.busy_watts - p.idle_watts) * seconds(busy_us);
        report.total += joules;
        report.per_node.insert(node.clone(), joules);
    }
    Ok(report)
}

/// One scenario's headline numbers. This is the row format of report CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub topology: String,
    pub mode: String,
    pub seed: u64,
    pub injected: usize,
    pub completed: usize,
    pub failed: usize,
    pub duplicates_dropped: u64,
    pub duration_s: f64,
    pub fpm: f64,
    pub mean_response_ms: Option<f64>,
    pub jitter_ms: Option<f64>,
    pub mean_compute_ms: Option<f64>,
    pub gateway_bytes: u64,
    pub gateway_bytes_per_min: f64,
    pub total_bytes: u64,
    pub energy_fog_j: f64,
    pub energy_cloud_j: f64,
    pub energy_master_j: f64,
    pub energy_total_j: f64,
    pub map: Option<f64>,
}

impl MetricsReport {
    pub fn write_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<(), MetricsError> {
        ledger::write_csv(out, reports)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricsReport>, MetricsError> {
        ledger::read_csv(input)
    }

    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>, unit: &str| v.map_or("n/a".to_string(), |x| format!("{x:.1} {unit}"));
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} ({} / {}, seed {})", self.scenario, self.topology, self.mode, self.seed);
        let _ = writeln!(
            s,
            "  tasks      {} injected, {} completed, {} failed, {} late duplicates dropped",
            self.injected, self.completed, self.failed, self.duplicates_dropped
        );
        let _ = writeln!(s, "  throughput {:.2} frames/min over {:.1} s", self.fpm, self.duration_s);
        let _ = writeln!(
            s,
            "  response   mean {}, jitter {}, compute {}",
            opt(self.mean_response_ms, "ms"),
            opt(self.jitter_ms, "ms"),
            opt(self.mean_compute_ms, "ms")
        );
        let _ = writeln!(
            s,
            "  network    gateway {} B ({:.0} B/min), all links {} B",
            self.gateway_bytes, self.gateway_bytes_per_min, self.total_bytes
        );
        let _ = writeln!(
            s,
            "  energy     total {:.0} J (fog {:.0}, cloud {:.0}, master {:.0})",
            self.energy_total_j, self.energy_fog_j, self.energy_cloud_j, self.energy_master_j
        );
        if let Some(m) = self.map {
            let _ = writeln!(s, "  accuracy   mAP@0.5 {m:.4}");
        }
        s
    }
}
