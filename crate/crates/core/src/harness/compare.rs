//! Cross-scenario ordering checks.

use std::fmt::Write as _;

use serde::Serialize;

use crate::metrics::MetricsReport;

/// Outcome of one qualitative check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub claim: String,
    pub left: String,
    pub right: String,
    pub left_value: f64,
    pub right_value: f64,
    pub consistent: bool,
}

/// Differences between two reports (`right − left`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDelta {
    pub left: String,
    pub right: String,
    pub mean_response_ms: f64,
    pub jitter_ms: f64,
    pub gateway_bytes: i64,
    pub energy_total_j: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Comparison {
    pub checks: Vec<OrderingCheck>,
    pub deltas: Vec<PairDelta>,
}

impl Comparison {
    pub fn all_consistent(&self) -> bool {
        self.checks.iter().all(|c| c.consistent)
    }

    pub fn contradictions(&self) -> impl Iterator<Item = &OrderingCheck> {
        self.checks.iter().filter(|c| !c.consistent)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<12} {}: {} = {:.3}, {} = {:.3}",
                if c.consistent { "consistent" } else { "CONTRADICTS" },
                c.claim,
                c.left,
                c.left_value,
                c.right,
                c.right_value
            );
        }
        s
    }

    pub fn write_checks_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.checks {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_deltas_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for d in &self.deltas {
            w.serialize(d)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn find<'a>(reports: &'a [MetricsReport], topology: &str, mode: &str) -> Option<&'a MetricsReport> {
    reports.iter().find(|r| r.topology == topology && r.mode == mode)
}

#[derive(Clone, Copy)]
enum Rel {
    Less,
    LessEq,
    Greater,
    WithinRatio(f64, f64),
}

struct Checker<'a> {
    reports: &'a [MetricsReport],
    out: Vec<OrderingCheck>,
}

impl Checker<'_> {
    fn check(
        &mut self,
        claim: &str,
        (lt, lm): (&str, &str),
        (rt, rm): (&str, &str),
        metric: fn(&MetricsReport) -> Option<f64>,
        rel: Rel,
    ) {
        let (Some(l), Some(r)) = (find(self.reports, lt, lm), find(self.reports, rt, rm)) else {
            return;
        };
        let (Some(a), Some(b)) = (metric(l), metric(r)) else {
            return;
        };
        let consistent = match rel {
            Rel::Less => a < b,
            Rel::LessEq => a <= b,
            Rel::Greater => a > b,
            Rel::WithinRatio(lo, hi) => a > 0.0 && (lo..=hi).contains(&(b / a)),
        };
        self.out.push(OrderingCheck {
            claim: claim.to_string(),
            left: l.scenario.clone(),
            right: r.scenario.clone(),
            left_value: a,
            right_value: b,
            consistent,
        });
    }
}

/// Checks every qualitative ordering that applies to the given reports.
///
/// Reports are matched by their `topology` label (`fog1`, `fog2`,
/// `cloud-near`, `cloud-far`) and `mode`. Checks whose inputs are missing are
/// skipped. Pairwise deltas cover every pair of reports.
pub fn compare_report(reports: &[MetricsReport]) -> Comparison {
    let mut c = Checker {
        reports,
        out: Vec::new(),
    };
    let resp: fn(&MetricsReport) -> Option<f64> = |r| r.mean_response_ms;
    let jit: fn(&MetricsReport) -> Option<f64> = |r| r.jitter_ms;
    let total_energy: fn(&MetricsReport) -> Option<f64> = |r| Some(r.energy_total_j);
    let fog_energy: fn(&MetricsReport) -> Option<f64> = |r| Some(r.energy_fog_j);
    let gateway: fn(&MetricsReport) -> Option<f64> = |r| Some(r.gateway_bytes as f64);

    for mode in ["accuracy", "latency"] {
        c.check("mean response fog2 <= fog1", ("fog2", mode), ("fog1", mode), resp, Rel::LessEq);
        c.check("mean response fog1 < cloud-near", ("fog1", mode), ("cloud-near", mode), resp, Rel::Less);
        c.check("mean response cloud-near < cloud-far", ("cloud-near", mode), ("cloud-far", mode), resp, Rel::Less);
        for fog in ["fog1", "fog2"] {
            for cloud in ["cloud-near", "cloud-far"] {
                c.check("jitter fog < cloud", (fog, mode), (cloud, mode), jit, Rel::Less);
                c.check("energy cloud > fog", (cloud, mode), (fog, mode), total_energy, Rel::Greater);
            }
        }
        c.check("jitter fog2 <= fog1", ("fog2", mode), ("fog1", mode), jit, Rel::LessEq);
        c.check(
            "fog energy fog2 / fog1 within 2 +- 10%",
            ("fog1", mode),
            ("fog2", mode),
            fog_energy,
            Rel::WithinRatio(1.8, 2.2),
        );
    }
    for topology in ["fog1", "fog2", "cloud-near", "cloud-far"] {
        c.check(
            "mean response latency < accuracy",
            (topology, "latency"),
            (topology, "accuracy"),
            resp,
            Rel::Less,
        );
        c.check(
            "gateway bandwidth latency < accuracy",
            (topology, "latency"),
            (topology, "accuracy"),
            gateway,
            Rel::Less,
        );
    }

    let mut deltas = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            deltas.push(PairDelta {
                left: a.scenario.clone(),
                right: b.scenario.clone(),
                // adding 0.0 turns an exact -0.0 into 0.0
                mean_response_ms: b.mean_response_ms.unwrap_or(0.0) - a.mean_response_ms.unwrap_or(0.0) + 0.0,
                jitter_ms: b.jitter_ms.unwrap_or(0.0) - a.jitter_ms.unwrap_or(0.0) + 0.0,
                gateway_bytes: b.gateway_bytes as i64 - a.gateway_bytes as i64,
                energy_total_j: b.energy_total_j - a.energy_total_j + 0.0,
            });
        }
    }
    Comparison { checks: c.out, deltas }
}
