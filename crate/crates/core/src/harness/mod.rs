//! Scenario runner and gateway client.
//!
//! [`run_scenario`] executes a deployment on a virtual clock. [`suite`] runs
//! the four pinned topologies in both modes and writes CSVs.
//! [`real::run_loopback`] runs the same scenario over real sockets.

pub mod client;
pub mod compare;
pub mod real;
pub mod scenario;
pub mod sim;

use std::path::Path;

pub use compare::{compare_report, Comparison, OrderingCheck, PairDelta};
pub use scenario::{
    client_inject, suite_scenario, suite_scenarios, LinkModel, PayloadSpec, Scenario, ScenarioError, Stall,
    Submission, SuiteParams, WorkerSpec, TOPOLOGIES,
};
pub use sim::{run_scenario, SimOutcome, VirtualClock};

use crate::metrics::MetricsReport;

/// Result of a suite run.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub outcomes: Vec<SimOutcome>,
    pub comparison: Comparison,
}

impl SuiteResult {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.outcomes.iter().map(|o| o.report.clone()).collect()
    }
}

/// Runs every suite scenario and compares them.
pub fn run_suite(params: &SuiteParams) -> Result<SuiteResult, ScenarioError> {
    let outcomes = suite_scenarios(params)
        .iter()
        .map(run_scenario)
        .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<MetricsReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    Ok(SuiteResult {
        comparison: compare_report(&reports),
        outcomes,
    })
}

/// Writes the per-run files of one scenario: `<name>.ledger.csv`,
/// `<name>.completions.csv`, and `<name>.report.csv`.
pub fn write_outcome(dir: &Path, outcome: &SimOutcome) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let name = &outcome.report.scenario;
    let io = |e: crate::metrics::MetricsError| std::io::Error::other(e.to_string());
    outcome
        .ledger
        .write_entries_csv(std::fs::File::create(dir.join(format!("{name}.ledger.csv")))?)
        .map_err(io)?;
    outcome
        .ledger
        .write_completions_csv(std::fs::File::create(dir.join(format!("{name}.completions.csv")))?)
        .map_err(io)?;
    MetricsReport::write_csv(
        std::slice::from_ref(&outcome.report),
        std::fs::File::create(dir.join(format!("{name}.report.csv")))?,
    )
    .map_err(io)
}

/// Writes a suite to `dir`: per-scenario files, `report.csv` with every
/// scenario, `orderings.csv`, and `deltas.csv`.
pub fn write_suite(dir: &Path, suite: &SuiteResult) -> std::io::Result<()> {
    for o in &suite.outcomes {
        write_outcome(dir, o)?;
    }
    MetricsReport::write_csv(&suite.reports(), std::fs::File::create(dir.join("report.csv"))?)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    suite
        .comparison
        .write_checks_csv(std::fs::File::create(dir.join("orderings.csv"))?)
        .map_err(std::io::Error::other)?;
    suite
        .comparison
        .write_deltas_csv(std::fs::File::create(dir.join("deltas.csv"))?)
        .map_err(std::io::Error::other)
}
