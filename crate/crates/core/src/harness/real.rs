//! Runs a scenario over real loopback sockets.
//!
//! The master, each worker, and the client run as tokio tasks in this
//! process and talk only through TCP and HTTP. Link models are not
//! emulated; loopback is the link.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use futures::future::join_all;

use super::client::{DetectOutcome, GatewayClient};
use super::scenario::{PayloadSource, Scenario, ScenarioError};
use crate::detection::Detection;
use crate::master::{spawn_master, MasterConfig};
use crate::worker::net::run_worker;
use crate::worker::WorkerAgent;

#[derive(Debug, Clone)]
pub struct LoopbackRun {
    /// One entry per submission, in injection order.
    pub outcomes: Vec<DetectOutcome>,
}

impl LoopbackRun {
    pub fn completed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.status == 200).count()
    }

    pub fn detections(&self) -> BTreeMap<String, Vec<Detection>> {
        self.outcomes
            .iter()
            .filter_map(|o| o.response.as_ref().map(|r| (o.image_id.clone(), r.detections.clone())))
            .collect()
    }

    pub fn responses_ms(&self) -> Vec<(String, Option<f64>)> {
        self.outcomes
            .iter()
            .map(|o| (o.image_id.clone(), (o.status == 200).then_some(o.elapsed_ms)))
            .collect()
    }
}

/// Runs `scenario` on loopback in wall-clock time. Crash and stall settings
/// are not supported here.
pub async fn run_loopback(scenario: &Scenario) -> Result<LoopbackRun, ScenarioError> {
    scenario.validate()?;
    if scenario.workers.iter().any(|w| w.fail_at_s.is_some() || w.stall.is_some()) {
        return Err(ScenarioError::Invalid("loopback runs do not support crashes or stalls".into()));
    }
    let subs = scenario.submissions()?;
    scenario.check_resources(&subs)?;
    let source = PayloadSource::new(&scenario.payload, scenario.seed)?;
    let requests = subs
        .iter()
        .map(|s| source.request(scenario, s))
        .collect::<Result<Vec<_>, _>>()?;

    let io = |e: std::io::Error| ScenarioError::Invalid(format!("loopback: {e}"));
    let master = spawn_master(MasterConfig {
        listen_http: ([127, 0, 0, 1], 0).into(),
        listen_worker: ([127, 0, 0, 1], 0).into(),
        scheduler: scenario.master.clone(),
    })
    .await
    .map_err(io)?;

    let worker_addr = master.worker_addr.to_string();
    let mut worker_tasks = Vec::new();
    for spec in &scenario.workers {
        let detector = scenario
            .effective_detector(spec)
            .build()
            .map_err(|source| ScenarioError::Detector {
                worker: spec.id.clone(),
                source,
            })?;
        let agent = WorkerAgent::new(spec.id.clone(), spec.tier, spec.slots, detector);
        let addr = worker_addr.clone();
        worker_tasks.push(tokio::spawn(async move {
            if let Err(e) = run_worker(agent, &addr).await {
                log::warn!("loopback worker stopped: {e}");
            }
        }));
    }

    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let live = master.health().await.map_or(0, |h| h.live_workers);
        if live == scenario.workers.len() {
            break;
        }
        if Instant::now() > deadline {
            return Err(ScenarioError::Invalid("workers did not register within 10 s".into()));
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }

    let client = GatewayClient::new(format!("http://{}", master.http_addr))
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let start = tokio::time::Instant::now();
    let calls = subs.iter().zip(requests).map(|(sub, req)| {
        let client = client.clone();
        let at = start + Duration::from_micros(sub.at_us);
        async move {
            tokio::time::sleep_until(at).await;
            match client
                .detect(&req.payload, req.headers.mode, req.headers.client_rescaled)
                .await
            {
                Ok(o) => o,
                Err(e) => DetectOutcome {
                    image_id: req.payload.image_id.clone(),
                    status: 0,
                    response: None,
                    error: Some(e.to_string()),
                    elapsed_ms: 0.0,
                },
            }
        }
    });
    let outcomes = join_all(calls).await;

    for t in worker_tasks {
        t.abort();
    }
    drop(master);
    Ok(LoopbackRun { outcomes })
}
