//! Starts a master and two mock workers on loopback, pushes a burst of
//! synthetic PPM images through the HTTP endpoint, and compares the answers
//! with the same scenario on the virtual clock.
//!
//!     cargo run --example loopback_cluster

use fogdetect::detection::{BoundingBox, Detection};
use fogdetect::harness::real::run_loopback;
use fogdetect::harness::{run_scenario, LinkModel, PayloadSpec, Scenario, WorkerSpec};
use fogdetect::master::SchedulerConfig;
use fogdetect::metrics::NodePower;
use fogdetect::preprocess::Mode;
use fogdetect::protocol::Tier;
use fogdetect::worker::{DetectorSpec, LatencyModel};

fn worker(id: &str) -> WorkerSpec {
    WorkerSpec {
        id: id.into(),
        tier: Tier::Fog,
        slots: 1,
        detector: DetectorSpec::Mock {
            latency: LatencyModel::Fixed { ms: 80.0 },
            seed: 1,
            detections: vec![Detection::new(14, 0.82, BoundingBox::new(0.4, 0.55, 0.2, 0.5))],
        },
        link: LinkModel::LAN,
        power: NodePower {
            idle_watts: 12.0,
            busy_watts: 20.0,
        },
        fail_at_s: None,
        stall: None,
    }
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = Scenario {
        name: "loopback-demo".into(),
        topology: "fog2".into(),
        mode: Mode::LowLatency,
        rate_per_min: 600.0,
        duration_s: 2.0,
        seed: 5,
        client_rescale: false,
        warmup_s: 0.0,
        payload: PayloadSpec::Synthetic { width: 640, height: 480 },
        client_link: LinkModel::LAN,
        master: SchedulerConfig::default(),
        master_power: NodePower {
            idle_watts: 10.0,
            busy_watts: 10.0,
        },
        workers: vec![worker("fog-a"), worker("fog-b")],
        ground_truth: None,
    };

    let real = run_loopback(&scenario).await?;
    let sim = run_scenario(&scenario)?;
    println!("image       real ms   sim ms");
    for ((id, real_ms), (_, sim_ms)) in real.responses_ms().iter().zip(&sim.responses_ms) {
        let fmt = |v: &Option<f64>| v.map_or("failed".to_string(), |x| format!("{x:.1}"));
        println!("{id}  {:>7}  {:>7}", fmt(real_ms), fmt(sim_ms));
    }
    println!(
        "completed: real {} / sim {}; detections identical: {}",
        real.completed(),
        sim.report.completed,
        real.detections() == sim.detections
    );
    Ok(())
}
