//! Drives the sans-IO scheduler by hand: two workers, one goes silent, its
//! tasks move to the other after three missed heartbeats, and its late
//! result is dropped.
//!
//!     cargo run --example scheduler_failover

use fogdetect::master::{Action, Scheduler, SchedulerConfig};
use fogdetect::preprocess::{ImagePayload, Mode};
use fogdetect::protocol::{RegisterMsg, ResultEnvelope, Tier};

const S: u64 = 1_000_000;

fn register(id: &str) -> RegisterMsg {
    RegisterMsg {
        worker_id: id.into(),
        tier: Tier::Fog,
        slots: 2,
    }
}

fn result(task_id: &str, worker_id: &str) -> ResultEnvelope {
    ResultEnvelope {
        task_id: task_id.into(),
        worker_id: worker_id.into(),
        detections: Vec::new(),
        compute_ms: 120.0,
    }
}

fn show(s: &mut Scheduler) {
    for a in s.take_actions() {
        match a {
            Action::Dispatch { worker_id, envelope } => println!(
                "  dispatch {} (attempt {}) -> {worker_id}",
                envelope.header.task_id, envelope.header.attempt
            ),
            Action::Complete {
                task_id, result, total_ms, ..
            } => println!("  complete {task_id} from {} after {total_ms:.1} ms", result.worker_id),
            Action::Fail { task_id, failure, .. } => println!("  fail {task_id}: {failure:?}"),
            Action::Reply { worker_id, message } => println!("  reply to {worker_id}: {message:?}"),
        }
    }
    for t in s.take_transitions() {
        log::debug!("{t}");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut s = Scheduler::new(SchedulerConfig::default());
    println!("t=0 s: register a and b, submit four images");
    s.register_worker(register("a"), 0)?;
    s.register_worker(register("b"), 0)?;
    let mut tasks = Vec::new();
    for i in 0..4 {
        let img = ImagePayload::opaque(format!("img-{i}"), 64, 48, vec![0u8; 128]);
        tasks.push(s.submit(img, Mode::HighAccuracy, false, 0)?);
    }
    show(&mut s);

    println!("t=1 s: b answers its tasks; only b keeps sending heartbeats");
    for t in &tasks {
        if s.task(t).and_then(|r| r.assigned_worker.as_deref()) == Some("b") {
            s.on_result(result(t, "b"), S);
        }
    }
    show(&mut s);
    for sec in 2..=6 {
        s.heartbeat("b", sec * S);
        s.tick(sec * S);
    }
    println!("t=6 s: a is still considered alive ({} live)", s.live_workers());

    let requeued = s.tick(6 * S + 1);
    println!("t=6.000001 s: a timed out, requeued {requeued:?}");
    show(&mut s);

    println!("t=7 s: b answers the re-dispatched tasks, then a's stale answers arrive");
    for t in &requeued {
        s.on_result(result(t, "b"), 7 * S);
    }
    for t in &requeued {
        s.on_result(result(t, "a"), 8 * S);
    }
    show(&mut s);
    println!("late duplicates dropped: {}", s.duplicates_dropped());
    s.check_invariants()?;
    Ok(())
}
