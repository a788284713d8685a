//! Single-threaded discrete-event run of a whole deployment.
//!
//! Master, workers, and gateway exchange the same messages as in a real
//! deployment. Each message is charged its canonical wire size and delivered
//! after its link's transfer time on a virtual clock. Nothing here reads the
//! wall clock, so equal scenarios produce equal ledgers.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use super::scenario::{PayloadSource, Request, Scenario, ScenarioError, Submission};
use crate::detection::Detection;
use crate::master::{ms_to_us, Action, Micros, Scheduler, TaskFailure};
use crate::metrics::{
    bandwidth, energy, evaluate_map, fpm, jitter, Completion, Direction, GroundTruth, LedgerEntry, MetricsReport,
    PowerModel, RunLedger, DEFAULT_MATCH_IOU,
};
use crate::protocol::http::{response_wire_len, DetectResponse, ErrorBody, Timing};
use crate::protocol::{codes, HeartbeatMsg, Message, RegisterMsg, Tier};
use crate::worker::{ExecClock, SlotGuard, WorkerAgent};

/// Event queue ordered by time, then by insertion order.
#[derive(Debug)]
pub struct VirtualClock<E> {
    now: Micros,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(Micros, u64)>>,
    pending: HashMap<u64, E>,
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        Self {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
            pending: HashMap::new(),
        }
    }
}

impl<E> VirtualClock<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    /// Schedules `event` at `at`, or now if `at` is in the past.
    pub fn schedule(&mut self, at: Micros, event: E) {
        let at = at.max(self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.pending.insert(seq, event);
    }

    /// Advances to the next event and returns it.
    pub fn pop(&mut self) -> Option<(Micros, E)> {
        let Reverse((at, seq)) = self.heap.pop()?;
        self.now = at;
        Some((at, self.pending.remove(&seq).expect("scheduled event exists")))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug)]
enum Event {
    /// The gateway sends submission `i`.
    Send(usize),
    /// Submission `i` reaches the master.
    HttpArrive(usize),
    /// A frame from worker `w` reaches the master.
    ToMaster(usize, Message),
    /// A frame from the master reaches worker `w`.
    ToWorker(usize, Message),
    /// Worker `w` finished a task; the reply is ready to send.
    ComputeDone(usize, u64, Message),
    Heartbeat(usize),
    Tick,
    Crash(usize),
    /// A response reaches the gateway.
    Response,
}

struct SimWorker {
    agent: WorkerAgent,
    index: usize,
    crashed: bool,
    heartbeating: bool,
    guards: HashMap<u64, SlotGuard>,
    busy: Vec<(Micros, Micros)>,
}

#[derive(Debug, Clone, Default)]
struct Pending {
    request: Option<Request>,
    send_us: Micros,
    task_id: String,
    enqueue_us: Micros,
    done_us: Micros,
    recv_us: Micros,
    status: u16,
    response: Option<DetectResponse>,
}

/// Everything a simulated run produces.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: MetricsReport,
    pub ledger: RunLedger,
    /// Detections returned to the gateway, per image.
    pub detections: BTreeMap<String, Vec<Detection>>,
    /// Per-submission response time in injection order; `None` for failures.
    pub responses_ms: Vec<(String, Option<f64>)>,
    /// Tasks completed per worker.
    pub per_worker: BTreeMap<String, usize>,
    /// Largest difference in outstanding counts between live workers seen
    /// after any event.
    pub max_outstanding_spread: u32,
    /// Highest attempt count of any task.
    pub max_attempts: u32,
    /// Time of the last gateway response, or the end of injection.
    pub end_us: Micros,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    clock: VirtualClock<Event>,
    scheduler: Scheduler,
    workers: Vec<SimWorker>,
    by_id: HashMap<String, usize>,
    subs: Vec<Submission>,
    pending: Vec<Pending>,
    task_to_sub: HashMap<String, usize>,
    resolved: usize,
    ledger: RunLedger,
    next_exec: u64,
    max_spread: u32,
    invariant_error: Option<String>,
}

const MAX_EVENTS: u64 = 50_000_000;

/// Runs a scenario on the virtual clock.
pub fn run_scenario(scenario: &Scenario) -> Result<SimOutcome, ScenarioError> {
    scenario.validate()?;
    let subs = scenario.submissions()?;
    scenario.check_resources(&subs)?;
    let ground_truth = match &scenario.ground_truth {
        Some(dir) => Some(GroundTruth::read_dir(dir).map_err(|e| ScenarioError::Payload(e.to_string()))?),
        None => None,
    };
    let source = PayloadSource::new(&scenario.payload, scenario.seed)?;
    let requests = subs
        .iter()
        .map(|s| source.request(scenario, s))
        .collect::<Result<Vec<_>, _>>()?;

    let mut workers = Vec::new();
    let mut by_id = HashMap::new();
    for (i, spec) in scenario.workers.iter().enumerate() {
        let detector = scenario
            .effective_detector(spec)
            .build()
            .map_err(|source| ScenarioError::Detector {
                worker: spec.id.clone(),
                source,
            })?;
        workers.push(SimWorker {
            agent: WorkerAgent::new(spec.id.clone(), spec.tier, spec.slots, detector),
            index: i,
            crashed: false,
            heartbeating: false,
            guards: HashMap::new(),
            busy: Vec::new(),
        });
        by_id.insert(spec.id.clone(), i);
    }

    let mut sim = Sim {
        scenario,
        clock: VirtualClock::new(),
        scheduler: Scheduler::new(scenario.master.clone()),
        workers,
        by_id,
        pending: requests
            .into_iter()
            .map(|r| Pending {
                request: Some(r),
                ..Default::default()
            })
            .collect(),
        subs,
        task_to_sub: HashMap::new(),
        resolved: 0,
        ledger: RunLedger {
            duration_us: scenario.duration_us(),
            ..Default::default()
        },
        next_exec: 0,
        max_spread: 0,
        invariant_error: None,
    };
    sim.run()?;
    Ok(sim.finish(ground_truth))
}

impl Sim<'_> {
    fn active(&self) -> bool {
        self.resolved < self.subs.len()
    }

    fn run(&mut self) -> Result<(), ScenarioError> {
        if self.subs.is_empty() {
            return Ok(());
        }
        for w in 0..self.workers.len() {
            let spec = &self.scenario.workers[w];
            let register = Message::Register(RegisterMsg {
                worker_id: spec.id.clone(),
                tier: spec.tier,
                slots: spec.slots,
            });
            self.send_to_master(w, 0, register);
            if let Some(at) = Scenario::fail_at_us(spec) {
                self.clock.schedule(at, Event::Crash(w));
            }
        }
        let warmup = self.scenario.warmup_us();
        for i in 0..self.subs.len() {
            self.clock.schedule(warmup + self.subs[i].at_us, Event::Send(i));
        }
        self.clock.schedule(self.tick_period(), Event::Tick);

        let mut processed = 0u64;
        while let Some((now, event)) = self.clock.pop() {
            processed += 1;
            if processed > MAX_EVENTS {
                return Err(ScenarioError::Invalid("simulation did not settle".into()));
            }
            self.handle(now, event);
            self.observe();
        }
        if let Some(e) = self.invariant_error.take() {
            return Err(ScenarioError::Invalid(format!("scheduler invariant violated: {e}")));
        }
        Ok(())
    }

    fn tick_period(&self) -> Micros {
        self.scenario.master.heartbeat_interval_ms * 1000
    }

    fn observe(&mut self) {
        if self.invariant_error.is_none() {
            if let Err(e) = self.scheduler.check_invariants() {
                self.invariant_error = Some(e);
            }
        }
        let live: Vec<u32> = self.scheduler.workers().filter(|w| w.alive).map(|w| w.outstanding).collect();
        if let (Some(lo), Some(hi)) = (live.iter().min(), live.iter().max()) {
            self.max_spread = self.max_spread.max(hi - lo);
        }
    }

    fn handle(&mut self, now: Micros, event: Event) {
        match event {
            Event::Send(i) => {
                let req = self.pending[i].request.as_ref().expect("request present");
                let size = req.headers.request_wire_len(req.payload.byte_len());
                self.pending[i].send_us = now;
                let arrive = now + self.scenario.client_link.transfer_us(size);
                self.clock.schedule(arrive, Event::HttpArrive(i));
            }
            Event::HttpArrive(i) => self.http_arrive(now, i),
            Event::ToMaster(w, msg) => self.master_receive(now, w, msg),
            Event::ToWorker(w, msg) => self.worker_receive(now, w, msg),
            Event::ComputeDone(w, exec, msg) => {
                if self.workers[w].crashed {
                    return;
                }
                self.workers[w].guards.remove(&exec);
                self.send_to_master(w, now, msg);
            }
            Event::Heartbeat(w) => {
                if self.workers[w].crashed || !self.active() {
                    self.workers[w].heartbeating = false;
                    return;
                }
                let hb = Message::Heartbeat(HeartbeatMsg {
                    worker_id: self.workers[w].agent.worker_id.clone(),
                });
                self.send_to_master(w, now, hb);
                self.clock.schedule(now + self.tick_period(), Event::Heartbeat(w));
            }
            Event::Tick => {
                self.scheduler.tick(now);
                self.apply_actions(now);
                if self.active() {
                    self.clock.schedule(now + self.tick_period(), Event::Tick);
                }
            }
            Event::Crash(w) => {
                let worker = &mut self.workers[w];
                worker.crashed = true;
                worker.guards.clear();
                for iv in &mut worker.busy {
                    iv.1 = iv.1.min(now.max(iv.0));
                }
            }
            Event::Response => self.resolved += 1,
        }
    }

    fn http_arrive(&mut self, now: Micros, i: usize) {
        let req = self.pending[i].request.take().expect("request present");
        let size = req.headers.request_wire_len(req.payload.byte_len());
        let send_us = self.pending[i].send_us;
        let submitted =
            self.scheduler
                .submit(req.payload, req.headers.mode, req.headers.client_rescaled, now);
        let task_id = match submitted {
            Ok(id) => id,
            Err(e) => {
                self.record(String::new(), &req.headers.image_id, Direction::GatewayToMaster, size, send_us, now);
                let body = serde_json::to_string(&ErrorBody { error: e.to_string() }).expect("serializes");
                self.respond(now, i, String::new(), 400, "Bad Request", body.len(), None);
                return;
            }
        };
        self.record(task_id.clone(), &req.headers.image_id, Direction::GatewayToMaster, size, send_us, now);
        self.pending[i].task_id = task_id.clone();
        self.pending[i].enqueue_us = now;
        self.task_to_sub.insert(task_id, i);
        self.apply_actions(now);
    }

    #[allow(clippy::too_many_arguments)]
    fn respond(
        &mut self,
        now: Micros,
        i: usize,
        task_id: String,
        status: u16,
        reason: &str,
        body_len: usize,
        response: Option<DetectResponse>,
    ) {
        let size = response_wire_len(status, reason, body_len);
        let image_id = self.subs[i].image_id.clone();
        let arrive = now + self.scenario.client_link.transfer_us(size);
        self.record(task_id, &image_id, Direction::MasterToGateway, size, now, arrive);
        let p = &mut self.pending[i];
        p.done_us = now;
        p.recv_us = arrive;
        if p.task_id.is_empty() {
            p.enqueue_us = now;
        }
        p.status = status;
        p.response = response;
        self.clock.schedule(arrive, Event::Response);
    }

    fn record(&mut self, task_id: String, image_id: &str, direction: Direction, bytes: usize, send: Micros, recv: Micros) {
        self.ledger.record(LedgerEntry {
            task_id,
            image_id: image_id.to_string(),
            direction,
            bytes: bytes as u64,
            send_time_us: send,
            recv_time_us: recv,
        });
    }

    fn ids_of(msg: &Message) -> (String, String) {
        match msg {
            Message::Task(t) => (t.header.task_id.clone(), t.header.image_id.clone()),
            Message::Result(r) => (r.task_id.clone(), String::new()),
            Message::Error(e) => (e.task_id.clone().unwrap_or_default(), String::new()),
            _ => (String::new(), String::new()),
        }
    }

    fn image_of(&self, task_id: &str) -> String {
        self.task_to_sub
            .get(task_id)
            .map(|&i| self.subs[i].image_id.clone())
            .unwrap_or_default()
    }

    fn send_to_master(&mut self, w: usize, now: Micros, msg: Message) {
        let spec = &self.scenario.workers[w];
        let mut send = now;
        if let Some(st) = spec.stall {
            let (from, to) = (ms_to_us(st.from_s * 1000.0), ms_to_us(st.to_s * 1000.0));
            if now >= from && now < to {
                send = to;
            }
        }
        let size = msg.wire_len();
        let arrive = send + spec.link.transfer_us(size);
        let (task_id, mut image_id) = Self::ids_of(&msg);
        if image_id.is_empty() {
            image_id = self.image_of(&task_id);
        }
        self.record(task_id, &image_id, Direction::WorkerToMaster, size, send, arrive);
        self.clock.schedule(arrive, Event::ToMaster(w, msg));
    }

    fn send_to_worker(&mut self, w: usize, now: Micros, msg: Message) {
        let size = msg.wire_len();
        let arrive = now + self.scenario.workers[w].link.transfer_us(size);
        let (task_id, mut image_id) = Self::ids_of(&msg);
        if image_id.is_empty() {
            image_id = self.image_of(&task_id);
        }
        self.record(task_id, &image_id, Direction::MasterToWorker, size, now, arrive);
        self.clock.schedule(arrive, Event::ToWorker(w, msg));
    }

    fn master_receive(&mut self, now: Micros, w: usize, msg: Message) {
        let worker_id = self.workers[w].agent.worker_id.clone();
        match msg {
            Message::Register(reg) => {
                let _ = self.scheduler.register_worker(reg, now);
            }
            Message::Heartbeat(hb) => self.scheduler.heartbeat(&hb.worker_id, now),
            Message::Result(r) => self.scheduler.on_result(r, now),
            Message::Error(e) => self.scheduler.on_worker_error(&worker_id, e, now),
            other => log::warn!("master ignores {other:?} from {worker_id}"),
        }
        self.apply_actions(now);
    }

    fn worker_receive(&mut self, now: Micros, w: usize, msg: Message) {
        if self.workers[w].crashed {
            return;
        }
        match msg {
            Message::Task(envelope) => {
                let worker = &mut self.workers[w];
                match worker.agent.try_acquire(&envelope.header) {
                    Err(refusal) => self.send_to_master(w, now, refusal),
                    Ok(guard) => {
                        let reply = worker.agent.execute(&envelope, ExecClock::Virtual);
                        let compute_ms = match &reply {
                            Message::Result(r) => r.compute_ms,
                            _ => 0.0,
                        };
                        let done = now + ms_to_us(compute_ms);
                        if done > now {
                            worker.busy.push((now, done));
                        }
                        let exec = self.next_exec;
                        self.next_exec += 1;
                        worker.guards.insert(exec, guard);
                        self.clock.schedule(done, Event::ComputeDone(w, exec, reply));
                    }
                }
            }
            Message::RegisterAck(_) => {
                if !self.workers[w].heartbeating {
                    self.workers[w].heartbeating = true;
                    self.clock.schedule(now + self.tick_period(), Event::Heartbeat(w));
                }
            }
            Message::Error(e) if e.code == codes::REREGISTER => {
                let spec = &self.scenario.workers[w];
                let register = Message::Register(RegisterMsg {
                    worker_id: spec.id.clone(),
                    tier: spec.tier,
                    slots: spec.slots,
                });
                self.send_to_master(w, now, register);
            }
            other => log::debug!("worker {} ignores {other:?}", self.workers[w].agent.worker_id),
        }
    }

    fn apply_actions(&mut self, now: Micros) {
        for t in self.scheduler.take_transitions() {
            log::debug!(target: "fogdetect::transitions", "{t}");
        }
        for action in self.scheduler.take_actions() {
            match action {
                Action::Dispatch { worker_id, envelope } => {
                    let w = self.by_id[&worker_id];
                    self.send_to_worker(w, now, Message::Task(envelope));
                }
                Action::Reply { worker_id, message } => {
                    if let Some(&w) = self.by_id.get(&worker_id) {
                        self.send_to_worker(w, now, message);
                    }
                }
                Action::Complete {
                    task_id,
                    image_id,
                    result,
                    total_ms,
                } => {
                    let i = self.task_to_sub[&task_id];
                    let response = DetectResponse {
                        image_id,
                        detections: result.detections,
                        timing: Timing {
                            total_ms,
                            compute_ms: result.compute_ms,
                            worker_id: result.worker_id,
                        },
                    };
                    let body_len = response.to_json().len();
                    self.respond(now, i, task_id, 200, "OK", body_len, Some(response));
                }
                Action::Fail { task_id, failure, .. } => {
                    let i = self.task_to_sub[&task_id];
                    let (status, reason) = match failure {
                        TaskFailure::Unavailable => (503, "Service Unavailable"),
                        TaskFailure::AttemptsExhausted { .. } => (502, "Bad Gateway"),
                    };
                    let body = serde_json::to_string(&ErrorBody {
                        error: failure.to_string(),
                    })
                    .expect("serializes");
                    self.respond(now, i, task_id, status, reason, body.len(), None);
                }
            }
        }
    }

    fn finish(mut self, ground_truth: Option<Vec<GroundTruth>>) -> SimOutcome {
        let scenario = self.scenario;
        let mut completions: Vec<Completion> = Vec::new();
        let mut detections = BTreeMap::new();
        let mut per_worker: BTreeMap<String, usize> = BTreeMap::new();
        let mut responses_ms = Vec::new();
        let mut max_attempts = 0;
        for (i, p) in self.pending.iter().enumerate() {
            let image_id = self.subs[i].image_id.clone();
            if p.status == 0 {
                responses_ms.push((image_id, None));
                continue;
            }
            let (compute_ms, worker_id) = match &p.response {
                Some(r) => (r.timing.compute_ms, r.timing.worker_id.clone()),
                None => (0.0, String::new()),
            };
            if let Some(r) = &p.response {
                detections.insert(image_id.clone(), r.detections.clone());
                *per_worker.entry(worker_id.clone()).or_default() += 1;
            }
            if let Some(t) = self.scheduler.task(&p.task_id) {
                max_attempts = max_attempts.max(t.attempts);
            }
            let c = Completion {
                task_id: p.task_id.clone(),
                image_id: image_id.clone(),
                submit_time_us: p.send_us,
                enqueue_time_us: p.enqueue_us,
                done_time_us: p.done_us,
                recv_time_us: p.recv_us,
                compute_ms,
                worker_id,
                status: p.status,
            };
            responses_ms.push((image_id, c.ok().then(|| c.response_ms())));
            completions.push(c);
        }
        completions.sort_by_key(|c| (c.recv_time_us, c.submit_time_us));

        let warmup = scenario.warmup_us();
        let last_send = self.subs.last().map_or(0, |s| warmup + s.at_us);
        let end_us = completions.iter().map(|c| c.recv_time_us).max().unwrap_or(0).max(last_send);

        let ok: Vec<&Completion> = completions.iter().filter(|c| c.ok()).collect();
        let latencies: Vec<f64> = ok.iter().map(|c| c.response_ms()).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let compute: Vec<f64> = ok.iter().map(|c| c.compute_ms).collect();
        let done_times: Vec<Micros> = ok.iter().map(|c| c.recv_time_us).collect();
        let window = scenario.duration_us();
        let fpm_value = match done_times.first() {
            Some(&start) if window > 0 => fpm(&done_times, start, window).unwrap_or(0.0),
            _ => 0.0,
        };

        let mut power = PowerModel::default();
        power.nodes.insert("master".into(), scenario.master_power);
        let mut busy = BTreeMap::new();
        for (w, spec) in self.workers.iter().zip(&scenario.workers) {
            power.nodes.insert(spec.id.clone(), spec.power);
            let clipped: Vec<(Micros, Micros)> =
                w.busy.iter().map(|&(s, e)| (s.min(end_us), e.min(end_us))).collect();
            busy.insert(spec.id.clone(), clipped);
            debug_assert_eq!(w.index, self.by_id[&spec.id]);
        }
        let energy_report = energy(&busy, &power, end_us).expect("power model validated");
        let tier_energy = |tier: Tier| -> f64 {
            scenario
                .workers
                .iter()
                .filter(|s| s.tier == tier)
                .map(|s| energy_report.per_node[&s.id])
                .fold(0.0, |a, b| a + b)
        };

        let gateway = bandwidth(&self.ledger, &[Direction::GatewayToMaster]).ok();
        let total_bytes = self.ledger.entries.iter().map(|e| e.bytes).sum();
        let map = ground_truth.and_then(|gt| evaluate_map(&detections, &gt, DEFAULT_MATCH_IOU).ok().map(|m| m.map));

        self.ledger.completions = completions.clone();
        let report = MetricsReport {
            scenario: scenario.name.clone(),
            topology: scenario.topology.clone(),
            mode: scenario.mode.to_string(),
            seed: scenario.seed,
            injected: self.subs.len(),
            completed: ok.len(),
            failed: completions.len() - ok.len(),
            duplicates_dropped: self.scheduler.duplicates_dropped(),
            duration_s: scenario.duration_s,
            fpm: fpm_value,
            mean_response_ms: mean(&latencies),
            jitter_ms: jitter(&latencies).ok(),
            mean_compute_ms: mean(&compute),
            gateway_bytes: gateway.map_or(0, |b| b.bytes),
            gateway_bytes_per_min: gateway.map_or(0.0, |b| b.bytes_per_minute),
            total_bytes,
            energy_fog_j: tier_energy(Tier::Fog),
            energy_cloud_j: tier_energy(Tier::Cloud),
            energy_master_j: energy_report.per_node["master"],
            energy_total_j: energy_report.total,
            map,
        };
        SimOutcome {
            report,
            ledger: self.ledger,
            detections,
            responses_ms,
            per_worker,
            max_outstanding_spread: self.max_spread,
            max_attempts,
            end_us,
        }
    }
}
