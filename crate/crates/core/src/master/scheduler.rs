//! The master's scheduling state machine.
//!
//! All registry and task-table mutations happen here, driven by explicit
//! timestamps. The type performs no I/O: every outbound effect is queued as
//! an [`Action`] for the caller to carry out. The real server and the
//! virtual-clock simulator both drive this same machine.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{self, ImagePayload, Mode, PreprocessError, DEFAULT_TARGET_LONG_SIDE};
use crate::protocol::http::{HealthResponse, WorkerSummary};
use crate::protocol::{codes, ErrorMsg, Message, RegisterAck, RegisterMsg, ResultEnvelope, TaskEnvelope, TaskHeader, Tier};

/// Timestamps are microseconds since an arbitrary epoch.
pub type Micros = u64;

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round() as Micros
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub mode_default: Mode,
    pub target_long_side: u32,
    pub heartbeat_interval_ms: u64,
    /// Missed intervals before a worker is declared dead.
    pub heartbeat_timeout_intervals: u32,
    pub max_attempts: u32,
    pub queue_wait_timeout_ms: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode_default: Mode::HighAccuracy,
            target_long_side: DEFAULT_TARGET_LONG_SIDE,
            heartbeat_interval_ms: 2000,
            heartbeat_timeout_intervals: 3,
            max_attempts: 5,
            queue_wait_timeout_ms: 10_000,
        }
    }
}

impl SchedulerConfig {
    pub fn heartbeat_timeout_us(&self) -> Micros {
        self.heartbeat_interval_ms * self.heartbeat_timeout_intervals as u64 * 1000
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerRecord {
    pub worker_id: String,
    pub tier: Tier,
    pub slots: u32,
    pub outstanding: u32,
    pub registered_seq: u64,
    pub last_heartbeat: Micros,
    pub alive: bool,
    /// Tasks sent to this worker that it has not answered yet.
    pub in_flight: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Queued,
    Dispatched,
    Done,
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskState::Queued => "queued",
            TaskState::Dispatched => "dispatched",
            TaskState::Done => "done",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task_id: String,
    pub image_id: String,
    pub mode: Mode,
    pub state: TaskState,
    pub attempts: u32,
    pub assigned_worker: Option<String>,
    pub enqueue_time: Micros,
    pub dispatch_time: Option<Micros>,
    pub done_time: Option<Micros>,
    /// True when the task ended in an error instead of a result.
    pub failed: bool,
    seq: u64,
    queued_since: Micros,
    payload: ImagePayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskFailure {
    #[error("no worker became available within the queue wait timeout")]
    Unavailable,
    #[error("task failed after {attempts} attempts: {last_error}")]
    AttemptsExhausted { attempts: u32, last_error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("worker id must not be empty")]
    EmptyId,
    #[error("worker {0} is already registered and alive")]
    DuplicateLive(String),
}

/// An effect the caller must carry out.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Send a TASK frame to a worker.
    Dispatch { worker_id: String, envelope: TaskEnvelope },
    /// Send a control message (ack or error) to a worker.
    Reply { worker_id: String, message: Message },
    /// Answer the gateway with the first result for this task.
    Complete {
        task_id: String,
        image_id: String,
        result: ResultEnvelope,
        total_ms: f64,
    },
    /// Answer the gateway with an error.
    Fail {
        task_id: String,
        image_id: String,
        failure: TaskFailure,
    },
}

/// One task state change, rendered as a structured log line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub time_us: Micros,
    pub task_id: String,
    pub image_id: String,
    /// `None` for newly created tasks.
    pub from: Option<TaskState>,
    /// `None` when the task failed terminally.
    pub to: Option<TaskState>,
    pub attempt: u32,
    pub worker_id: Option<String>,
}

impl fmt::Display for Transition {
    /// Field order: `t_us task image from to attempt worker`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let from = self.from.map_or("new".to_string(), |s| s.to_string());
        let to = self.to.map_or("failed".to_string(), |s| s.to_string());
        write!(
            f,
            "t_us={} task={} image={} from={} to={} attempt={} worker={}",
            self.time_us,
            self.task_id,
            self.image_id,
            from,
            to,
            self.attempt,
            self.worker_id.as_deref().unwrap_or("-")
        )
    }
}

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub struct Scheduler {
    config: SchedulerConfig,
    workers: BTreeMap<String, WorkerRecord>,
    tasks: HashMap<String, TaskRecord>,
    /// Queued tasks keyed by submission order.
    queue: BTreeMap<u64, String>,
    next_worker_seq: u64,
    next_task_seq: u64,
    last_pick_seq: Option<u64>,
    unavailable_since: Option<Micros>,
    outbox: Vec<Action>,
    transitions: Vec<Transition>,
    duplicates_dropped: u64,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self {
            config,
            workers: BTreeMap::new(),
            tasks: HashMap::new(),
            queue: BTreeMap::new(),
            next_worker_seq: 0,
            next_task_seq: 0,
            last_pick_seq: None,
            unavailable_since: Some(0),
            outbox: Vec::new(),
            transitions: Vec::new(),
            duplicates_dropped: 0,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn take_actions(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_transitions(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.transitions)
    }

    pub fn worker(&self, worker_id: &str) -> Option<&WorkerRecord> {
        self.workers.get(worker_id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerRecord> {
        self.workers.values()
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskRecord> {
        self.tasks.get(task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values()
    }

    pub fn queued_len(&self) -> usize {
        self.queue.len()
    }

    pub fn live_workers(&self) -> usize {
        self.workers.values().filter(|w| w.alive).count()
    }

    /// Late results discarded because their task was already done.
    pub fn duplicates_dropped(&self) -> u64 {
        self.duplicates_dropped
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            live_workers: self.live_workers(),
            queued_tasks: self.queue.len(),
            workers: self
                .workers
                .values()
                .map(|w| WorkerSummary {
                    worker_id: w.worker_id.clone(),
                    tier: w.tier,
                    alive: w.alive,
                    outstanding: w.outstanding,
                    registered_seq: w.registered_seq,
                })
                .collect(),
        }
    }

    fn log(&mut self, now: Micros, task_id: &str, from: Option<TaskState>, to: Option<TaskState>) {
        let task = &self.tasks[task_id];
        self.transitions.push(Transition {
            time_us: now,
            task_id: task_id.to_string(),
            image_id: task.image_id.clone(),
            from,
            to,
            attempt: task.attempts,
            worker_id: task.assigned_worker.clone(),
        });
    }

    fn update_availability(&mut self, now: Micros) {
        if self.live_workers() > 0 {
            self.unavailable_since = None;
        } else if self.unavailable_since.is_none() {
            self.unavailable_since = Some(now);
        }
    }

    /// Adds a worker, replacing a stale record with the same id.
    pub fn register_worker(&mut self, msg: RegisterMsg, now: Micros) -> Result<WorkerRecord, RegisterError> {
        if msg.worker_id.is_empty() {
            return Err(RegisterError::EmptyId);
        }
        if let Some(existing) = self.workers.get(&msg.worker_id) {
            // a record past its heartbeat timeout is dead even if no reap ran yet
            let expired = now.saturating_sub(existing.last_heartbeat) > self.config.heartbeat_timeout_us();
            if existing.alive && !expired {
                self.outbox.push(Action::Reply {
                    worker_id: msg.worker_id.clone(),
                    message: Message::Error(ErrorMsg {
                        code: codes::DUPLICATE_WORKER.into(),
                        message: format!("worker {} is already registered", msg.worker_id),
                        task_id: None,
                        worker_id: Some(msg.worker_id.clone()),
                    }),
                });
                return Err(RegisterError::DuplicateLive(msg.worker_id));
            }
            let stale = self.workers.remove(&msg.worker_id).expect("present");
            self.requeue_in_flight(&stale, now);
        }

        let record = WorkerRecord {
            worker_id: msg.worker_id.clone(),
            tier: msg.tier,
            slots: msg.slots.max(1),
            outstanding: 0,
            registered_seq: self.next_worker_seq,
            last_heartbeat: now,
            alive: true,
            in_flight: BTreeSet::new(),
        };
        self.next_worker_seq += 1;
        self.workers.insert(record.worker_id.clone(), record.clone());
        self.update_availability(now);
        self.outbox.push(Action::Reply {
            worker_id: record.worker_id.clone(),
            message: Message::RegisterAck(RegisterAck {
                worker_id: record.worker_id.clone(),
                registered_seq: record.registered_seq,
                heartbeat_interval_ms: self.config.heartbeat_interval_ms,
            }),
        });
        self.dispatch(now);
        Ok(record)
    }

    pub fn heartbeat(&mut self, worker_id: &str, now: Micros) {
        match self.workers.get_mut(worker_id) {
            Some(w) if w.alive => w.last_heartbeat = w.last_heartbeat.max(now),
            _ => self.outbox.push(Action::Reply {
                worker_id: worker_id.to_string(),
                message: Message::Error(ErrorMsg {
                    code: codes::REREGISTER.into(),
                    message: "worker is not registered or was declared dead".into(),
                    task_id: None,
                    worker_id: Some(worker_id.to_string()),
                }),
            }),
        }
    }

    /// Accepts a gateway submission: pre-processes it for `mode`, queues it,
    /// and dispatches if a worker is free. Returns the new task id.
    pub fn submit(
        &mut self,
        payload: ImagePayload,
        mode: Mode,
        client_rescaled: bool,
        now: Micros,
    ) -> Result<String, SubmitError> {
        let prepared = if client_rescaled {
            payload
        } else {
            preprocess::prepare(&payload, mode, self.config.target_long_side)?
        };
        let seq = self.next_task_seq;
        self.next_task_seq += 1;
        let task_id = format!("t{seq:06}");
        self.tasks.insert(
            task_id.clone(),
            TaskRecord {
                task_id: task_id.clone(),
                image_id: prepared.image_id.clone(),
                mode,
                state: TaskState::Queued,
                attempts: 0,
                assigned_worker: None,
                enqueue_time: now,
                dispatch_time: None,
                done_time: None,
                failed: false,
                seq,
                queued_since: now,
                payload: prepared,
            },
        );
        self.queue.insert(seq, task_id.clone());
        self.log(now, &task_id, None, Some(TaskState::Queued));
        self.dispatch(now);
        Ok(task_id)
    }

    /// Least-outstanding choice among live workers with a free slot; equal
    /// loads rotate by registration order.
    pub fn select_worker(&mut self) -> Option<String> {
        let min = self
            .workers
            .values()
            .filter(|w| w.alive && w.outstanding < w.slots)
            .map(|w| w.outstanding)
            .min()?;
        let mut tied: Vec<&WorkerRecord> = self
            .workers
            .values()
            .filter(|w| w.alive && w.outstanding < w.slots && w.outstanding == min)
            .collect();
        tied.sort_by_key(|w| w.registered_seq);
        let pick = match self.last_pick_seq {
            Some(last) => tied
                .iter()
                .find(|w| w.registered_seq > last)
                .unwrap_or(&tied[0]),
            None => &tied[0],
        };
        self.last_pick_seq = Some(pick.registered_seq);
        Some(pick.worker_id.clone())
    }

    /// Assigns queued tasks, oldest first, while workers have free slots.
    pub fn dispatch(&mut self, now: Micros) {
        while let Some(seq) = self.queue.keys().next().copied() {
            let Some(worker_id) = self.select_worker() else {
                break;
            };
            let task_id = self.queue.remove(&seq).expect("present");
            let task = self.tasks.get_mut(&task_id).expect("queued task exists");
            task.state = TaskState::Dispatched;
            task.attempts += 1;
            task.assigned_worker = Some(worker_id.clone());
            task.dispatch_time = Some(now);
            let envelope = TaskEnvelope {
                header: TaskHeader {
                    task_id: task_id.clone(),
                    image_id: task.image_id.clone(),
                    mode: task.mode,
                    attempt: task.attempts,
                    width: task.payload.width,
                    height: task.payload.height,
                    format: task.payload.format,
                },
                payload: task.payload.bytes.clone(),
            };
            let worker = self.workers.get_mut(&worker_id).expect("selected worker exists");
            worker.outstanding += 1;
            worker.in_flight.insert(task_id.clone());
            self.log(now, &task_id, Some(TaskState::Queued), Some(TaskState::Dispatched));
            self.outbox.push(Action::Dispatch { worker_id, envelope });
        }
    }

    fn release(&mut self, worker_id: &str, task_id: &str) {
        if let Some(w) = self.workers.get_mut(worker_id) {
            if w.in_flight.remove(task_id) {
                w.outstanding -= 1;
            }
        }
    }

    /// Handles a RESULT frame. The first result for a task wins; later ones
    /// are dropped.
    pub fn on_result(&mut self, result: ResultEnvelope, now: Micros) {
        self.release(&result.worker_id, &result.task_id);
        let Some(task) = self.tasks.get_mut(&result.task_id) else {
            self.duplicates_dropped += 1;
            self.dispatch(now);
            return;
        };
        if task.state == TaskState::Done {
            self.duplicates_dropped += 1;
            self.dispatch(now);
            return;
        }
        let from = task.state;
        if from == TaskState::Queued {
            self.queue.remove(&task.seq);
        }
        task.state = TaskState::Done;
        task.done_time = Some(now);
        task.assigned_worker = Some(result.worker_id.clone());
        let total_ms = us_to_ms(now - task.enqueue_time);
        let (task_id, image_id) = (task.task_id.clone(), task.image_id.clone());
        self.log(now, &task_id, Some(from), Some(TaskState::Done));
        self.outbox.push(Action::Complete {
            task_id,
            image_id,
            result,
            total_ms,
        });
        self.dispatch(now);
    }

    /// Handles an ERROR frame from a worker. Task-scoped errors count as a
    /// failed attempt; the task is retried until `max_attempts`.
    pub fn on_worker_error(&mut self, worker_id: &str, error: ErrorMsg, now: Micros) {
        let Some(task_id) = error.task_id.clone() else {
            return;
        };
        let was_in_flight = self
            .workers
            .get(worker_id)
            .is_some_and(|w| w.in_flight.contains(&task_id));
        self.release(worker_id, &task_id);
        let assigned_here = self.tasks.get(&task_id).is_some_and(|t| {
            t.state == TaskState::Dispatched && t.assigned_worker.as_deref() == Some(worker_id)
        });
        if was_in_flight && assigned_here {
            self.retry_or_fail(&task_id, format!("{}: {}", error.code, error.message), now);
        }
        self.dispatch(now);
    }

    fn retry_or_fail(&mut self, task_id: &str, reason: String, now: Micros) {
        let max_attempts = self.config.max_attempts;
        let task = self.tasks.get_mut(task_id).expect("task exists");
        if task.attempts >= max_attempts {
            task.state = TaskState::Done;
            task.failed = true;
            task.done_time = Some(now);
            let attempts = task.attempts;
            let image_id = task.image_id.clone();
            self.log(now, task_id, Some(TaskState::Dispatched), None);
            self.outbox.push(Action::Fail {
                task_id: task_id.to_string(),
                image_id,
                failure: TaskFailure::AttemptsExhausted {
                    attempts,
                    last_error: reason,
                },
            });
        } else {
            task.state = TaskState::Queued;
            task.assigned_worker = None;
            task.queued_since = now;
            self.queue.insert(task.seq, task_id.to_string());
            self.log(now, task_id, Some(TaskState::Dispatched), Some(TaskState::Queued));
        }
    }

    fn requeue_in_flight(&mut self, worker: &WorkerRecord, now: Micros) -> Vec<String> {
        let mut requeued = Vec::new();
        for task_id in &worker.in_flight {
            let still_assigned = self.tasks.get(task_id).is_some_and(|t| {
                t.state == TaskState::Dispatched && t.assigned_worker.as_deref() == Some(&worker.worker_id)
            });
            if still_assigned {
                self.retry_or_fail(task_id, format!("worker {} lost", worker.worker_id), now);
                requeued.push(task_id.clone());
            }
        }
        requeued
    }

    fn mark_dead(&mut self, worker_id: &str, now: Micros) -> Vec<String> {
        let Some(w) = self.workers.get_mut(worker_id) else {
            return Vec::new();
        };
        if !w.alive {
            return Vec::new();
        }
        w.alive = false;
        w.outstanding = 0;
        let snapshot = w.clone();
        w.in_flight.clear();
        let requeued = self.requeue_in_flight(&snapshot, now);
        self.update_availability(now);
        requeued
    }

    /// Connection to a worker closed: fail over immediately.
    pub fn worker_disconnected(&mut self, worker_id: &str, now: Micros) -> Vec<String> {
        let requeued = self.mark_dead(worker_id, now);
        self.dispatch(now);
        requeued
    }

    /// Declares silent workers dead and re-queues their in-flight tasks.
    /// Returns the ids of the tasks moved back to the queue (or failed, when
    /// out of attempts).
    pub fn reap_and_requeue(&mut self, now: Micros) -> Vec<String> {
        let timeout = self.config.heartbeat_timeout_us();
        let dead: Vec<String> = self
            .workers
            .values()
            .filter(|w| w.alive && now.saturating_sub(w.last_heartbeat) > timeout)
            .map(|w| w.worker_id.clone())
            .collect();
        let mut requeued = Vec::new();
        for id in dead {
            requeued.extend(self.mark_dead(&id, now));
        }
        requeued
    }

    /// Fails queued tasks that waited longer than the queue timeout while no
    /// worker was alive.
    pub fn expire_waiting(&mut self, now: Micros) -> Vec<String> {
        let Some(since) = self.unavailable_since else {
            return Vec::new();
        };
        let limit = self.config.queue_wait_timeout_ms * 1000;
        let expired: Vec<(u64, String)> = self
            .queue
            .iter()
            .filter(|(_, id)| now.saturating_sub(self.tasks[*id].queued_since.max(since)) >= limit)
            .map(|(s, id)| (*s, id.clone()))
            .collect();
        for (seq, task_id) in &expired {
            self.queue.remove(seq);
            let task = self.tasks.get_mut(task_id).expect("task exists");
            task.state = TaskState::Done;
            task.failed = true;
            task.done_time = Some(now);
            let image_id = task.image_id.clone();
            self.log(now, task_id, Some(TaskState::Queued), None);
            self.outbox.push(Action::Fail {
                task_id: task_id.clone(),
                image_id,
                failure: TaskFailure::Unavailable,
            });
        }
        expired.into_iter().map(|(_, id)| id).collect()
    }

    /// Periodic housekeeping: reap, expire, dispatch.
    pub fn tick(&mut self, now: Micros) -> Vec<String> {
        let requeued = self.reap_and_requeue(now);
        self.expire_waiting(now);
        self.dispatch(now);
        requeued
    }

    /// Checks the bookkeeping invariants; used by tests and the simulator.
    pub fn check_invariants(&self) -> Result<(), String> {
        for w in self.workers.values() {
            if w.outstanding as usize != w.in_flight.len() {
                return Err(format!(
                    "worker {} outstanding {} != in-flight {}",
                    w.worker_id,
                    w.outstanding,
                    w.in_flight.len()
                ));
            }
            if w.outstanding > w.slots {
                return Err(format!("worker {} exceeds its slots", w.worker_id));
            }
        }
        for t in self.tasks.values() {
            if t.state == TaskState::Dispatched {
                let w = t.assigned_worker.as_deref().ok_or("dispatched task without worker")?;
                if !self.workers.get(w).is_some_and(|r| r.in_flight.contains(&t.task_id)) {
                    return Err(format!("task {} missing from {w}'s in-flight set", t.task_id));
                }
            }
            let queued = self.queue.get(&t.seq) == Some(&t.task_id);
            if queued != (t.state == TaskState::Queued) {
                return Err(format!("task {} queue membership disagrees with state", t.task_id));
            }
        }
        Ok(())
    }
}
