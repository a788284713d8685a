//! Network front of the master.
//!
//! One actor task owns the [`Scheduler`]. HTTP handlers and worker
//! connections talk to it over a channel, so all state changes are
//! serialized the same way the simulator serializes them.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_util::codec::Framed;

use super::scheduler::{Action, Micros, RegisterError, Scheduler, SchedulerConfig, TaskFailure};
use crate::preprocess::{ImageFormat, ImagePayload, Mode};
use crate::protocol::http::{DetectHeaders, DetectResponse, ErrorBody, HealthResponse, Timing, DETECT_PATH, HEALTH_PATH};
use crate::protocol::{FrameCodec, Message, DEFAULT_MAX_FRAME};

/// Master settings. The TOML config file uses these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MasterConfig {
    pub listen_http: SocketAddr,
    pub listen_worker: SocketAddr,
    #[serde(flatten)]
    pub scheduler: SchedulerConfig,
}

impl Default for MasterConfig {
    fn default() -> Self {
        Self {
            listen_http: ([127, 0, 0, 1], 8080).into(),
            listen_worker: ([127, 0, 0, 1], 9000).into(),
            scheduler: SchedulerConfig::default(),
        }
    }
}

enum Reply {
    Done(DetectResponse),
    Failed(TaskFailure),
    Rejected(String),
}

enum Command {
    Submit {
        payload: ImagePayload,
        mode: Mode,
        client_rescaled: bool,
        reply: oneshot::Sender<Reply>,
    },
    Connected {
        conn: u64,
        tx: mpsc::UnboundedSender<Message>,
    },
    Frame {
        conn: u64,
        msg: Message,
    },
    Closed {
        conn: u64,
    },
    Health {
        reply: oneshot::Sender<HealthResponse>,
    },
    Tick,
}

struct Conn {
    tx: mpsc::UnboundedSender<Message>,
    worker_id: Option<String>,
}

struct Actor {
    scheduler: Scheduler,
    started: Instant,
    conns: HashMap<u64, Conn>,
    worker_conn: HashMap<String, u64>,
    waiters: HashMap<String, oneshot::Sender<Reply>>,
}

impl Actor {
    fn now(&self) -> Micros {
        self.started.elapsed().as_micros() as Micros
    }

    fn send_to_worker(&self, worker_id: &str, msg: Message) {
        let sent = self
            .worker_conn
            .get(worker_id)
            .and_then(|c| self.conns.get(c))
            .is_some_and(|c| c.tx.send(msg).is_ok());
        if !sent {
            log::warn!("no connection for worker {worker_id}; message dropped");
        }
    }

    fn apply(&mut self) {
        for t in self.scheduler.take_transitions() {
            log::info!(target: "fogdetect::transitions", "{t}");
        }
        for action in self.scheduler.take_actions() {
            match action {
                Action::Dispatch { worker_id, envelope } => self.send_to_worker(&worker_id, Message::Task(envelope)),
                Action::Reply { worker_id, message } => self.send_to_worker(&worker_id, message),
                Action::Complete {
                    task_id,
                    image_id,
                    result,
                    total_ms,
                } => {
                    if let Some(w) = self.waiters.remove(&task_id) {
                        let _ = w.send(Reply::Done(DetectResponse {
                            image_id,
                            detections: result.detections,
                            timing: Timing {
                                total_ms,
                                compute_ms: result.compute_ms,
                                worker_id: result.worker_id,
                            },
                        }));
                    }
                }
                Action::Fail { task_id, failure, .. } => {
                    if let Some(w) = self.waiters.remove(&task_id) {
                        let _ = w.send(Reply::Failed(failure));
                    }
                }
            }
        }
    }

    fn on_frame(&mut self, conn: u64, msg: Message) {
        let now = self.now();
        match msg {
            Message::Register(reg) => {
                let id = reg.worker_id.clone();
                match self.scheduler.register_worker(reg, now) {
                    Ok(_) => {
                        if let Some(old) = self.worker_conn.insert(id.clone(), conn) {
                            if old != conn {
                                if let Some(c) = self.conns.get_mut(&old) {
                                    c.worker_id = None;
                                }
                            }
                        }
                        if let Some(c) = self.conns.get_mut(&conn) {
                            c.worker_id = Some(id);
                        }
                    }
                    Err(RegisterError::DuplicateLive(_)) => {
                        // The refusal belongs to the new connection, not to
                        // the live worker that owns the id.
                        let actions = self.scheduler.take_actions();
                        for a in actions {
                            if let Action::Reply { message, .. } = a {
                                if let Some(c) = self.conns.get(&conn) {
                                    let _ = c.tx.send(message);
                                }
                            }
                        }
                    }
                    Err(RegisterError::EmptyId) => log::warn!("connection {conn} registered with an empty id"),
                }
            }
            Message::Heartbeat(hb) => self.scheduler.heartbeat(&hb.worker_id, now),
            Message::Result(r) => self.scheduler.on_result(r, now),
            Message::Error(e) => {
                let worker = self.conns.get(&conn).and_then(|c| c.worker_id.clone());
                match worker {
                    Some(w) => self.scheduler.on_worker_error(&w, e, now),
                    None => log::warn!("error from unregistered connection {conn}: {}", e.message),
                }
            }
            other => log::warn!("unexpected message from connection {conn}: {other:?}"),
        }
        self.apply();
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Submit {
                payload,
                mode,
                client_rescaled,
                reply,
            } => {
                let now = self.now();
                match self.scheduler.submit(payload, mode, client_rescaled, now) {
                    Ok(task_id) => {
                        self.waiters.insert(task_id, reply);
                        self.apply();
                    }
                    Err(e) => {
                        let _ = reply.send(Reply::Rejected(e.to_string()));
                    }
                }
            }
            Command::Connected { conn, tx } => {
                self.conns.insert(conn, Conn { tx, worker_id: None });
            }
            Command::Frame { conn, msg } => self.on_frame(conn, msg),
            Command::Closed { conn } => {
                if let Some(Conn {
                    worker_id: Some(id), ..
                }) = self.conns.remove(&conn)
                {
                    if self.worker_conn.get(&id) == Some(&conn) {
                        self.worker_conn.remove(&id);
                        let now = self.now();
                        self.scheduler.worker_disconnected(&id, now);
                        self.apply();
                    }
                }
            }
            Command::Health { reply } => {
                let _ = reply.send(self.scheduler.health());
            }
            Command::Tick => {
                let now = self.now();
                self.scheduler.tick(now);
                self.apply();
            }
        }
    }
}

#[derive(Clone)]
struct AppState {
    cmd: mpsc::UnboundedSender<Command>,
    mode_default: Mode,
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

async fn detect(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let lookup = |k: &str| headers.get(k).and_then(|v| v.to_str().ok());
    let h = match DetectHeaders::parse(lookup, st.mode_default) {
        Ok(h) => h,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let payload = match h.format {
        ImageFormat::PpmP6 => {
            let p = match ImagePayload::ppm(h.image_id.clone(), body) {
                Ok(p) => p,
                Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
            };
            if (p.width, p.height) != (h.width, h.height) {
                return error_response(
                    StatusCode::BAD_REQUEST,
                    format!("headers say {}x{} but the image is {}x{}", h.width, h.height, p.width, p.height),
                );
            }
            p
        }
        ImageFormat::Opaque => ImagePayload::opaque(h.image_id.clone(), h.width, h.height, body),
    };
    let (reply, rx) = oneshot::channel();
    let submitted = st.cmd.send(Command::Submit {
        payload,
        mode: h.mode,
        client_rescaled: h.client_rescaled,
        reply,
    });
    if submitted.is_err() {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "master is shutting down");
    }
    match rx.await {
        Ok(Reply::Done(resp)) => (StatusCode::OK, Json(resp)).into_response(),
        Ok(Reply::Rejected(msg)) => error_response(StatusCode::BAD_REQUEST, msg),
        Ok(Reply::Failed(f @ TaskFailure::Unavailable)) => error_response(StatusCode::SERVICE_UNAVAILABLE, f.to_string()),
        Ok(Reply::Failed(f)) => error_response(StatusCode::BAD_GATEWAY, f.to_string()),
        Err(_) => error_response(StatusCode::SERVICE_UNAVAILABLE, "master is shutting down"),
    }
}

async fn health(State(st): State<AppState>) -> Response {
    let (reply, rx) = oneshot::channel();
    if st.cmd.send(Command::Health { reply }).is_err() {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "master is shutting down");
    }
    match rx.await {
        Ok(h) => Json(h).into_response(),
        Err(_) => error_response(StatusCode::SERVICE_UNAVAILABLE, "master is shutting down"),
    }
}

async fn serve_worker(stream: TcpStream, conn: u64, cmd: mpsc::UnboundedSender<Command>) {
    let _ = stream.set_nodelay(true);
    let (mut sink, mut frames) = Framed::new(stream, FrameCodec::new(DEFAULT_MAX_FRAME)).split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    if cmd.send(Command::Connected { conn, tx }).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(msg.to_frame()).await.is_err() {
                break;
            }
        }
    });
    while let Some(frame) = frames.next().await {
        let msg = match frame.and_then(|f| Message::from_frame(&f)) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("worker connection {conn}: {e}; closing");
                break;
            }
        };
        if cmd.send(Command::Frame { conn, msg }).is_err() {
            break;
        }
    }
    let _ = cmd.send(Command::Closed { conn });
    writer.abort();
}

/// A running master. Dropping it stops every task it spawned.
pub struct MasterHandle {
    pub http_addr: SocketAddr,
    pub worker_addr: SocketAddr,
    cmd: mpsc::UnboundedSender<Command>,
    tasks: Vec<JoinHandle<()>>,
}

impl MasterHandle {
    pub async fn health(&self) -> Option<HealthResponse> {
        let (reply, rx) = oneshot::channel();
        self.cmd.send(Command::Health { reply }).ok()?;
        rx.await.ok()
    }

    /// Resolves when the HTTP server stops (it normally does not).
    pub async fn wait(mut self) {
        if let Some(h) = self.tasks.pop() {
            let _ = h.await;
        }
    }
}

impl Drop for MasterHandle {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// Binds both listeners and starts the master.
pub async fn spawn_master(config: MasterConfig) -> std::io::Result<MasterHandle> {
    let http = TcpListener::bind(config.listen_http).await?;
    let workers = TcpListener::bind(config.listen_worker).await?;
    let http_addr = http.local_addr()?;
    let worker_addr = workers.local_addr()?;
    let (cmd, mut rx) = mpsc::unbounded_channel::<Command>();

    let mut actor = Actor {
        scheduler: Scheduler::new(config.scheduler.clone()),
        started: Instant::now(),
        conns: HashMap::new(),
        worker_conn: HashMap::new(),
        waiters: HashMap::new(),
    };
    let mut tasks = Vec::new();
    tasks.push(tokio::spawn(async move {
        while let Some(c) = rx.recv().await {
            actor.handle(c);
        }
    }));

    let tick_cmd = cmd.clone();
    let period = Duration::from_millis(config.scheduler.heartbeat_interval_ms.max(1));
    tasks.push(tokio::spawn(async move {
        let mut every = tokio::time::interval(period);
        loop {
            every.tick().await;
            if tick_cmd.send(Command::Tick).is_err() {
                break;
            }
        }
    }));

    let accept_cmd = cmd.clone();
    tasks.push(tokio::spawn(async move {
        let mut next_conn = 0u64;
        loop {
            match workers.accept().await {
                Ok((stream, peer)) => {
                    log::info!("worker connection {next_conn} from {peer}");
                    tokio::spawn(serve_worker(stream, next_conn, accept_cmd.clone()));
                    next_conn += 1;
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }));

    let state = AppState {
        cmd: cmd.clone(),
        mode_default: config.scheduler.mode_default,
    };
    let app = Router::new()
        .route(DETECT_PATH, post(detect))
        .route(HEALTH_PATH, get(health))
        .layer(DefaultBodyLimit::max(DEFAULT_MAX_FRAME))
        .with_state(state);
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(http, app).await {
            log::error!("http server stopped: {e}");
        }
    }));

    Ok(MasterHandle {
        http_addr,
        worker_addr,
        cmd,
        tasks,
    })
}
