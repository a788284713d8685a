//! Tokio client that connects a [`WorkerAgent`] to a master.

use std::time::Duration;

use futures::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::codec::Framed;

use super::{ExecClock, WorkerAgent};
use crate::protocol::{codes, FrameCodec, HeartbeatMsg, Message, ProtocolError, RegisterMsg};

#[derive(Debug, Error)]
pub enum WorkerNetError {
    #[error("connecting to master: {0}")]
    Connect(#[source] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("master rejected registration: {0}")]
    Rejected(String),
}

struct AbortOnDrop(Vec<JoinHandle<()>>);

impl Drop for AbortOnDrop {
    fn drop(&mut self) {
        for h in &self.0 {
            h.abort();
        }
    }
}

fn register_msg(agent: &WorkerAgent) -> Message {
    Message::Register(RegisterMsg {
        worker_id: agent.worker_id.clone(),
        tier: agent.tier,
        slots: agent.slots,
    })
}

/// Serves tasks until the master closes the connection.
///
/// Heartbeats start once the master acknowledges the registration and use
/// the interval it announces. Tasks run on the blocking pool so heartbeats
/// keep flowing while the detector works.
pub async fn run_worker(agent: WorkerAgent, master_addr: &str) -> Result<(), WorkerNetError> {
    let stream = TcpStream::connect(master_addr).await.map_err(WorkerNetError::Connect)?;
    stream.set_nodelay(true).map_err(WorkerNetError::Connect)?;
    let (mut sink, mut frames) = Framed::new(stream, FrameCodec::default()).split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();

    let mut tasks = AbortOnDrop(Vec::new());
    tasks.0.push(tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if let Err(e) = sink.send(msg.to_frame()).await {
                log::warn!("worker write failed: {e}");
                break;
            }
        }
    }));

    let _ = tx.send(register_msg(&agent));
    let mut heartbeat_started = false;

    while let Some(frame) = frames.next().await {
        let frame = frame?;
        match Message::from_frame(&frame)? {
            Message::Task(envelope) => match agent.try_acquire(&envelope.header) {
                Err(refusal) => {
                    log::warn!("{}: task {} refused, no free slot", agent.worker_id, envelope.header.task_id);
                    let _ = tx.send(refusal);
                }
                Ok(guard) => {
                    let agent = agent.clone();
                    let tx = tx.clone();
                    tokio::task::spawn_blocking(move || {
                        let reply = agent.execute(&envelope, ExecClock::Real);
                        drop(guard);
                        let _ = tx.send(reply);
                    });
                }
            },
            Message::RegisterAck(ack) => {
                log::info!("{} registered as #{}", ack.worker_id, ack.registered_seq);
                if !heartbeat_started {
                    heartbeat_started = true;
                    let period = Duration::from_millis(ack.heartbeat_interval_ms.max(1));
                    let tx = tx.clone();
                    let worker_id = agent.worker_id.clone();
                    tasks.0.push(tokio::spawn(async move {
                        let mut every = tokio::time::interval(period);
                        loop {
                            every.tick().await;
                            let hb = Message::Heartbeat(HeartbeatMsg {
                                worker_id: worker_id.clone(),
                            });
                            if tx.send(hb).is_err() {
                                break;
                            }
                        }
                    }));
                }
            }
            Message::Error(e) if e.code == codes::REREGISTER => {
                log::info!("{}: master asked for re-registration", agent.worker_id);
                let _ = tx.send(register_msg(&agent));
            }
            Message::Error(e) if e.code == codes::DUPLICATE_WORKER => {
                return Err(WorkerNetError::Rejected(e.message));
            }
            other => log::warn!("{}: ignoring unexpected message {other:?}", agent.worker_id),
        }
    }
    Ok(())
}
