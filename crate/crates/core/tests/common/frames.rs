//! Golden frame fixtures and the input mutator used by the decode fuzzers.

use bytes::Bytes;
use fogdetect::detection::{BoundingBox, Detection};
use fogdetect::preprocess::{ImageFormat, Mode};
use fogdetect::protocol::{
    ErrorMsg, HeartbeatMsg, Message, MsgType, RegisterAck, RegisterMsg, ResultEnvelope, TaskEnvelope, TaskHeader,
    Tier,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GOLDENS: [(&str, MsgType); 6] = [
    ("register", MsgType::Register),
    ("register_ack", MsgType::Register),
    ("task", MsgType::Task),
    ("result", MsgType::Result),
    ("heartbeat", MsgType::Heartbeat),
    ("error", MsgType::Error),
];

pub fn golden(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/fixtures/frames/{name}.hex", env!("CARGO_MANIFEST_DIR"));
    let text: String = std::fs::read_to_string(path).unwrap().split_whitespace().collect();
    (0..text.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&text[i..i + 2], 16).unwrap())
        .collect()
}

pub fn golden_message(name: &str) -> Message {
    match name {
        "register" => Message::Register(RegisterMsg {
            worker_id: "w1".into(),
            tier: Tier::Fog,
            slots: 1,
        }),
        "register_ack" => Message::RegisterAck(RegisterAck {
            worker_id: "w1".into(),
            registered_seq: 0,
            heartbeat_interval_ms: 2000,
        }),
        "task" => Message::Task(TaskEnvelope {
            header: TaskHeader {
                task_id: "t000000".into(),
                image_id: "img-00000".into(),
                mode: Mode::LowLatency,
                attempt: 1,
                width: 2,
                height: 1,
                format: ImageFormat::PpmP6,
            },
            payload: Bytes::from_static(b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06"),
        }),
        "result" => Message::Result(ResultEnvelope {
            task_id: "t000000".into(),
            worker_id: "w1".into(),
            detections: vec![Detection::new(0, 0.63, BoundingBox::new(0.5, 0.5, 0.2, 0.2))],
            compute_ms: 100.0,
        }),
        "heartbeat" => Message::Heartbeat(HeartbeatMsg {
            worker_id: "w1".into(),
        }),
        "error" => Message::Error(ErrorMsg {
            code: "detector_failed".into(),
            message: "missing fixture".into(),
            task_id: Some("t000000".into()),
            worker_id: Some("w1".into()),
        }),
        other => panic!("no golden {other}"),
    }
}

pub fn mutate(r: &mut ChaCha8Rng, mut data: Vec<u8>) -> Vec<u8> {
    match r.random_range(0..5) {
        0 => {
            let n = r.random_range(0..=data.len());
            data.truncate(n);
        }
        1 if !data.is_empty() => {
            for _ in 0..r.random_range(1..4) {
                let i = r.random_range(0..data.len());
                data[i] ^= 1 << r.random_range(0..8);
            }
        }
        2 if data.len() >= 4 => {
            let len: u32 = r.random();
            data[..4].copy_from_slice(&len.to_be_bytes());
        }
        3 => {
            let extra = r.random_range(0..32);
            data.extend((0..extra).map(|_| r.random::<u8>()));
        }
        _ => {
            let n = r.random_range(0..48);
            data = (0..n).map(|_| r.random()).collect();
        }
    }
    data
}

