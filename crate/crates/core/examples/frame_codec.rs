//! The worker wire protocol: encodes one frame of each type, prints the
//! bytes, and decodes the concatenation back one byte at a time.
//!
//!     cargo run --example frame_codec

use fogdetect::detection::{BoundingBox, Detection};
use fogdetect::preprocess::{ImageFormat, Mode};
use fogdetect::protocol::{
    encode_frame, ErrorMsg, FrameDecoder, HeartbeatMsg, Message, RegisterAck, RegisterMsg, ResultEnvelope,
    TaskEnvelope, TaskHeader, Tier,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let messages = vec![
        Message::Register(RegisterMsg {
            worker_id: "fog-1".into(),
            tier: Tier::Fog,
            slots: 1,
        }),
        Message::RegisterAck(RegisterAck {
            worker_id: "fog-1".into(),
            registered_seq: 0,
            heartbeat_interval_ms: 2000,
        }),
        Message::Task(TaskEnvelope {
            header: TaskHeader {
                task_id: "t000000".into(),
                image_id: "img-00000".into(),
                mode: Mode::LowLatency,
                attempt: 1,
                width: 2,
                height: 1,
                format: ImageFormat::PpmP6,
            },
            payload: bytes::Bytes::from_static(b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00"),
        }),
        Message::Result(ResultEnvelope {
            task_id: "t000000".into(),
            worker_id: "fog-1".into(),
            detections: vec![Detection::new(14, 0.63, BoundingBox::new(0.5, 0.5, 0.2, 0.2))],
            compute_ms: 97.5,
        }),
        Message::Heartbeat(HeartbeatMsg {
            worker_id: "fog-1".into(),
        }),
        Message::Error(ErrorMsg {
            code: "detector_failed".into(),
            message: "no fixture".into(),
            task_id: Some("t000001".into()),
            worker_id: Some("fog-1".into()),
        }),
    ];

    let mut stream = Vec::new();
    for m in &messages {
        let bytes = encode_frame(&m.to_frame())?;
        let preview: String = bytes.iter().take(12).map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ");
        println!("{:<12} {:4} bytes  {preview} ...", format!("{:?}", m.to_frame().msg_type), bytes.len());
        stream.extend(bytes);
    }

    let mut decoder = FrameDecoder::default();
    let mut decoded = Vec::new();
    for b in &stream {
        decoder.feed(std::slice::from_ref(b));
        while let Some(frame) = decoder.next_frame()? {
            decoded.push(Message::from_frame(&frame)?);
        }
    }
    println!("\nstreamed {} bytes one at a time, got {} messages back", stream.len(), decoded.len());
    assert_eq!(decoded, messages);
    Ok(())
}
