//! Wire formats: framed TCP between master and workers, HTTP at the gateway.

pub mod frame;
pub mod http;
pub mod messages;

pub use frame::{
    decode_frame, decode_frame_with_limit, encode_frame, encode_frame_into, Decoded, Frame, FrameCodec,
    FrameDecoder, MsgType, ProtocolError, DEFAULT_MAX_FRAME,
};
pub use messages::{
    codes, ErrorMsg, HeartbeatMsg, Message, RegisterAck, RegisterMsg, ResultEnvelope, TaskEnvelope, TaskHeader,
    Tier,
};
