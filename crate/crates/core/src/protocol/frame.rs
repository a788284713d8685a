//! Length-prefixed frames exchanged between the master and its workers.
//!
//! ```text
//! +-----------+----------+------------+-------------+---------+
//! | total_len | msg_type | header_len | header JSON | payload |
//! |  u32 BE   |   u8     |   u32 BE   |             |         |
//! +-----------+----------+------------+-------------+---------+
//! ```
//!
//! `total_len` counts every byte after itself, so
//! `total_len = 5 + header_len + payload.len()`.

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;
use tokio_util::codec::{Decoder, Encoder};

/// Largest frame accepted by default (covers a 4000×2192 raw P6 image).
pub const DEFAULT_MAX_FRAME: usize = 64 * 1024 * 1024;

const LEN_PREFIX: usize = 4;
const FIXED_BODY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Register = 0x01,
    Task = 0x02,
    Result = 0x03,
    Heartbeat = 0x04,
    Error = 0x05,
}

impl TryFrom<u8> for MsgType {
    type Error = ProtocolError;

    fn try_from(value: u8) -> Result<Self, ProtocolError> {
        Ok(match value {
            0x01 => MsgType::Register,
            0x02 => MsgType::Task,
            0x03 => MsgType::Result,
            0x04 => MsgType::Heartbeat,
            0x05 => MsgType::Error,
            other => return Err(ProtocolError::UnknownMsgType(other)),
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("unknown message type 0x{0:02x}")]
    UnknownMsgType(u8),
    #[error("frame of {len} bytes exceeds the {max}-byte limit")]
    FrameTooLarge { len: usize, max: usize },
    #[error("declared frame length {0} is shorter than the fixed 5-byte body")]
    FrameTooShort(u32),
    #[error("header length {header_len} does not fit in a {total_len}-byte frame")]
    HeaderOverrun { header_len: u32, total_len: u32 },
    #[error("frame header is not valid JSON: {0}")]
    InvalidHeader(String),
    #[error("frame header does not match the {msg_type:?} schema: {reason}")]
    Schema { msg_type: MsgType, reason: String },
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    /// Raw JSON text; kept verbatim so re-encoding is byte-identical.
    pub header: String,
    pub payload: Bytes,
}

impl Frame {
    pub fn new(msg_type: MsgType, header: impl Into<String>, payload: impl Into<Bytes>) -> Self {
        Self {
            msg_type,
            header: header.into(),
            payload: payload.into(),
        }
    }

    /// Size of the frame on the wire, length prefix included.
    pub fn wire_len(&self) -> usize {
        wire_len(self.header.len(), self.payload.len())
    }
}

/// Bytes on the wire for a frame with the given header and payload sizes.
pub fn wire_len(header_len: usize, payload_len: usize) -> usize {
    LEN_PREFIX + FIXED_BODY + header_len + payload_len
}

fn check_header_json(header: &str) -> Result<(), ProtocolError> {
    serde_json::from_str::<serde::de::IgnoredAny>(header)
        .map(|_| ())
        .map_err(|e| ProtocolError::InvalidHeader(e.to_string()))
}

/// Serializes a frame, appending to `dst`.
pub fn encode_frame_into(frame: &Frame, max_frame: usize, dst: &mut BytesMut) -> Result<(), ProtocolError> {
    check_header_json(&frame.header)?;
    let body = FIXED_BODY + frame.header.len() + frame.payload.len();
    if body > max_frame || body > i32::MAX as usize {
        return Err(ProtocolError::FrameTooLarge {
            len: body,
            max: max_frame,
        });
    }
    dst.reserve(LEN_PREFIX + body);
    dst.put_u32(body as u32);
    dst.put_u8(frame.msg_type as u8);
    dst.put_u32(frame.header.len() as u32);
    dst.put_slice(frame.header.as_bytes());
    dst.put_slice(&frame.payload);
    Ok(())
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, ProtocolError> {
    let mut buf = BytesMut::new();
    encode_frame_into(frame, DEFAULT_MAX_FRAME, &mut buf)?;
    Ok(buf.to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A full frame and the number of input bytes it consumed.
    Frame(Frame, usize),
    /// At least this many more bytes are required.
    NeedMore(usize),
}

/// Decodes one frame from the front of `buf` without consuming it.
///
/// Never allocates more than the frame actually present in `buf`; a declared
/// length beyond `max_frame` is rejected as soon as the prefix is visible.
pub fn decode_frame_with_limit(buf: &[u8], max_frame: usize) -> Result<Decoded, ProtocolError> {
    if buf.len() < LEN_PREFIX {
        return Ok(Decoded::NeedMore(LEN_PREFIX - buf.len()));
    }
    let total_len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes"));
    let total = total_len as usize;
    if total > max_frame {
        return Err(ProtocolError::FrameTooLarge {
            len: total,
            max: max_frame,
        });
    }
    if total < FIXED_BODY {
        return Err(ProtocolError::FrameTooShort(total_len));
    }
    if buf.len() > LEN_PREFIX {
        MsgType::try_from(buf[LEN_PREFIX])?;
    }
    if buf.len() >= LEN_PREFIX + FIXED_BODY {
        let header_len = u32::from_be_bytes(buf[5..9].try_into().expect("4 bytes"));
        if header_len as usize > total - FIXED_BODY {
            return Err(ProtocolError::HeaderOverrun {
                header_len,
                total_len,
            });
        }
    }
    let needed = LEN_PREFIX + total;
    if buf.len() < needed {
        return Ok(Decoded::NeedMore(needed - buf.len()));
    }

    let msg_type = MsgType::try_from(buf[4])?;
    let header_len = u32::from_be_bytes(buf[5..9].try_into().expect("4 bytes")) as usize;
    let header_end = 9 + header_len;
    let header = std::str::from_utf8(&buf[9..header_end])
        .map_err(|e| ProtocolError::InvalidHeader(e.to_string()))?;
    check_header_json(header)?;
    let frame = Frame {
        msg_type,
        header: header.to_string(),
        payload: Bytes::copy_from_slice(&buf[header_end..needed]),
    };
    Ok(Decoded::Frame(frame, needed))
}

pub fn decode_frame(buf: &[u8]) -> Result<Decoded, ProtocolError> {
    decode_frame_with_limit(buf, DEFAULT_MAX_FRAME)
}

/// Incremental decoder for one connection.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: BytesMut,
    max_frame: usize,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_FRAME)
    }
}

impl FrameDecoder {
    pub fn new(max_frame: usize) -> Self {
        Self {
            buf: BytesMut::new(),
            max_frame,
        }
    }

    pub fn feed(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Pops the next complete frame, if one is buffered.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, ProtocolError> {
        match decode_frame_with_limit(&self.buf, self.max_frame)? {
            Decoded::Frame(frame, used) => {
                self.buf.advance(used);
                Ok(Some(frame))
            }
            Decoded::NeedMore(_) => Ok(None),
        }
    }
}

/// `tokio_util` codec over [`decode_frame_with_limit`] / [`encode_frame_into`].
#[derive(Debug, Clone, Copy)]
pub struct FrameCodec {
    max_frame: usize,
}

impl Default for FrameCodec {
    fn default() -> Self {
        Self {
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

impl FrameCodec {
    pub fn new(max_frame: usize) -> Self {
        Self { max_frame }
    }
}

impl Decoder for FrameCodec {
    type Item = Frame;
    type Error = ProtocolError;

    fn decode(&mut self, src: &mut BytesMut) -> Result<Option<Frame>, ProtocolError> {
        match decode_frame_with_limit(src, self.max_frame)? {
            Decoded::Frame(frame, used) => {
                src.advance(used);
                Ok(Some(frame))
            }
            Decoded::NeedMore(_) => Ok(None),
        }
    }
}

impl Encoder<Frame> for FrameCodec {
    type Error = ProtocolError;

    fn encode(&mut self, item: Frame, dst: &mut BytesMut) -> Result<(), ProtocolError> {
        encode_frame_into(&item, self.max_frame, dst)
    }
}
