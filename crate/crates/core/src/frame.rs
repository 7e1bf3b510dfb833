//! Length-prefixed JSON frames spoken by the broker and node-agent sockets.
//!
//! A frame is a 4-byte big-endian length `N` (at most 16 MiB) followed by `N`
//! bytes of UTF-8 JSON. Broker frames carry an `op` and only the fields that
//! op needs; binary payloads travel base64-encoded in `payload_b64`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Message, QueueStats};

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;
pub const LEN_PREFIX: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    /// Not enough bytes yet; `needed` is the total frame size when known.
    #[error("truncated frame, {needed} bytes needed")]
    Truncated { needed: usize },
    #[error("malformed frame: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Declare,
    Publish,
    Consume,
    /// Cancels a consumer without closing the connection.
    Cancel,
    Ack,
    Nack,
    Stats,
    Deliver,
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumer_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefetch: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requeue: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub headers: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<QueueStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Frame {
    pub fn new(op: Op) -> Self {
        Self {
            op,
            queue: None,
            msg_id: None,
            consumer_id: None,
            prefetch: None,
            requeue: None,
            headers: None,
            payload_b64: None,
            delivery_count: None,
            stats: None,
            reason: None,
        }
    }

    pub fn error(reason: impl Into<String>) -> Self {
        Self { reason: Some(reason.into()), ..Self::new(Op::Error) }
    }

    pub fn deliver(consumer_id: &str, message: &Message) -> Self {
        Self {
            consumer_id: Some(consumer_id.to_string()),
            ..Self::from_message(Op::Deliver, message)
        }
    }

    pub fn from_message(op: Op, message: &Message) -> Self {
        Self {
            queue: Some(message.queue.clone()),
            msg_id: Some(message.msg_id.clone()),
            headers: Some(message.headers.clone()),
            payload_b64: Some(BASE64.encode(&message.payload)),
            delivery_count: Some(message.delivery_count),
            ..Self::new(op)
        }
    }

    pub fn payload(&self) -> Result<Vec<u8>, FrameError> {
        match &self.payload_b64 {
            Some(p) => BASE64.decode(p).map_err(|e| FrameError::Malformed(e.to_string())),
            None => Ok(Vec::new()),
        }
    }

    pub fn to_message(&self) -> Result<Message, FrameError> {
        let missing = |f: &str| FrameError::Malformed(alloc::format!("missing `{f}`"));
        Ok(Message {
            msg_id: self.msg_id.clone().ok_or_else(|| missing("msg_id"))?,
            queue: self.queue.clone().ok_or_else(|| missing("queue"))?,
            headers: self.headers.clone().unwrap_or_default(),
            payload: self.payload()?,
            delivery_count: self.delivery_count.unwrap_or(0),
        })
    }
}

/// Serializes any JSON value into one frame.
pub fn encode_json<T: Serialize>(value: &T) -> Vec<u8> {
    let body = serde_json::to_vec(value).expect("frame body serializes");
    let mut out = Vec::with_capacity(LEN_PREFIX + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Length of the frame at the start of `bytes`, validating the prefix.
pub fn frame_len(bytes: &[u8]) -> Result<usize, FrameError> {
    if bytes.len() < LEN_PREFIX {
        return Err(FrameError::Truncated { needed: LEN_PREFIX });
    }
    let n = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if n > MAX_FRAME_LEN {
        return Err(FrameError::Malformed(alloc::format!("length {n} exceeds {MAX_FRAME_LEN}")));
    }
    Ok(LEN_PREFIX + n)
}

/// Decodes one frame from the front of `bytes`, returning it with the
/// number of bytes consumed. Never reads past the frame.
pub fn decode_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<(T, usize), FrameError> {
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(FrameError::Truncated { needed: total });
    }
    let value = serde_json::from_slice(&bytes[LEN_PREFIX..total]).map_err(|e| FrameError::Malformed(e.to_string()))?;
    Ok((value, total))
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    encode_json(frame)
}

pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    decode_json(bytes)
}

/// A message as a `deliver` frame.
pub fn encode_message(message: &Message) -> Vec<u8> {
    encode_frame(&Frame::from_message(Op::Deliver, message))
}

pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    let (frame, used) = decode_frame(bytes)?;
    Ok((frame.to_message()?, used))
}
