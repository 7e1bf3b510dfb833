//! Sample batches as published by sensors, and cycle-completion notices.
//!
//! Sensors publish to `dev/<device_id>/<slow|fast>/<channel>` with a JSON body
//! `{"start_us": int, "rate_hz": number, "values": [float, ...]}`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{rate_matches_kind, Channel, StreamKind, StreamSegment};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BatchError {
    #[error("bad topic `{0}`")]
    BadTopic(String),
    #[error("bad payload: {0}")]
    BadPayload(String),
    #[error("rate {rate_hz} Hz does not match {kind} stream")]
    RateKindMismatch { kind: StreamKind, rate_hz: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub device_id: String,
    pub channel: Channel,
    pub stream_kind: StreamKind,
    pub start_us: i64,
    pub rate_hz: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPayload {
    pub start_us: i64,
    pub rate_hz: f64,
    pub values: Vec<f64>,
}

pub fn is_valid_device_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

/// Splits `dev/<device_id>/<slow|fast>/<channel>`.
pub fn parse_topic(topic: &str) -> Result<(String, StreamKind, Channel), BatchError> {
    let bad = || BatchError::BadTopic(topic.to_string());
    let mut parts = topic.split('/');
    let (Some("dev"), Some(device), Some(kind), Some(channel), None) =
        (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(bad());
    };
    if !is_valid_device_id(device) {
        return Err(bad());
    }
    let kind: StreamKind = kind.parse().map_err(|_| bad())?;
    let channel: Channel = channel.parse().map_err(|_| bad())?;
    Ok((device.to_string(), kind, channel))
}

pub fn topic_for(device_id: &str, kind: StreamKind, channel: Channel) -> String {
    format!("dev/{device_id}/{kind}/{channel}")
}

impl SampleBatch {
    /// Parses one sensor PUBLISH into a validated batch.
    pub fn from_publish(topic: &str, payload: &[u8]) -> Result<Self, BatchError> {
        let (device_id, stream_kind, channel) = parse_topic(topic)?;
        let body: BatchPayload =
            serde_json::from_slice(payload).map_err(|e| BatchError::BadPayload(e.to_string()))?;
        if body.values.is_empty() {
            return Err(BatchError::BadPayload("values must be non-empty".into()));
        }
        if body.values.iter().any(|v| !v.is_finite()) {
            return Err(BatchError::BadPayload("values must be finite".into()));
        }
        let mismatch = || BatchError::RateKindMismatch { kind: stream_kind, rate_hz: body.rate_hz };
        if !(body.rate_hz >= 1.0 && body.rate_hz <= u32::MAX as f64 && libm::trunc(body.rate_hz) == body.rate_hz) {
            return Err(mismatch());
        }
        let rate_hz = body.rate_hz as u32;
        if !rate_matches_kind(stream_kind, rate_hz) {
            return Err(mismatch());
        }
        Ok(Self { device_id, channel, stream_kind, start_us: body.start_us, rate_hz, values: body.values })
    }

    pub fn topic(&self) -> String {
        topic_for(&self.device_id, self.stream_kind, self.channel)
    }

    pub fn payload(&self) -> Vec<u8> {
        let body = BatchPayload { start_us: self.start_us, rate_hz: self.rate_hz as f64, values: self.values.clone() };
        serde_json::to_vec(&body).expect("batch payload serializes")
    }

    pub fn into_segment(self) -> StreamSegment {
        StreamSegment::regular(self.device_id, self.channel, self.stream_kind, self.start_us, self.rate_hz, self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleNotification {
    pub device_id: String,
    pub start_us: i64,
    pub end_us: i64,
    pub cycle_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NotificationError {
    #[error("cycle end {end_us} is not after start {start_us}")]
    EmptyInterval { start_us: i64, end_us: i64 },
    #[error("invalid device id `{0}`")]
    BadDevice(String),
    #[error("invalid cycle id `{0}`")]
    BadCycleId(String),
}

/// Cycle ids end up in file names, so they follow queue-name style rules.
pub fn is_valid_cycle_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
        && !id.starts_with('.')
}

impl CycleNotification {
    pub fn validate(&self) -> Result<(), NotificationError> {
        if self.end_us <= self.start_us {
            return Err(NotificationError::EmptyInterval { start_us: self.start_us, end_us: self.end_us });
        }
        if !is_valid_device_id(&self.device_id) {
            return Err(NotificationError::BadDevice(self.device_id.clone()));
        }
        if !is_valid_cycle_id(&self.cycle_id) {
            return Err(NotificationError::BadCycleId(self.cycle_id.clone()));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        (self.end_us - self.start_us) as f64 / 1e6
    }
}
