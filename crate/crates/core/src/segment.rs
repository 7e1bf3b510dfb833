//! Sensor channels, stream kinds and contiguous sample segments.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_FAST_RATE_HZ: u32 = 128;
pub const MAX_FAST_RATE_HZ: u32 = 16384;
pub const DEFAULT_FAST_RATE_HZ: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Power,
    Current,
    Vibration,
    Temperature,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Power, Channel::Current, Channel::Vibration, Channel::Temperature];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Power => "power",
            Channel::Current => "current",
            Channel::Vibration => "vibration",
            Channel::Temperature => "temperature",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {what} `{value}`")]
pub struct ParseNameError {
    pub what: &'static str,
    pub value: String,
}

impl FromStr for Channel {
    type Err = ParseNameError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ParseNameError { what: "channel", value: s.into() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Slow,
    Fast,
}

impl StreamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Slow => "slow",
            StreamKind::Fast => "fast",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StreamKind {
    type Err = ParseNameError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slow" => Ok(StreamKind::Slow),
            "fast" => Ok(StreamKind::Fast),
            _ => Err(ParseNameError { what: "stream kind", value: s.into() }),
        }
    }
}

pub fn is_valid_fast_rate(rate_hz: u32) -> bool {
    rate_hz.is_power_of_two() && (MIN_FAST_RATE_HZ..=MAX_FAST_RATE_HZ).contains(&rate_hz)
}

/// Slow streams run at exactly 1 Hz; fast streams at a power of two in
/// `[128, 16384]`.
pub fn rate_matches_kind(kind: StreamKind, rate_hz: u32) -> bool {
    match kind {
        StreamKind::Slow => rate_hz == 1,
        StreamKind::Fast => is_valid_fast_rate(rate_hz),
    }
}

/// Timestamp of sample `index` of a regular stream: `start + i * 1e6 / rate`,
/// rounded half-up to whole microseconds.
pub fn implicit_timestamp(start_us: i64, rate_hz: u32, index: usize) -> i64 {
    let rate = rate_hz as i128;
    let offset = (index as i128 * 1_000_000 + rate / 2) / rate;
    start_us + offset as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSegment {
    pub device_id: String,
    pub channel: Channel,
    pub stream_kind: StreamKind,
    pub start_us: i64,
    pub rate_hz: u32,
    pub values: Vec<f64>,
    /// Present when spacing is irregular (slow and cleaned data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_timestamps: Option<Vec<i64>>,
}

impl StreamSegment {
    pub fn regular(
        device_id: impl Into<String>,
        channel: Channel,
        stream_kind: StreamKind,
        start_us: i64,
        rate_hz: u32,
        values: Vec<f64>,
    ) -> Self {
        Self {
            device_id: device_id.into(),
            channel,
            stream_kind,
            start_us,
            rate_hz,
            values,
            explicit_timestamps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> i64 {
        match &self.explicit_timestamps {
            Some(ts) => ts[index],
            None => implicit_timestamp(self.start_us, self.rate_hz, index),
        }
    }

    pub fn timestamps(&self) -> Vec<i64> {
        match &self.explicit_timestamps {
            Some(ts) => ts.clone(),
            None => (0..self.values.len()).map(|i| self.timestamp(i)).collect(),
        }
    }

    /// Attaches explicit timestamps for every sample.
    pub fn with_explicit_timestamps(mut self) -> Self {
        if self.explicit_timestamps.is_none() {
            self.explicit_timestamps = Some(self.timestamps());
        }
        self
    }

    pub fn check(&self) -> Result<(), SegmentError> {
        if !rate_matches_kind(self.stream_kind, self.rate_hz) {
            return Err(SegmentError::RateKindMismatch { kind: self.stream_kind, rate_hz: self.rate_hz });
        }
        if let Some(ts) = &self.explicit_timestamps {
            if ts.len() != self.values.len() {
                return Err(SegmentError::TimestampCount { timestamps: ts.len(), values: self.values.len() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("rate {rate_hz} Hz is not valid for a {kind} stream")]
    RateKindMismatch { kind: StreamKind, rate_hz: u32 },
    #[error("{timestamps} timestamps for {values} values")]
    TimestampCount { timestamps: usize, values: usize },
}
