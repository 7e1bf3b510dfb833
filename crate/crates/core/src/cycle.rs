//! Per-cycle processing record and its status state machine.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleStatus {
    Notified,
    Downloaded,
    Cleaned,
    Featured,
    Classified,
    Failed,
}

impl CycleStatus {
    pub const PIPELINE: [CycleStatus; 5] = [
        CycleStatus::Notified,
        CycleStatus::Downloaded,
        CycleStatus::Cleaned,
        CycleStatus::Featured,
        CycleStatus::Classified,
    ];

    /// Position along the processing chain; `None` for `Failed`.
    pub fn rank(self) -> Option<usize> {
        Self::PIPELINE.iter().position(|&s| s == self)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, CycleStatus::Classified | CycleStatus::Failed)
    }

    /// Re-asserting the current status is allowed so that idempotent stage
    /// handlers can rewrite their outputs; otherwise only the next step or
    /// `Failed` (from a non-terminal state) is legal.
    pub fn can_transition_to(self, next: CycleStatus) -> bool {
        if self == next {
            return true;
        }
        match (self.rank(), next.rank()) {
            (Some(_), None) => !self.is_terminal(),
            (Some(a), Some(b)) => b == a + 1,
            (None, _) => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CycleStatus::Notified => "notified",
            CycleStatus::Downloaded => "downloaded",
            CycleStatus::Cleaned => "cleaned",
            CycleStatus::Featured => "featured",
            CycleStatus::Classified => "classified",
            CycleStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal status transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: CycleStatus,
    pub to: CycleStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle_id: String,
    pub device_id: String,
    pub start_us: i64,
    pub end_us: i64,
    pub status: CycleStatus,
    /// Keyed `<channel>.<kind>.<level>` (e.g. `current.fast.clean`) or by
    /// artifact name (`features`, `prediction`, `clean_report`); values are
    /// paths relative to the storage root.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    pub created_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CycleRecord {
    pub fn new(cycle_id: impl Into<String>, device_id: impl Into<String>, start_us: i64, end_us: i64, created_at: i64) -> Self {
        Self {
            cycle_id: cycle_id.into(),
            device_id: device_id.into(),
            start_us,
            end_us,
            status: CycleStatus::Notified,
            files: BTreeMap::new(),
            created_at,
            error: None,
        }
    }

    pub fn advance(&mut self, next: CycleStatus) -> Result<(), TransitionError> {
        if !self.status.can_transition_to(next) {
            return Err(TransitionError { from: self.status, to: next });
        }
        self.status = next;
        Ok(())
    }

    pub fn fail(&mut self, reason: impl Into<String>) -> Result<(), TransitionError> {
        self.advance(CycleStatus::Failed)?;
        self.error = Some(reason.into());
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        (self.end_us - self.start_us) as f64 / 1e6
    }
}
