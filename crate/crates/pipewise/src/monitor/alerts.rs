//! Alert records: one JSON object per line in `monitor-<machine_id>.log`,
//! with ERROR and FATAL also published to `q.alerts`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::now_us;
use crate::messaging::{publish_json, Bus};
use crate::storage::append_line;

pub const ALERTS_QUEUE: &str = "q.alerts";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Info,
    Warn,
    Error,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub sampled_at: i64,
    pub machine_id: String,
    #[serde(default)]
    pub worker_id: Option<String>,
    #[serde(default)]
    pub stage_name: Option<String>,
    pub severity: Severity,
    pub message: String,
    #[serde(default)]
    pub context: BTreeMap<String, String>,
}

impl AlertRecord {
    pub fn new(machine_id: &str, severity: Severity, message: impl Into<String>) -> Self {
        Self {
            sampled_at: now_us(),
            machine_id: machine_id.into(),
            worker_id: None,
            stage_name: None,
            severity,
            message: message.into(),
            context: BTreeMap::new(),
        }
    }

    pub fn worker(mut self, worker_id: &str, stage_name: &str) -> Self {
        self.worker_id = Some(worker_id.into());
        self.stage_name = Some(stage_name.into());
        self
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.context.insert(key.into(), value.to_string());
        self
    }
}

pub trait AlertSink: Send + Sync {
    fn record(&self, alert: AlertRecord);
}

/// Writes the per-machine log and forwards severe alerts to the broker.
pub struct AlertLog {
    dir: PathBuf,
    bus: Option<Arc<dyn Bus>>,
    lock: Mutex<()>,
}

impl AlertLog {
    pub fn new(dir: &Path, bus: Option<Arc<dyn Bus>>) -> Self {
        if let Some(b) = &bus {
            if let Err(e) = b.declare(ALERTS_QUEUE) {
                log::warn!("cannot declare {ALERTS_QUEUE}: {e}");
            }
        }
        Self { dir: dir.to_path_buf(), bus, lock: Mutex::new(()) }
    }

    pub fn path_for(&self, machine_id: &str) -> PathBuf {
        self.dir.join(format!("monitor-{machine_id}.log"))
    }
}

impl AlertSink for AlertLog {
    fn record(&self, alert: AlertRecord) {
        let line = serde_json::to_string(&alert).expect("alert serializes");
        {
            let _g = self.lock.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = append_line(&self.path_for(&alert.machine_id), &line) {
                log::error!("cannot write alert log: {e}");
            }
        }
        if alert.severity >= Severity::Error {
            log::error!("{}: {}", alert.machine_id, alert.message);
            if let Some(b) = &self.bus {
                if let Err(e) = publish_json(&**b, ALERTS_QUEUE, &alert) {
                    log::error!("cannot publish alert: {e}");
                }
            }
        }
    }
}

/// Keeps alerts in memory; handy for embedding and tests.
#[derive(Default)]
pub struct MemoryAlerts {
    pub records: Mutex<Vec<AlertRecord>>,
}

impl MemoryAlerts {
    pub fn snapshot(&self) -> Vec<AlertRecord> {
        self.records.lock().unwrap().clone()
    }
}

impl AlertSink for MemoryAlerts {
    fn record(&self, alert: AlertRecord) {
        self.records.lock().unwrap().push(alert);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::LocalBroker;

    #[test]
    fn severity_routes_to_queue() {
        let dir = tempfile::tempdir().unwrap();
        let broker = LocalBroker::default();
        let log = AlertLog::new(dir.path(), Some(Arc::new(broker.clone())));
        log.record(AlertRecord::new("m1", Severity::Warn, "slow probe"));
        assert_eq!(broker.stats(ALERTS_QUEUE).unwrap().depth, 0);
        log.record(AlertRecord::new("m1", Severity::Error, "handler failed"));
        assert_eq!(broker.stats(ALERTS_QUEUE).unwrap().depth, 1);
        let text = std::fs::read_to_string(log.path_for("m1")).unwrap();
        let lines: Vec<AlertRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].severity, Severity::Error);
        assert!(text.contains("\"severity\":\"WARN\""));
    }
}
