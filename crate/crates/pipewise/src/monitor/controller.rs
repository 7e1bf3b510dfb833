//! Elasticity controller: gathers utilization reports, runs
//! [`decide`] once per probe period and applies the result through the node
//! agents.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pipewise_core::broker::QueueStats;
use pipewise_core::elastic::{
    decide, ControllerState, ElasticityConfig, MachineInfo, ScalingAction, ScalingDecision, ScalingReason, StageLimits,
    UtilizationReport,
};
use pipewise_core::topology::{PipelineSpec, WorkerKind};
use serde::{Deserialize, Serialize};

use super::alerts::{AlertRecord, AlertSink, Severity};
use crate::pipeline::{AgentClient, AgentError, NodeAgent};
use crate::storage::{append_line, write_atomic, WriteMode};

const HISTORY_KEPT: usize = 100;

/// Starts and stops workers on named machines.
pub trait WorkerControl: Send + Sync {
    /// Returns the new worker's id.
    fn spawn(&self, stage_name: &str, machine_id: &str) -> Result<String, AgentError>;
    fn stop(&self, worker_id: &str, machine_id: &str, graceful: bool) -> Result<(), AgentError>;
}

/// Agents living in this process.
pub struct LocalCluster {
    pub agents: BTreeMap<String, Arc<NodeAgent>>,
    pub kind: WorkerKind,
}

impl LocalCluster {
    fn agent(&self, machine_id: &str) -> Result<&NodeAgent, AgentError> {
        self.agents.get(machine_id).map(|a| &**a).ok_or_else(|| AgentError::MachineUnavailable(machine_id.into()))
    }
}

impl WorkerControl for LocalCluster {
    fn spawn(&self, stage_name: &str, machine_id: &str) -> Result<String, AgentError> {
        Ok(self.agent(machine_id)?.spawn_worker(stage_name, self.kind)?.worker_id)
    }

    fn stop(&self, worker_id: &str, machine_id: &str, graceful: bool) -> Result<(), AgentError> {
        self.agent(machine_id)?.stop_worker(worker_id, graceful).map(|_| ())
    }
}

/// Agents reached over their control port.
pub struct RemoteCluster {
    pub agents: BTreeMap<String, AgentClient>,
    pub kind: WorkerKind,
}

impl WorkerControl for RemoteCluster {
    fn spawn(&self, stage_name: &str, machine_id: &str) -> Result<String, AgentError> {
        let a = self.agents.get(machine_id).ok_or_else(|| AgentError::MachineUnavailable(machine_id.into()))?;
        Ok(a.spawn(stage_name, self.kind)?.worker_id)
    }

    fn stop(&self, worker_id: &str, machine_id: &str, graceful: bool) -> Result<(), AgentError> {
        let a = self.agents.get(machine_id).ok_or_else(|| AgentError::MachineUnavailable(machine_id.into()))?;
        a.stop(worker_id, graceful).map(|_| ())
    }
}

/// What the controller writes to `cluster/state.json` each round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub updated_at: i64,
    pub state: ControllerState,
    pub reports: Vec<UtilizationReport>,
    pub recent_decisions: Vec<ScalingDecision>,
}

pub struct Controller {
    machine_id: String,
    state: ControllerState,
    config: ElasticityConfig,
    control: Arc<dyn WorkerControl>,
    alerts: Arc<dyn AlertSink>,
    reports: BTreeMap<(String, Option<String>), UtilizationReport>,
    history: VecDeque<ScalingDecision>,
    dir: Option<PathBuf>,
}

impl Controller {
    /// `dir` receives `scaling-history.log` and `state.json`.
    pub fn new(
        spec: &PipelineSpec,
        machines: Vec<MachineInfo>,
        config: ElasticityConfig,
        control: Arc<dyn WorkerControl>,
        alerts: Arc<dyn AlertSink>,
        dir: Option<&Path>,
    ) -> Self {
        let stages = spec
            .stages
            .iter()
            .map(|s| StageLimits {
                stage_name: s.stage_name.clone(),
                input_queue: s.input_queue.clone(),
                min_workers: s.min_workers,
                max_workers: s.max_workers,
            })
            .collect();
        Self {
            machine_id: "controller".into(),
            state: ControllerState { stages, machines, ..Default::default() },
            config,
            control,
            alerts,
            reports: BTreeMap::new(),
            history: VecDeque::new(),
            dir: dir.map(Path::to_path_buf),
        }
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn config(&self) -> &ElasticityConfig {
        &self.config
    }

    pub fn history(&self) -> impl Iterator<Item = &ScalingDecision> {
        self.history.iter()
    }

    pub fn input_queues(&self) -> Vec<String> {
        self.state.stages.iter().map(|s| s.input_queue.clone()).collect()
    }

    /// Keeps the newest report per machine and worker.
    pub fn ingest_report(&mut self, r: UtilizationReport) {
        let key = (r.machine_id.clone(), r.worker_id.clone());
        match self.reports.get(&key) {
            Some(old) if old.sampled_at > r.sampled_at => {}
            _ => {
                self.reports.insert(key, r);
            }
        }
    }

    /// Starts workers until every stage has its minimum, spreading them
    /// over active machines by load.
    pub fn ensure_minimum(&mut self, now_us: i64) -> Vec<ScalingDecision> {
        let mut applied = Vec::new();
        for i in 0..self.state.stages.len() {
            let stage = self.state.stages[i].clone();
            while self.state.worker_count(&stage.stage_name) < stage.min_workers {
                let Some(m) = self
                    .state
                    .machines
                    .iter()
                    .filter(|m| m.active && self.state.machine_load(&m.machine_id) < m.capacity)
                    .min_by_key(|m| (self.state.machine_load(&m.machine_id), m.machine_id.clone()))
                    .map(|m| m.machine_id.clone())
                else {
                    self.alert(Severity::Error, format!("no capacity for the minimum workers of `{}`", stage.stage_name));
                    break;
                };
                let d = ScalingDecision {
                    stage_name: stage.stage_name.clone(),
                    action: ScalingAction::Activate,
                    machine_id: m,
                    worker_id: None,
                    reason: ScalingReason::BacklogGrowth,
                    decided_at: now_us,
                };
                match self.control.spawn(&d.stage_name, &d.machine_id) {
                    Ok(w) => {
                        // Bootstrapping is not a scaling decision; no cooldown.
                        self.state.placements.push(pipewise_core::elastic::Placement {
                            worker_id: w.clone(),
                            stage_name: d.stage_name.clone(),
                            machine_id: d.machine_id.clone(),
                        });
                        applied.push(ScalingDecision { worker_id: Some(w), ..d });
                    }
                    Err(e) => {
                        self.alert(Severity::Error, format!("cannot start `{}` on {}: {e}", d.stage_name, d.machine_id));
                        break;
                    }
                }
            }
        }
        self.persist_snapshot(now_us);
        applied
    }

    /// One control round. Returns the decisions that were applied; failed
    /// ones raise an ERROR alert and leave the state unchanged.
    pub fn round(&mut self, queue_stats: &[QueueStats], now_us: i64) -> Vec<ScalingDecision> {
        let oldest = now_us - (2.0 * self.config.probe_period_s * 1e6) as i64;
        let placed: Vec<String> = self.state.placements.iter().map(|p| p.worker_id.clone()).collect();
        self.reports.retain(|(_, w), r| r.sampled_at >= oldest && w.as_ref().is_none_or(|w| placed.contains(w)));
        let reports: Vec<UtilizationReport> = self.reports.values().cloned().collect();

        let mut applied = Vec::new();
        for d in decide(&reports, queue_stats, &self.state, &self.config, now_us) {
            let result = match d.action {
                ScalingAction::Activate => self.control.spawn(&d.stage_name, &d.machine_id).map(Some),
                ScalingAction::Deactivate => {
                    let w = d.worker_id.as_deref().expect("deactivation names a worker");
                    self.control.stop(w, &d.machine_id, true).map(|_| None)
                }
            };
            match result {
                Ok(spawned) => {
                    let d = match spawned {
                        Some(w) => {
                            self.state.record_activation(&d, &w);
                            ScalingDecision { worker_id: Some(w), ..d }
                        }
                        None => {
                            self.state.record_deactivation(&d);
                            d
                        }
                    };
                    self.record_history(&d);
                    applied.push(d);
                }
                Err(e) => {
                    let verb = if d.action == ScalingAction::Activate { "activate" } else { "deactivate" };
                    self.alert(Severity::Error, format!("cannot {verb} a `{}` worker on {}: {e}", d.stage_name, d.machine_id));
                }
            }
        }
        self.persist_snapshot(now_us);
        applied
    }

    fn alert(&self, severity: Severity, message: String) {
        self.alerts.record(AlertRecord::new(&self.machine_id, severity, message));
    }

    fn record_history(&mut self, d: &ScalingDecision) {
        log::info!("{:?} {} on {} ({:?})", d.action, d.stage_name, d.machine_id, d.reason);
        if let Some(dir) = &self.dir {
            let line = serde_json::to_string(d).expect("decision serializes");
            if let Err(e) = append_line(&dir.join("scaling-history.log"), &line) {
                log::error!("cannot write scaling history: {e}");
            }
        }
        self.history.push_back(d.clone());
        while self.history.len() > HISTORY_KEPT {
            self.history.pop_front();
        }
    }

    pub fn snapshot(&self, now_us: i64) -> ClusterSnapshot {
        ClusterSnapshot {
            updated_at: now_us,
            state: self.state.clone(),
            reports: self.reports.values().cloned().collect(),
            recent_decisions: self.history.iter().cloned().collect(),
        }
    }

    fn persist_snapshot(&self, now_us: i64) {
        let Some(dir) = &self.dir else { return };
        let body = serde_json::to_vec_pretty(&self.snapshot(now_us)).expect("snapshot serializes");
        if let Err(e) = write_atomic(&dir.join("state.json"), WriteMode::Replace, |w| w.write_all(&body)) {
            log::error!("cannot write cluster state: {e}");
        }
    }
}

pub fn load_snapshot(dir: &Path) -> Option<ClusterSnapshot> {
    let text = std::fs::read(dir.join("state.json")).ok()?;
    serde_json::from_slice(&text).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::alerts::MemoryAlerts;
    use std::sync::Mutex;

    #[derive(Default)]
    struct Fake {
        next: Mutex<u32>,
        fail: bool,
    }

    impl WorkerControl for Fake {
        fn spawn(&self, _: &str, m: &str) -> Result<String, AgentError> {
            if self.fail {
                return Err(AgentError::MachineUnavailable(m.into()));
            }
            let mut n = self.next.lock().unwrap();
            *n += 1;
            Ok(format!("{m}-w{:04}", *n))
        }
        fn stop(&self, _: &str, _: &str, _: bool) -> Result<(), AgentError> {
            Ok(())
        }
    }

    fn machines() -> Vec<MachineInfo> {
        vec![MachineInfo { machine_id: "m1".into(), active: true, capacity: 4 }, MachineInfo { machine_id: "m2".into(), active: true, capacity: 4 }]
    }

    #[test]
    fn minimum_is_spread() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Controller::new(&PipelineSpec::pdm(), machines(), Default::default(), Arc::new(Fake::default()), Arc::new(MemoryAlerts::default()), Some(dir.path()));
        let d = c.ensure_minimum(0);
        assert_eq!(d.len(), 4);
        assert_eq!(c.state().machine_load("m1"), 2);
        assert_eq!(c.state().machine_load("m2"), 2);
        assert!(load_snapshot(dir.path()).is_some());
    }

    #[test]
    fn failed_activation_alerts_and_keeps_state() {
        let alerts = Arc::new(MemoryAlerts::default());
        let mut c = Controller::new(&PipelineSpec::pdm(), machines(), Default::default(), Arc::new(Fake { fail: true, ..Default::default() }), alerts.clone(), None);
        let stats = vec![QueueStats { depth: 500, depth_delta: 10, ..QueueStats::empty("q.download") }];
        assert!(c.round(&stats, 100_000_000).is_empty());
        assert!(c.state().placements.is_empty());
        assert!(c.state().last_decision_us.is_empty());
        assert_eq!(alerts.snapshot().iter().filter(|a| a.severity == Severity::Error).count(), 1);
    }
}
