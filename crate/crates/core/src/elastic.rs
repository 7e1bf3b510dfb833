//! Elasticity rule: given fresh utilization reports and queue statistics,
//! decide which stages gain or lose a worker this round.
//!
//! [`decide`] is pure. The caller owns the clock, applies the decisions and
//! updates [`ControllerState`] only for the actions that succeeded.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::QueueStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticityConfig {
    pub u_high: f64,
    pub u_low: f64,
    pub backlog_high: u64,
    pub cooldown_s: f64,
    pub probe_period_s: f64,
}

impl Default for ElasticityConfig {
    fn default() -> Self {
        Self { u_high: 0.8, u_low: 0.2, backlog_high: 100, cooldown_s: 30.0, probe_period_s: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("need 0 <= u_low < u_high <= 1")]
    Thresholds,
    #[error("probe_period_s must be positive and no larger than cooldown_s")]
    Periods,
}

impl ElasticityConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0 <= self.u_low && self.u_low < self.u_high && self.u_high <= 1.0) {
            return Err(ConfigError::Thresholds);
        }
        if !(self.probe_period_s > 0.0 && self.cooldown_s >= self.probe_period_s) {
            return Err(ConfigError::Periods);
        }
        Ok(())
    }

    fn cooldown_us(&self) -> i64 {
        (self.cooldown_s * 1e6) as i64
    }

    fn max_report_age_us(&self) -> i64 {
        (2.0 * self.probe_period_s * 1e6) as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub machine_id: String,
    /// Absent for the whole-machine report.
    #[serde(default)]
    pub worker_id: Option<String>,
    #[serde(default)]
    pub stage_name: Option<String>,
    pub cpu_fraction: f64,
    pub rss_bytes: u64,
    pub window_s: f64,
    pub sampled_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingAction {
    Activate,
    Deactivate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingReason {
    HighUtilization,
    BacklogGrowth,
    LowUtilizationIdle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingDecision {
    pub stage_name: String,
    pub action: ScalingAction,
    pub machine_id: String,
    /// The worker to stop, for deactivations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_id: Option<String>,
    pub reason: ScalingReason,
    pub decided_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLimits {
    pub stage_name: String,
    pub input_queue: String,
    pub min_workers: u32,
    pub max_workers: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub machine_id: String,
    pub active: bool,
    /// Worker slots, normally the core count.
    pub capacity: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub worker_id: String,
    pub stage_name: String,
    pub machine_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerState {
    /// Stages in pipeline order.
    pub stages: Vec<StageLimits>,
    pub machines: Vec<MachineInfo>,
    pub placements: Vec<Placement>,
    /// Time of the last applied decision per stage.
    pub last_decision_us: BTreeMap<String, i64>,
}

impl ControllerState {
    pub fn worker_count(&self, stage: &str) -> u32 {
        self.placements.iter().filter(|p| p.stage_name == stage).count() as u32
    }

    pub fn machine_load(&self, machine: &str) -> u32 {
        self.placements.iter().filter(|p| p.machine_id == machine).count() as u32
    }

    /// Records an applied activation.
    pub fn record_activation(&mut self, decision: &ScalingDecision, worker_id: &str) {
        self.placements.push(Placement {
            worker_id: worker_id.into(),
            stage_name: decision.stage_name.clone(),
            machine_id: decision.machine_id.clone(),
        });
        self.last_decision_us.insert(decision.stage_name.clone(), decision.decided_at);
    }

    /// Records an applied deactivation.
    pub fn record_deactivation(&mut self, decision: &ScalingDecision) {
        if let Some(w) = &decision.worker_id {
            self.placements.retain(|p| &p.worker_id != w);
        }
        self.last_decision_us.insert(decision.stage_name.clone(), decision.decided_at);
    }
}

/// At most one decision per stage, in pipeline order.
///
/// Reports older than two probe periods are ignored. A stage's utilization is
/// the mean `cpu_fraction` over fresh reports of its placed workers; with no
/// such reports only the backlog rule can fire. Machines without a fresh
/// machine-level report count as idle for placement.
pub fn decide(
    reports: &[UtilizationReport],
    queue_stats: &[QueueStats],
    state: &ControllerState,
    config: &ElasticityConfig,
    now_us: i64,
) -> Vec<ScalingDecision> {
    let oldest = now_us - config.max_report_age_us();
    let fresh = || reports.iter().filter(move |r| r.sampled_at >= oldest && r.sampled_at <= now_us);

    let mut machine_cpu: BTreeMap<&str, f64> = BTreeMap::new();
    for r in fresh().filter(|r| r.worker_id.is_none()) {
        machine_cpu.insert(&r.machine_id, r.cpu_fraction);
    }
    let mut worker_cpu: BTreeMap<&str, f64> = BTreeMap::new();
    for r in fresh() {
        if let Some(w) = &r.worker_id {
            worker_cpu.insert(w, r.cpu_fraction);
        }
    }
    let cpu_of = |m: &str| machine_cpu.get(m).copied().unwrap_or(0.0);

    // Slots taken so far, including activations decided earlier this round.
    let mut used: BTreeMap<&str, u32> = state.machines.iter().map(|m| (m.machine_id.as_str(), state.machine_load(&m.machine_id))).collect();

    let mut out = Vec::new();
    for stage in &state.stages {
        let name = stage.stage_name.as_str();
        if let Some(&last) = state.last_decision_us.get(name) {
            if now_us - last < config.cooldown_us() {
                continue;
            }
        }
        let workers: Vec<&Placement> = state.placements.iter().filter(|p| p.stage_name == name).collect();
        let count = workers.len() as u32;
        let utils: Vec<f64> = workers.iter().filter_map(|p| worker_cpu.get(p.worker_id.as_str()).copied()).collect();
        let mean_util = if utils.is_empty() { None } else { Some(utils.iter().sum::<f64>() / utils.len() as f64) };
        let stats = queue_stats.iter().find(|s| s.queue == stage.input_queue);

        if count < stage.max_workers {
            let reason = if mean_util.is_some_and(|u| u > config.u_high) {
                Some(ScalingReason::HighUtilization)
            } else if stats.is_some_and(|s| s.depth > config.backlog_high && s.depth_delta > 0) {
                Some(ScalingReason::BacklogGrowth)
            } else {
                None
            };
            if let Some(reason) = reason {
                let target = state
                    .machines
                    .iter()
                    .filter(|m| m.active && used[m.machine_id.as_str()] < m.capacity)
                    .min_by(|a, b| cpu_of(&a.machine_id).total_cmp(&cpu_of(&b.machine_id)).then(a.machine_id.cmp(&b.machine_id)));
                if let Some(m) = target {
                    *used.get_mut(m.machine_id.as_str()).unwrap() += 1;
                    out.push(ScalingDecision {
                        stage_name: name.into(),
                        action: ScalingAction::Activate,
                        machine_id: m.machine_id.clone(),
                        worker_id: None,
                        reason,
                        decided_at: now_us,
                    });
                    continue;
                }
            }
        }

        if count > stage.min_workers
            && mean_util.is_some_and(|u| u < config.u_low)
            && stats.is_some_and(|s| s.depth == 0)
        {
            let victim = workers
                .iter()
                .max_by(|a, b| cpu_of(&a.machine_id).total_cmp(&cpu_of(&b.machine_id)).then(a.worker_id.cmp(&b.worker_id)))
                .expect("count > min >= 1");
            out.push(ScalingDecision {
                stage_name: name.into(),
                action: ScalingAction::Deactivate,
                machine_id: victim.machine_id.clone(),
                worker_id: Some(victim.worker_id.clone()),
                reason: ScalingReason::LowUtilizationIdle,
                decided_at: now_us,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    const NOW: i64 = 1_000_000_000;

    fn state(workers: u32, min: u32, max: u32) -> ControllerState {
        ControllerState {
            stages: vec![StageLimits { stage_name: "clean".into(), input_queue: "q.clean".into(), min_workers: min, max_workers: max }],
            machines: vec![
                MachineInfo { machine_id: "m1".into(), active: true, capacity: 8 },
                MachineInfo { machine_id: "m2".into(), active: true, capacity: 8 },
            ],
            placements: (0..workers)
                .map(|i| Placement { worker_id: format!("w-{i:03}"), stage_name: "clean".into(), machine_id: "m1".into() })
                .collect(),
            last_decision_us: BTreeMap::new(),
        }
    }

    fn worker_reports(st: &ControllerState, cpu: f64) -> Vec<UtilizationReport> {
        let mut out: Vec<UtilizationReport> = st
            .placements
            .iter()
            .map(|p| UtilizationReport {
                machine_id: p.machine_id.clone(),
                worker_id: Some(p.worker_id.clone()),
                stage_name: Some(p.stage_name.clone()),
                cpu_fraction: cpu,
                rss_bytes: 0,
                window_s: 5.0,
                sampled_at: NOW - 1_000_000,
            })
            .collect();
        for (m, c) in [("m1", 0.6), ("m2", 0.1)] {
            out.push(UtilizationReport {
                machine_id: m.into(),
                worker_id: None,
                stage_name: None,
                cpu_fraction: c,
                rss_bytes: 0,
                window_s: 5.0,
                sampled_at: NOW - 1_000_000,
            });
        }
        out
    }

    fn stats(depth: u64, delta: i64) -> Vec<QueueStats> {
        vec![QueueStats { queue: "q.clean".into(), depth, depth_delta: delta, ..QueueStats::empty("q.clean") }]
    }

    #[test]
    fn high_utilization_activates_on_idle_machine() {
        let st = state(1, 1, 4);
        let d = decide(&worker_reports(&st, 0.9), &stats(0, 0), &st, &ElasticityConfig::default(), NOW);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].action, ScalingAction::Activate);
        assert_eq!(d[0].reason, ScalingReason::HighUtilization);
        assert_eq!(d[0].machine_id, "m2");
    }

    #[test]
    fn backlog_growth_activates() {
        let st = state(1, 1, 4);
        let d = decide(&worker_reports(&st, 0.5), &stats(500, 40), &st, &ElasticityConfig::default(), NOW);
        assert_eq!(d[0].reason, ScalingReason::BacklogGrowth);
    }

    #[test]
    fn idle_stage_deactivates() {
        let st = state(2, 1, 4);
        let d = decide(&worker_reports(&st, 0.1), &stats(0, 0), &st, &ElasticityConfig::default(), NOW);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].action, ScalingAction::Deactivate);
        assert_eq!(d[0].worker_id.as_deref(), Some("w-001"));
    }

    #[test]
    fn cooldown_blocks() {
        let mut st = state(1, 1, 4);
        st.last_decision_us.insert("clean".into(), NOW - 10_000_000);
        assert!(decide(&worker_reports(&st, 0.9), &stats(0, 0), &st, &ElasticityConfig::default(), NOW).is_empty());
    }

    #[test]
    fn stale_reports_are_ignored() {
        let st = state(1, 1, 4);
        let mut reports = worker_reports(&st, 0.9);
        for r in &mut reports {
            r.sampled_at = NOW - 11_000_000;
        }
        assert!(decide(&reports, &stats(0, 0), &st, &ElasticityConfig::default(), NOW).is_empty());
    }

    #[test]
    fn bounds_are_respected() {
        let st = state(4, 1, 4);
        assert!(decide(&worker_reports(&st, 0.99), &stats(1000, 10), &st, &ElasticityConfig::default(), NOW).is_empty());
        let st = state(1, 1, 4);
        assert!(decide(&worker_reports(&st, 0.0), &stats(0, 0), &st, &ElasticityConfig::default(), NOW).is_empty());
    }

    #[test]
    fn no_capacity_no_activation() {
        let mut st = state(1, 1, 4);
        for m in &mut st.machines {
            m.capacity = 1;
        }
        st.machines[1].active = false;
        assert!(decide(&worker_reports(&st, 0.9), &stats(0, 0), &st, &ElasticityConfig::default(), NOW).is_empty());
    }

    #[test]
    fn config_validation() {
        ElasticityConfig::default().validate().unwrap();
        let bad = ElasticityConfig { u_low: 0.9, ..Default::default() };
        assert_eq!(bad.validate(), Err(ConfigError::Thresholds));
        let bad = ElasticityConfig { cooldown_s: 1.0, ..Default::default() };
        assert_eq!(bad.validate(), Err(ConfigError::Periods));
    }
}
