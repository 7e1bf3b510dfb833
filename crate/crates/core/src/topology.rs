//! Pipeline, stage, worker and machine descriptions.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::is_valid_queue_name;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage_name: String,
    pub input_queue: String,
    #[serde(default)]
    pub output_queue: Option<String>,
    pub handler_kind: String,
    pub min_workers: u32,
    pub max_workers: u32,
    pub prefetch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub pipeline_name: String,
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("pipeline has no stages")]
    Empty,
    #[error("stage `{0}` appears more than once")]
    DuplicateStage(String),
    #[error("stage `{stage}` reads `{input}` but the previous stage writes {previous:?}")]
    BrokenChain { stage: String, input: String, previous: Option<String> },
    #[error("stage `{0}` has the same input and output queue")]
    SelfLoop(String),
    #[error("queue `{0}` is used by more than one stage")]
    Cycle(String),
    #[error("stage `{0}`: need 1 <= min_workers <= max_workers")]
    WorkerBounds(String),
    #[error("stage `{0}`: prefetch must be at least 1")]
    Prefetch(String),
    #[error("invalid queue name `{0}`")]
    QueueName(String),
    #[error("stage `{stage}` uses unknown handler `{handler}`")]
    UnknownHandler { stage: String, handler: String },
}

impl StageSpec {
    pub fn new(stage_name: &str, input: &str, output: Option<&str>, handler_kind: &str) -> Self {
        Self {
            stage_name: stage_name.into(),
            input_queue: input.into(),
            output_queue: output.map(Into::into),
            handler_kind: handler_kind.into(),
            min_workers: 1,
            max_workers: 1,
            prefetch: 1,
        }
    }

    pub fn with_workers(mut self, min: u32, max: u32) -> Self {
        self.min_workers = min;
        self.max_workers = max;
        self
    }
}

impl PipelineSpec {
    /// Checks structure; `known_handler` decides which handler kinds exist.
    pub fn validate(&self, known_handler: impl Fn(&str) -> bool) -> Result<(), SpecError> {
        if self.stages.is_empty() {
            return Err(SpecError::Empty);
        }
        let mut names = BTreeSet::new();
        let mut queues = BTreeSet::new();
        let mut previous: Option<&StageSpec> = None;
        for stage in &self.stages {
            if !names.insert(stage.stage_name.as_str()) {
                return Err(SpecError::DuplicateStage(stage.stage_name.clone()));
            }
            for q in core::iter::once(&stage.input_queue).chain(stage.output_queue.as_ref()) {
                if !is_valid_queue_name(q) {
                    return Err(SpecError::QueueName(q.clone()));
                }
            }
            if stage.output_queue.as_ref() == Some(&stage.input_queue) {
                return Err(SpecError::SelfLoop(stage.stage_name.clone()));
            }
            if let Some(prev) = previous {
                if prev.output_queue.as_ref() != Some(&stage.input_queue) {
                    return Err(SpecError::BrokenChain {
                        stage: stage.stage_name.clone(),
                        input: stage.input_queue.clone(),
                        previous: prev.output_queue.clone(),
                    });
                }
            } else if !queues.insert(stage.input_queue.as_str()) {
                return Err(SpecError::Cycle(stage.input_queue.clone()));
            }
            if let Some(out) = &stage.output_queue {
                if !queues.insert(out.as_str()) {
                    return Err(SpecError::Cycle(out.clone()));
                }
            }
            if stage.min_workers < 1 || stage.min_workers > stage.max_workers {
                return Err(SpecError::WorkerBounds(stage.stage_name.clone()));
            }
            if stage.prefetch < 1 {
                return Err(SpecError::Prefetch(stage.stage_name.clone()));
            }
            if !known_handler(&stage.handler_kind) {
                return Err(SpecError::UnknownHandler {
                    stage: stage.stage_name.clone(),
                    handler: stage.handler_kind.clone(),
                });
            }
            previous = Some(stage);
        }
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.stage_name == name)
    }

    /// Every queue the pipeline reads or writes, in chain order.
    pub fn queues(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.stages {
            for q in core::iter::once(&s.input_queue).chain(s.output_queue.as_ref()) {
                if !out.contains(q) {
                    out.push(q.clone());
                }
            }
        }
        out
    }

    /// The four-stage predictive-maintenance pipeline.
    pub fn pdm() -> Self {
        Self {
            pipeline_name: "smart-pdm".into(),
            stages: alloc::vec![
                StageSpec::new("download", "q.download", Some("q.clean"), "pdm.download").with_workers(1, 4),
                StageSpec::new("clean", "q.clean", Some("q.feature"), "pdm.clean").with_workers(1, 4),
                StageSpec::new("feature", "q.feature", Some("q.classify"), "pdm.feature").with_workers(1, 4),
                StageSpec::new("classify", "q.classify", None, "pdm.classify").with_workers(1, 4),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerState {
    Starting,
    Running,
    Draining,
    Stopped,
    Failed,
}

impl WorkerState {
    /// starting → running → (draining → stopped | failed). A worker can also
    /// fail from any live state.
    pub fn can_transition_to(self, next: WorkerState) -> bool {
        use WorkerState::*;
        matches!(
            (self, next),
            (Starting, Running) | (Running, Draining) | (Draining, Stopped) | (Starting | Running | Draining, Failed)
        )
    }

    pub fn is_live(self) -> bool {
        matches!(self, WorkerState::Starting | WorkerState::Running | WorkerState::Draining)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkerKind {
    InProcess,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerDescriptor {
    pub worker_id: String,
    pub stage_name: String,
    pub machine_id: String,
    pub state: WorkerState,
    pub kind: WorkerKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineDescriptor {
    pub machine_id: String,
    pub address: String,
    pub core_count: u32,
    pub active: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn any(_: &str) -> bool {
        true
    }

    #[test]
    fn pdm_pipeline_is_valid() {
        let p = PipelineSpec::pdm();
        p.validate(any).unwrap();
        assert_eq!(p.queues(), ["q.download", "q.clean", "q.feature", "q.classify"]);
    }

    #[test]
    fn broken_chain() {
        let mut p = PipelineSpec::pdm();
        p.stages[1].input_queue = "q.other".into();
        assert!(matches!(p.validate(any), Err(SpecError::BrokenChain { .. })));
    }

    #[test]
    fn single_terminal_stage() {
        let p = PipelineSpec { pipeline_name: "p".into(), stages: alloc::vec![StageSpec::new("only", "q.in", None, "h")] };
        p.validate(any).unwrap();
    }

    #[test]
    fn duplicate_and_cycle_and_handler() {
        let mut p = PipelineSpec::pdm();
        p.stages[2].stage_name = "download".into();
        assert_eq!(p.validate(any), Err(SpecError::DuplicateStage("download".into())));

        let mut p = PipelineSpec::pdm();
        p.stages[3].output_queue = Some("q.download".into());
        assert_eq!(p.validate(any), Err(SpecError::Cycle("q.download".into())));

        let p = PipelineSpec::pdm();
        assert!(matches!(p.validate(|h| h != "pdm.clean"), Err(SpecError::UnknownHandler { .. })));

        let mut p = PipelineSpec::pdm();
        p.stages[0].min_workers = 5;
        assert!(matches!(p.validate(any), Err(SpecError::WorkerBounds(_))));
    }

    #[test]
    fn worker_state_machine() {
        use WorkerState::*;
        assert!(Starting.can_transition_to(Running));
        assert!(Draining.can_transition_to(Stopped));
        assert!(!Running.can_transition_to(Stopped));
        assert!(!Stopped.can_transition_to(Running));
        assert!(Running.can_transition_to(Failed));
    }
}
