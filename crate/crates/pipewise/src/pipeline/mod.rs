//! Worker framework: handler registry, pipeline registration, the worker
//! loop and the per-machine node agent.

pub mod agent;
pub mod worker;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use pipewise_core::broker::Message;
use pipewise_core::topology::{PipelineSpec, SpecError};
use thiserror::Error;

use crate::messaging::{Bus, BusError};
use crate::storage::{write_atomic, WriteMode};

pub use agent::{AgentClient, AgentError, AgentServer, NodeAgent, SubprocessTemplate, DEFAULT_AGENT_PORT};
pub use worker::{run_stage_loop, LoopContext, WorkerHandle, MAX_ATTEMPTS};

/// A stage's message transformation.
///
/// `handle` returns the payload to publish on the stage's output queue, or
/// `None` to publish nothing. Handlers must be idempotent: under
/// at-least-once delivery the same message can arrive more than once.
pub trait Handler: Send + Sync {
    fn handle(&self, message: &Message) -> anyhow::Result<Option<Vec<u8>>>;

    /// Called once after `message` has been dead-lettered.
    fn dead_lettered(&self, _message: &Message, _error: &anyhow::Error) {}
}

impl<F> Handler for F
where
    F: Fn(&Message) -> anyhow::Result<Option<Vec<u8>>> + Send + Sync,
{
    fn handle(&self, message: &Message) -> anyhow::Result<Option<Vec<u8>>> {
        self(message)
    }
}

#[derive(Default, Clone)]
pub struct Registry {
    handlers: BTreeMap<String, Arc<dyn Handler>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, kind: &str, handler: Arc<dyn Handler>) -> &mut Self {
        self.handlers.insert(kind.into(), handler);
        self
    }

    pub fn get(&self, kind: &str) -> Option<Arc<dyn Handler>> {
        self.handlers.get(kind).cloned()
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.handlers.contains_key(kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.handlers.keys().map(String::as_str)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Storage(#[from] crate::storage::StorageError),
}

/// Validates `spec`, declares every stage queue and optionally persists the
/// spec as JSON.
pub fn register_pipeline(spec: &PipelineSpec, registry: &Registry, bus: &dyn Bus, persist: Option<&Path>) -> Result<(), PipelineError> {
    spec.validate(|h| registry.contains(h))?;
    for q in spec.queues() {
        bus.declare(&q)?;
    }
    if let Some(path) = persist {
        let body = serde_json::to_vec_pretty(spec).expect("spec serializes");
        write_atomic(path, WriteMode::Replace, |w| w.write_all(&body))?;
    }
    Ok(())
}

pub fn load_pipeline(path: &Path) -> anyhow::Result<PipelineSpec> {
    let text = std::fs::read(path)?;
    Ok(serde_json::from_slice(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::LocalBroker;

    fn noop() -> Arc<dyn Handler> {
        Arc::new(|_: &Message| -> anyhow::Result<Option<Vec<u8>>> { Ok(None) })
    }

    #[test]
    fn pdm_registration_declares_queues() {
        let mut reg = Registry::new();
        for k in ["pdm.download", "pdm.clean", "pdm.feature", "pdm.classify"] {
            reg.register(k, noop());
        }
        let broker = LocalBroker::default();
        register_pipeline(&PipelineSpec::pdm(), &reg, &broker, None).unwrap();
        let mut names = broker.queue_names();
        names.sort();
        assert_eq!(names, ["q.classify", "q.clean", "q.download", "q.feature"]);
    }

    #[test]
    fn unknown_handler_is_rejected() {
        let broker = LocalBroker::default();
        let err = register_pipeline(&PipelineSpec::pdm(), &Registry::new(), &broker, None).unwrap_err();
        assert!(matches!(err, PipelineError::Spec(SpecError::UnknownHandler { .. })));
        assert!(broker.queue_names().is_empty());
    }
}
