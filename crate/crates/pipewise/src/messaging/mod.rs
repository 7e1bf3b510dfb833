//! Broker runtime around the core state machine.
//!
//! [`LocalBroker`] owns one [`Broker`](pipewise_core::broker::Broker) behind a
//! mutex and hands deliveries to per-consumer channels. [`tcp`] exposes it on
//! a socket and provides [`RemoteBroker`], a client speaking the same frames.
//! Both implement [`Bus`], which is all the workers and services depend on.

mod journal;
mod local;
pub mod tcp;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use pipewise_core::broker::{BrokerError, Message, QueueStats};
use thiserror::Error;

pub use journal::Journal;
pub use local::{LocalBroker, LocalSubscription};
pub use tcp::{serve, BrokerServer, RemoteBroker};

pub const DEFAULT_PORT: u16 = 7621;

#[derive(Debug, Error)]
pub enum BusError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    /// Error frame from a remote broker.
    #[error("broker rejected request: {0}")]
    Rejected(String),
    #[error("broker unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The subscription was cancelled or its connection closed.
    #[error("subscription closed")]
    Closed,
}

pub type Headers = BTreeMap<String, String>;

/// Broker operations shared by the in-process and remote brokers.
pub trait Bus: Send + Sync {
    fn declare(&self, queue: &str) -> Result<QueueStats, BusError>;
    fn publish(&self, queue: &str, payload: Vec<u8>, headers: Headers) -> Result<String, BusError>;
    fn consume(&self, queue: &str, prefetch: u32) -> Result<Arc<dyn Subscription>, BusError>;
    fn stats(&self, queue: &str) -> Result<QueueStats, BusError>;
}

/// One registered consumer. Dropping the last handle cancels it, which makes
/// the broker redeliver whatever it still holds.
pub trait Subscription: Send + Sync {
    fn consumer_id(&self) -> &str;
    /// `Ok(None)` on timeout, `Err(Closed)` once cancelled.
    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Message>, BusError>;
    fn ack(&self, msg_id: &str) -> Result<(), BusError>;
    fn nack(&self, msg_id: &str, requeue: bool) -> Result<(), BusError>;
    /// Idempotent.
    fn cancel(&self);
}

/// Where to find a broker.
#[derive(Clone)]
pub enum Endpoint {
    Local(LocalBroker),
    Remote(String),
}

impl Endpoint {
    pub fn connect(&self) -> Result<Arc<dyn Bus>, BusError> {
        match self {
            Endpoint::Local(b) => Ok(Arc::new(b.clone())),
            Endpoint::Remote(addr) => Ok(Arc::new(RemoteBroker::connect(addr)?)),
        }
    }
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Local(_) => f.write_str("Endpoint::Local"),
            Endpoint::Remote(a) => write!(f, "Endpoint::Remote({a})"),
        }
    }
}

/// Publishes a JSON body with no headers.
pub fn publish_json<T: serde::Serialize>(bus: &dyn Bus, queue: &str, body: &T) -> Result<String, BusError> {
    let payload = serde_json::to_vec(body).expect("value serializes");
    bus.publish(queue, payload, Headers::new())
}
