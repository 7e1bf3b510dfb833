use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use pipewise_core::broker::{Broker, BrokerConfig, Message, QueueStats};

use super::journal::Journal;
use super::{Bus, BusError, Headers, Subscription};
use crate::clock::now_us;

struct State {
    broker: Broker,
    routes: HashMap<String, Sender<Message>>,
    journal: Option<Journal>,
}

impl State {
    /// Hands queued deliveries to their consumers and persists journal
    /// events. A consumer whose receiver is gone is disconnected, which can
    /// produce further deliveries, hence the loop.
    fn flush(&mut self) {
        loop {
            let mut gone = Vec::new();
            for d in self.broker.take_deliveries() {
                match self.routes.get(&d.consumer_id) {
                    Some(tx) if tx.send(d.message).is_ok() => {}
                    _ => gone.push(d.consumer_id),
                }
            }
            if gone.is_empty() {
                break;
            }
            for c in gone {
                self.routes.remove(&c);
                let _ = self.broker.disconnect(&c, now() as u64);
            }
        }
        if let Some(j) = &mut self.journal {
            let events = self.broker.take_journal_events();
            if let Err(e) = j.append(&events) {
                log::error!("journal append failed: {e}");
            }
        }
    }
}

fn now() -> i64 {
    now_us()
}

/// In-process broker. Cloning shares the same broker.
#[derive(Clone)]
pub struct LocalBroker {
    state: Arc<Mutex<State>>,
}

impl Default for LocalBroker {
    fn default() -> Self {
        Self::new(BrokerConfig::default())
    }
}

impl LocalBroker {
    pub fn new(mut config: BrokerConfig) -> Self {
        if config.nonce == 0 {
            config.nonce = (now() as u64) ^ ((std::process::id() as u64) << 40);
        }
        Self { state: Arc::new(Mutex::new(State { broker: Broker::new(config), routes: HashMap::new(), journal: None })) }
    }

    /// Opens a broker backed by per-queue journals in `dir`, restoring every
    /// message that was enqueued and never removed.
    pub fn with_journal(config: BrokerConfig, dir: &Path) -> std::io::Result<Self> {
        let b = Self::new(config);
        let (journal, restored) = Journal::open(dir)?;
        {
            let mut st = b.lock();
            let now = now() as u64;
            for queue in journal.queues() {
                let _ = st.broker.declare_queue(&queue, now);
            }
            for m in restored {
                st.broker.restore(m, now);
            }
            st.broker.record_journal();
            // Restores were already on disk.
            st.broker.take_journal_events();
            st.journal = Some(journal);
        }
        Ok(b)
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn with<T>(&self, f: impl FnOnce(&mut Broker, u64) -> T) -> T {
        let mut st = self.lock();
        let out = f(&mut st.broker, now() as u64);
        st.flush();
        out
    }

    pub fn subscribe(&self, queue: &str, prefetch: u32) -> Result<LocalSubscription, BusError> {
        let (tx, rx) = mpsc::channel();
        let mut st = self.lock();
        let now = now() as u64;
        let id = st.broker.consume(queue, prefetch, now)?;
        st.routes.insert(id.clone(), tx);
        st.flush();
        Ok(LocalSubscription { broker: self.clone(), consumer_id: id, rx: Mutex::new(rx), cancelled: AtomicBool::new(false) })
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.lock().broker.queue_names().map(String::from).collect()
    }

    /// Stats for every queue, sorted by name.
    pub fn all_stats(&self) -> Vec<QueueStats> {
        self.with(|b, now| {
            let names: Vec<String> = b.queue_names().map(String::from).collect();
            names.iter().filter_map(|q| b.queue_stats(q, now).ok()).collect()
        })
    }

    fn disconnect(&self, consumer_id: &str) {
        let mut st = self.lock();
        st.routes.remove(consumer_id);
        let _ = st.broker.disconnect(consumer_id, now() as u64);
        st.flush();
    }
}

impl Bus for LocalBroker {
    fn declare(&self, queue: &str) -> Result<QueueStats, BusError> {
        let mut st = self.lock();
        let stats = st.broker.declare_queue(queue, now() as u64)?;
        if let Some(j) = &mut st.journal {
            if let Err(e) = j.touch(queue) {
                log::error!("journal create failed for {queue}: {e}");
            }
        }
        Ok(stats)
    }

    fn publish(&self, queue: &str, payload: Vec<u8>, headers: Headers) -> Result<String, BusError> {
        Ok(self.with(|b, now| b.publish(queue, payload, headers, now))?)
    }

    fn consume(&self, queue: &str, prefetch: u32) -> Result<Arc<dyn Subscription>, BusError> {
        Ok(Arc::new(self.subscribe(queue, prefetch)?))
    }

    fn stats(&self, queue: &str) -> Result<QueueStats, BusError> {
        Ok(self.with(|b, now| b.queue_stats(queue, now))?)
    }
}

pub struct LocalSubscription {
    broker: LocalBroker,
    consumer_id: String,
    rx: Mutex<Receiver<Message>>,
    cancelled: AtomicBool,
}

impl Subscription for LocalSubscription {
    fn consumer_id(&self) -> &str {
        &self.consumer_id
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Message>, BusError> {
        if self.cancelled.load(Ordering::Acquire) {
            return Err(BusError::Closed);
        }
        let rx = self.rx.lock().unwrap_or_else(|p| p.into_inner());
        match rx.recv_timeout(timeout) {
            // A message that raced with cancel has already been handed back.
            Ok(_) if self.cancelled.load(Ordering::Acquire) => Err(BusError::Closed),
            Ok(m) => Ok(Some(m)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Closed),
        }
    }

    fn ack(&self, msg_id: &str) -> Result<(), BusError> {
        Ok(self.broker.with(|b, now| b.ack(&self.consumer_id, msg_id, now))?)
    }

    fn nack(&self, msg_id: &str, requeue: bool) -> Result<(), BusError> {
        Ok(self.broker.with(|b, now| b.nack(&self.consumer_id, msg_id, requeue, now))?)
    }

    fn cancel(&self) {
        if !self.cancelled.swap(true, Ordering::AcqRel) {
            self.broker.disconnect(&self.consumer_id);
        }
    }
}

impl Drop for LocalSubscription {
    fn drop(&mut self) {
        self.cancel();
    }
}
