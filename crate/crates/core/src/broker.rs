//! In-memory queue broker state machine.
//!
//! Named FIFO queues with competing consumers, per-consumer prefetch limits,
//! acknowledgements, redelivery and dead-lettering. The broker performs no IO
//! and reads no clock: callers pass the current time in microseconds and
//! collect the deliveries produced by each operation with
//! [`Broker::take_deliveries`].
//!
//! Delivery rules:
//! * each queue is FIFO; ready messages go to live consumers round-robin in
//!   registration order, skipping consumers that are at their prefetch limit;
//! * a nack with `requeue` or a consumer disconnect puts the message back at
//!   the head of its queue, unless it has already been delivered
//!   `max_deliveries` times, in which case it moves to `<queue>.dlq`;
//! * a nack without `requeue` moves the message to `<queue>.dlq` directly.
//!
//! `depth` counts every message the queue still owns: ready plus delivered
//! but unacknowledged.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_PAYLOAD: usize = 8 * 1024 * 1024;
pub const DEFAULT_MAX_DELIVERIES: u32 = 3;
pub const DEFAULT_STATS_WINDOW_US: u64 = 10_000_000;
pub const DLQ_SUFFIX: &str = ".dlq";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("invalid queue name `{0}`")]
    InvalidName(String),
    #[error("unknown queue `{0}`")]
    UnknownQueue(String),
    #[error("payload of {size} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("prefetch must be at least 1")]
    InvalidPrefetch,
    #[error("unknown consumer `{0}`")]
    UnknownConsumer(String),
    #[error("message `{msg_id}` is not in flight for consumer `{consumer_id}`")]
    UnknownDelivery { consumer_id: String, msg_id: String },
}

/// `[a-z0-9._-]{1,128}`
pub fn is_valid_queue_name(name: &str) -> bool {
    (1..=128).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-'))
}

pub fn dead_letter_queue(queue: &str) -> String {
    format!("{queue}{DLQ_SUFFIX}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub msg_id: String,
    pub queue: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    pub payload: Vec<u8>,
    pub delivery_count: u32,
}

/// Changes to queue contents, for an append-only journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum JournalEvent {
    Enqueued { message: Message },
    Removed { queue: String, msg_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub consumer_id: String,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub queue: String,
    pub depth: u64,
    pub consumer_count: u64,
    /// Publishes per second over the stats window.
    pub enqueue_rate: f64,
    /// Depth now minus depth one window ago.
    pub depth_delta: i64,
    #[serde(default)]
    pub ready: u64,
    #[serde(default)]
    pub in_flight: u64,
    #[serde(default)]
    pub published: u64,
    #[serde(default)]
    pub acked: u64,
    #[serde(default)]
    pub dead_lettered: u64,
}

impl QueueStats {
    pub fn empty(queue: &str) -> Self {
        Self {
            queue: queue.into(),
            depth: 0,
            consumer_count: 0,
            enqueue_rate: 0.0,
            depth_delta: 0,
            ready: 0,
            in_flight: 0,
            published: 0,
            acked: 0,
            dead_lettered: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerConfig {
    pub max_payload: usize,
    pub max_deliveries: u32,
    pub stats_window_us: u64,
    /// Mixed into message ids so that ids from different broker lifetimes
    /// differ.
    pub nonce: u64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            max_payload: DEFAULT_MAX_PAYLOAD,
            max_deliveries: DEFAULT_MAX_DELIVERIES,
            stats_window_us: DEFAULT_STATS_WINDOW_US,
            nonce: 0,
        }
    }
}

#[derive(Debug)]
struct InFlight {
    consumer_id: String,
    seq: u64,
    message: Message,
}

#[derive(Debug)]
struct Consumer {
    queue: String,
    prefetch: u32,
    outstanding: u32,
}

#[derive(Debug, Default)]
struct Queue {
    ready: VecDeque<Message>,
    consumers: Vec<String>,
    cursor: usize,
    in_flight: BTreeMap<String, InFlight>,
    published: u64,
    acked: u64,
    dead_lettered: u64,
    publish_times: VecDeque<u64>,
    /// (time, depth) after every depth change, oldest first.
    depth_history: VecDeque<(u64, u64)>,
}

impl Queue {
    fn new(now_us: u64) -> Self {
        let mut q = Queue::default();
        q.depth_history.push_back((now_us, 0));
        q
    }

    fn depth(&self) -> u64 {
        (self.ready.len() + self.in_flight.len()) as u64
    }

    fn record_depth(&mut self, now_us: u64, window_us: u64) {
        let depth = self.depth();
        self.depth_history.push_back((now_us, depth));
        self.prune(now_us, window_us);
    }

    fn prune(&mut self, now_us: u64, window_us: u64) {
        let horizon = now_us.saturating_sub(window_us);
        while self.publish_times.front().is_some_and(|&t| t <= horizon) {
            self.publish_times.pop_front();
        }
        // Keep the newest sample at or before the horizon as the baseline.
        while self.depth_history.len() >= 2 && self.depth_history[1].0 <= horizon {
            self.depth_history.pop_front();
        }
    }

    fn depth_at(&self, t: u64) -> u64 {
        self.depth_history
            .iter()
            .take_while(|(at, _)| *at <= t)
            .last()
            .map_or(0, |&(_, d)| d)
    }
}

#[derive(Debug)]
pub struct Broker {
    config: BrokerConfig,
    queues: BTreeMap<String, Queue>,
    consumers: BTreeMap<String, Consumer>,
    next_msg: u64,
    next_consumer: u64,
    next_seq: u64,
    outbox: Vec<Delivery>,
    journal: Option<Vec<JournalEvent>>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new(BrokerConfig::default())
    }
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Self {
            config,
            queues: BTreeMap::new(),
            consumers: BTreeMap::new(),
            next_msg: 0,
            next_consumer: 0,
            next_seq: 0,
            outbox: Vec::new(),
            journal: None,
        }
    }

    /// Starts recording [`JournalEvent`]s; collect them with
    /// [`Broker::take_journal_events`].
    pub fn record_journal(&mut self) {
        self.journal.get_or_insert_with(Vec::new);
    }

    pub fn take_journal_events(&mut self) -> Vec<JournalEvent> {
        self.journal.as_mut().map(core::mem::take).unwrap_or_default()
    }

    fn journal_removed(&mut self, queue: &str, msg_id: &str) {
        if let Some(j) = &mut self.journal {
            j.push(JournalEvent::Removed { queue: queue.to_string(), msg_id: msg_id.to_string() });
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn queue_names(&self) -> impl Iterator<Item = &str> {
        self.queues.keys().map(String::as_str)
    }

    pub fn has_queue(&self, name: &str) -> bool {
        self.queues.contains_key(name)
    }

    /// Creates the queue if needed; declaring an existing queue changes
    /// nothing.
    pub fn declare_queue(&mut self, name: &str, now_us: u64) -> Result<QueueStats, BrokerError> {
        if !is_valid_queue_name(name) {
            return Err(BrokerError::InvalidName(name.to_string()));
        }
        self.queues.entry(name.to_string()).or_insert_with(|| Queue::new(now_us));
        self.queue_stats(name, now_us)
    }

    fn ensure_internal_queue(&mut self, name: &str, now_us: u64) {
        self.queues.entry(name.to_string()).or_insert_with(|| Queue::new(now_us));
    }

    fn new_msg_id(&mut self) -> String {
        let counter = self.next_msg;
        self.next_msg += 1;
        let hi = self.config.nonce;
        format!(
            "{:08x}-{:04x}-{:04x}-{:04x}-{:012x}",
            (hi >> 32) as u32,
            (hi >> 16) as u16,
            hi as u16,
            (counter >> 48) as u16,
            counter & 0xFFFF_FFFF_FFFF
        )
    }

    pub fn publish(
        &mut self,
        queue: &str,
        payload: Vec<u8>,
        headers: BTreeMap<String, String>,
        now_us: u64,
    ) -> Result<String, BrokerError> {
        if !self.queues.contains_key(queue) {
            return Err(BrokerError::UnknownQueue(queue.to_string()));
        }
        if payload.len() > self.config.max_payload {
            return Err(BrokerError::PayloadTooLarge { size: payload.len(), max: self.config.max_payload });
        }
        let msg_id = self.new_msg_id();
        let message = Message { msg_id: msg_id.clone(), queue: queue.to_string(), headers, payload, delivery_count: 0 };
        self.enqueue(message, now_us);
        self.dispatch(queue, now_us);
        Ok(msg_id)
    }

    fn enqueue(&mut self, message: Message, now_us: u64) {
        if let Some(j) = &mut self.journal {
            j.push(JournalEvent::Enqueued { message: message.clone() });
        }
        let window = self.config.stats_window_us;
        let q = self.queues.get_mut(&message.queue).expect("queue exists");
        q.published += 1;
        q.publish_times.push_back(now_us);
        q.ready.push_back(message);
        q.record_depth(now_us, window);
    }

    /// Re-inserts a message recovered from a journal, keeping its id and
    /// delivery count. Creates the queue if it does not exist.
    pub fn restore(&mut self, message: Message, now_us: u64) {
        let queue = message.queue.clone();
        self.ensure_internal_queue(&queue, now_us);
        self.enqueue(message, now_us);
        self.dispatch(&queue, now_us);
    }

    /// Registers a consumer and returns its id.
    pub fn consume(&mut self, queue: &str, prefetch: u32, now_us: u64) -> Result<String, BrokerError> {
        if prefetch == 0 {
            return Err(BrokerError::InvalidPrefetch);
        }
        let q = self.queues.get_mut(queue).ok_or_else(|| BrokerError::UnknownQueue(queue.to_string()))?;
        let consumer_id = format!("c-{:06}", self.next_consumer);
        self.next_consumer += 1;
        q.consumers.push(consumer_id.clone());
        self.consumers.insert(consumer_id.clone(), Consumer { queue: queue.to_string(), prefetch, outstanding: 0 });
        self.dispatch(queue, now_us);
        Ok(consumer_id)
    }

    pub fn ack(&mut self, consumer_id: &str, msg_id: &str, now_us: u64) -> Result<(), BrokerError> {
        let (queue, _) = self.take_in_flight(consumer_id, msg_id)?;
        self.journal_removed(&queue, msg_id);
        let window = self.config.stats_window_us;
        let q = self.queues.get_mut(&queue).expect("queue exists");
        q.acked += 1;
        q.record_depth(now_us, window);
        self.dispatch(&queue, now_us);
        Ok(())
    }

    pub fn nack(&mut self, consumer_id: &str, msg_id: &str, requeue: bool, now_us: u64) -> Result<(), BrokerError> {
        let (queue, message) = self.take_in_flight(consumer_id, msg_id)?;
        if requeue {
            self.return_to_queue(message, now_us);
        } else {
            self.dead_letter(message, now_us);
        }
        self.dispatch(&queue, now_us);
        Ok(())
    }

    /// Drops a consumer; its unacknowledged messages are redelivered (or
    /// dead-lettered once out of attempts). Returns how many it held.
    pub fn disconnect(&mut self, consumer_id: &str, now_us: u64) -> Result<usize, BrokerError> {
        let consumer = self
            .consumers
            .remove(consumer_id)
            .ok_or_else(|| BrokerError::UnknownConsumer(consumer_id.to_string()))?;
        let queue = consumer.queue;
        let q = self.queues.get_mut(&queue).expect("queue exists");
        if let Some(idx) = q.consumers.iter().position(|c| c == consumer_id) {
            q.consumers.remove(idx);
            if idx < q.cursor {
                q.cursor -= 1;
            }
            if q.cursor >= q.consumers.len() {
                q.cursor = 0;
            }
        }
        let mut held: Vec<InFlight> = Vec::new();
        let ids: Vec<String> = q
            .in_flight
            .iter()
            .filter(|(_, f)| f.consumer_id == consumer_id)
            .map(|(id, _)| id.clone())
            .collect();
        for id in ids {
            held.push(q.in_flight.remove(&id).expect("present"));
        }
        // Newest first, so pushing each to the head restores delivery order.
        held.sort_by(|a, b| b.seq.cmp(&a.seq));
        let count = held.len();
        for f in held {
            self.return_to_queue(f.message, now_us);
        }
        self.dispatch(&queue, now_us);
        Ok(count)
    }

    pub fn queue_stats(&mut self, queue: &str, now_us: u64) -> Result<QueueStats, BrokerError> {
        let window = self.config.stats_window_us;
        let q = self.queues.get_mut(queue).ok_or_else(|| BrokerError::UnknownQueue(queue.to_string()))?;
        q.prune(now_us, window);
        let depth = q.depth();
        let baseline = q.depth_at(now_us.saturating_sub(window));
        Ok(QueueStats {
            queue: queue.to_string(),
            depth,
            consumer_count: q.consumers.len() as u64,
            enqueue_rate: q.publish_times.len() as f64 / (window as f64 / 1e6),
            depth_delta: depth as i64 - baseline as i64,
            ready: q.ready.len() as u64,
            in_flight: q.in_flight.len() as u64,
            published: q.published,
            acked: q.acked,
            dead_lettered: q.dead_lettered,
        })
    }

    pub fn take_deliveries(&mut self) -> Vec<Delivery> {
        core::mem::take(&mut self.outbox)
    }

    /// Ids of messages currently delivered to `consumer_id` and not yet
    /// settled.
    pub fn in_flight_for(&self, consumer_id: &str) -> Vec<String> {
        let Some(c) = self.consumers.get(consumer_id) else { return Vec::new() };
        self.queues[&c.queue]
            .in_flight
            .iter()
            .filter(|(_, f)| f.consumer_id == consumer_id)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn consumer_queue(&self, consumer_id: &str) -> Option<&str> {
        self.consumers.get(consumer_id).map(|c| c.queue.as_str())
    }

    /// Messages waiting in `queue`, head first.
    pub fn ready_messages(&self, queue: &str) -> Option<impl Iterator<Item = &Message>> {
        self.queues.get(queue).map(|q| q.ready.iter())
    }

    fn take_in_flight(&mut self, consumer_id: &str, msg_id: &str) -> Result<(String, Message), BrokerError> {
        let unknown = || BrokerError::UnknownDelivery { consumer_id: consumer_id.to_string(), msg_id: msg_id.to_string() };
        let queue = self.consumers.get(consumer_id).ok_or_else(unknown)?.queue.clone();
        let q = self.queues.get_mut(&queue).expect("queue exists");
        match q.in_flight.get(msg_id) {
            Some(f) if f.consumer_id == consumer_id => {}
            _ => return Err(unknown()),
        }
        let f = q.in_flight.remove(msg_id).expect("present");
        if let Some(c) = self.consumers.get_mut(consumer_id) {
            c.outstanding -= 1;
        }
        Ok((queue, f.message))
    }

    fn return_to_queue(&mut self, message: Message, now_us: u64) {
        if message.delivery_count >= self.config.max_deliveries {
            self.dead_letter(message, now_us);
            return;
        }
        let window = self.config.stats_window_us;
        let q = self.queues.get_mut(&message.queue).expect("queue exists");
        q.ready.push_front(message);
        q.record_depth(now_us, window);
    }

    fn dead_letter(&mut self, mut message: Message, now_us: u64) {
        let window = self.config.stats_window_us;
        let source = message.queue.clone();
        let dlq = dead_letter_queue(&source);
        self.journal_removed(&source, &message.msg_id);
        {
            let q = self.queues.get_mut(&source).expect("queue exists");
            q.dead_lettered += 1;
            q.record_depth(now_us, window);
        }
        self.ensure_internal_queue(&dlq, now_us);
        message.headers.insert("x-dead-letter-from".into(), source);
        message.queue = dlq.clone();
        self.enqueue(message, now_us);
        self.dispatch(&dlq, now_us);
    }

    fn dispatch(&mut self, queue: &str, now_us: u64) {
        let window = self.config.stats_window_us;
        let Some(q) = self.queues.get_mut(queue) else { return };
        let mut changed = false;
        while !q.ready.is_empty() && !q.consumers.is_empty() {
            let n = q.consumers.len();
            let chosen = (0..n).map(|k| (q.cursor + k) % n).find(|&idx| {
                let c = &self.consumers[&q.consumers[idx]];
                c.outstanding < c.prefetch
            });
            let Some(idx) = chosen else { break };
            q.cursor = (idx + 1) % n;
            let consumer_id = q.consumers[idx].clone();
            let mut message = q.ready.pop_front().expect("non-empty");
            message.delivery_count += 1;
            self.consumers.get_mut(&consumer_id).expect("registered").outstanding += 1;
            let seq = self.next_seq;
            self.next_seq += 1;
            q.in_flight.insert(
                message.msg_id.clone(),
                InFlight { consumer_id: consumer_id.clone(), seq, message: message.clone() },
            );
            self.outbox.push(Delivery { consumer_id, message });
            changed = true;
        }
        if changed {
            q.prune(now_us, window);
        }
    }
}
