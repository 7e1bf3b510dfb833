//! Sensor-facing side: MQTT collection into the raw store, the raw-data
//! HTTP API the download stage fetches from, and cycle notifications into
//! the first pipeline queue.

pub mod mqtt_server;
pub mod rawstore;

use std::collections::HashSet;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use pipewise_core::batch::CycleNotification;
use pipewise_core::segment::Channel;
use thiserror::Error;

use crate::http::{query_i64, serve_http, HttpService, Reply, Request};
use crate::messaging::{publish_json, Bus, BusError, Endpoint};
use crate::storage::format_value;
pub use mqtt_server::{IngestCounters, MqttServer};
pub use rawstore::{RawSeries, RawStore, RawStoreError};

pub const DOWNLOAD_QUEUE: &str = "q.download";
pub const DEFAULT_HTTP_PORT: u16 = 8090;

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 5, initial_backoff: Duration::from_millis(100), max_backoff: Duration::from_secs(2) }
    }
}

#[derive(Debug, Error)]
pub enum NotifyError {
    #[error("invalid notification: {0}")]
    Invalid(String),
    #[error("broker unreachable after {attempts} attempts: {last}")]
    BrokerUnreachable { attempts: u32, last: BusError },
}

/// Publishes cycle notifications to `q.download`, reconnecting and retrying
/// with exponential backoff.
pub struct Notifier {
    endpoint: Endpoint,
    retry: RetryPolicy,
    bus: Mutex<Option<Arc<dyn Bus>>>,
}

impl Notifier {
    pub fn new(endpoint: Endpoint, retry: RetryPolicy) -> Self {
        Self { endpoint, retry, bus: Mutex::new(None) }
    }

    fn attempt(&self, n: &CycleNotification) -> Result<String, BusError> {
        let mut slot = self.bus.lock().unwrap();
        let bus = match &*slot {
            Some(b) => b.clone(),
            None => {
                let b = self.endpoint.connect()?;
                b.declare(DOWNLOAD_QUEUE)?;
                *slot = Some(b.clone());
                b
            }
        };
        let r = publish_json(&*bus, DOWNLOAD_QUEUE, n);
        if r.is_err() {
            *slot = None;
        }
        r
    }

    pub fn notify(&self, n: &CycleNotification) -> Result<String, NotifyError> {
        n.validate().map_err(|e| NotifyError::Invalid(e.to_string()))?;
        let mut backoff = self.retry.initial_backoff;
        let mut k = 0;
        loop {
            k += 1;
            match self.attempt(n) {
                Ok(id) => return Ok(id),
                Err(e) if k >= self.retry.attempts => return Err(NotifyError::BrokerUnreachable { attempts: k, last: e }),
                Err(e) => {
                    log::warn!("notify attempt {k} failed: {e}");
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(self.retry.max_backoff);
                }
            }
        }
    }
}

/// HTTP handler for `GET /raw/{device}/{channel}` and `POST /notify`.
pub fn handle_http(store: &RawStore, notifier: &Notifier, req: &Request) -> Reply {
    let segs = req.segments();
    match (req.method.as_str(), segs.as_slice()) {
        ("GET", ["raw", device, channel]) => {
            let Ok(channel) = channel.parse::<Channel>() else {
                return Reply::bad_request(&format!("unknown channel `{channel}`"));
            };
            let (from, to) = match (query_i64(req, "from_us"), query_i64(req, "to_us")) {
                (Ok(f), Ok(t)) => (f, t),
                (Err(r), _) | (_, Err(r)) => return r,
            };
            if to <= from {
                return Reply::bad_request("to_us must be greater than from_us");
            }
            match store.query(device, channel, from, to) {
                Ok(series) => raw_reply(&series),
                Err(RawStoreError::UnknownDevice(d)) => Reply::not_found(&format!("device `{d}`")),
                Err(e) => Reply::error(500, &e.to_string()),
            }
        }
        ("POST", ["notify"]) => {
            let n: CycleNotification = match serde_json::from_slice(&req.body) {
                Ok(n) => n,
                Err(e) => return Reply::bad_request(&format!("bad notification: {e}")),
            };
            match notifier.notify(&n) {
                Ok(id) => Reply::json(202, &serde_json::json!({ "msg_id": id, "cycle_id": n.cycle_id })),
                Err(NotifyError::Invalid(m)) => Reply::bad_request(&m),
                Err(e) => Reply::error(503, &e.to_string()),
            }
        }
        _ => Reply::not_found("route"),
    }
}

/// `timestamp_us,value` lines; the stream kind and rate travel in headers.
fn raw_reply(series: &RawSeries) -> Reply {
    let mut body = String::with_capacity(series.samples.len() * 24);
    for (t, v) in &series.samples {
        body.push_str(&t.to_string());
        body.push(',');
        body.push_str(&format_value(*v));
        body.push('\n');
    }
    let mut r = Reply::text(200, "text/csv", body.into_bytes());
    if let Some(k) = series.kind {
        r = r.with_header("X-Stream-Kind", k.as_str());
    }
    if let Some(rate) = series.rate_hz {
        r = r.with_header("X-Rate-Hz", &rate.to_string());
    }
    r
}

pub struct IngestConfig {
    pub raw_root: PathBuf,
    pub mqtt_addr: String,
    pub http_addr: String,
    pub broker: Endpoint,
    pub allow: Option<HashSet<String>>,
    pub retry: RetryPolicy,
}

pub struct IngestService {
    pub store: Arc<RawStore>,
    pub mqtt: MqttServer,
    pub http: HttpService,
}

impl IngestService {
    pub fn start(config: IngestConfig) -> anyhow::Result<Self> {
        let store = Arc::new(RawStore::open(&config.raw_root)?);
        let mqtt = MqttServer::start(TcpListener::bind(&config.mqtt_addr)?, store.clone(), config.allow)?;
        let notifier = Arc::new(Notifier::new(config.broker, config.retry));
        let st = store.clone();
        let http = serve_http(&config.http_addr, 4, move |req| handle_http(&st, &notifier, req))?;
        Ok(Self { store, mqtt, http })
    }

    pub fn mqtt_addr(&self) -> SocketAddr {
        self.mqtt.local_addr()
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http.local_addr()
    }
}
