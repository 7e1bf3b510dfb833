//! MQTT 3.1.1 subset server: CONNECT, PUBLISH at QoS 0/1, PINGREQ and
//! DISCONNECT. Subscriptions are refused (SUBACK 0x80); this endpoint only
//! collects sensor data.
//!
//! QoS 1 sessions outlive their connection unless the client asks for a
//! clean session, so a DUP resend after a reconnect is still recognized. A
//! new CONNECT takes the session over: the old socket is shut down and
//! anything it still had buffered is dropped unacknowledged, since the
//! client resends it. Dedup, takeover and store all happen under the
//! session lock.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use pipewise_core::batch::SampleBatch;
use pipewise_core::mqtt::{self, ConnectReturnCode, Packet, QoS};

use super::rawstore::RawStore;

pub const DEFAULT_PORT: u16 = 1883;
pub const DEDUP_WINDOW: usize = 64;

#[derive(Default)]
struct Session {
    recent: VecDeque<u16>,
    /// Bumped by each CONNECT; only the newest connection may store.
    owner: u64,
    socket: Option<TcpStream>,
}

impl Session {
    fn seen(&self, id: u16) -> bool {
        self.recent.contains(&id)
    }

    fn remember(&mut self, id: u16) {
        if self.recent.len() == DEDUP_WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(id);
    }
}

#[derive(Debug, Default)]
pub struct IngestCounters {
    pub batches_stored: AtomicU64,
    pub samples_stored: AtomicU64,
    pub duplicates_dropped: AtomicU64,
    pub rejected: AtomicU64,
}

struct Shared {
    store: Arc<RawStore>,
    allow: Option<HashSet<String>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    counters: Arc<IngestCounters>,
    conns: Mutex<Vec<TcpStream>>,
    stop: AtomicBool,
}

pub struct MqttServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
}

impl MqttServer {
    /// `allow` is an optional client-id allowlist.
    pub fn start(listener: TcpListener, store: Arc<RawStore>, allow: Option<HashSet<String>>) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            store,
            allow,
            sessions: Mutex::default(),
            counters: Arc::default(),
            conns: Mutex::default(),
            stop: AtomicBool::new(false),
        });
        let sh = shared.clone();
        thread::Builder::new().name("mqtt-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if sh.stop.load(Ordering::Acquire) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                if let Ok(c) = stream.try_clone() {
                    let mut all = sh.conns.lock().unwrap();
                    all.retain(|s| s.peer_addr().is_ok());
                    all.push(c);
                }
                let sh = sh.clone();
                thread::spawn(move || {
                    if let Err(e) = session_loop(stream, &sh) {
                        log::debug!("mqtt session ended: {e}");
                    }
                });
            }
        })?;
        Ok(Self { addr, shared })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn counters(&self) -> Arc<IngestCounters> {
        self.shared.counters.clone()
    }

    pub fn shutdown(&self) {
        self.shared.stop.store(true, Ordering::Release);
        for c in self.shared.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
    }
}

impl Drop for MqttServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn session_loop(mut stream: TcpStream, sh: &Shared) -> std::io::Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(64 * 1024);
    let mut chunk = vec![0u8; 64 * 1024];
    let mut session: Option<Arc<Mutex<Session>>> = None;
    let mut generation = 0u64;
    loop {
        // Drain every complete packet in the buffer.
        loop {
            let (packet, used) = match mqtt::decode(&buf) {
                Ok(Some(p)) => p,
                Ok(None) => break,
                Err(e) => {
                    log::warn!("closing mqtt connection: {e}");
                    let _ = stream.write_all(&mqtt::encode(&Packet::Disconnect));
                    return Ok(());
                }
            };
            buf.drain(..used);
            match (packet, &session) {
                (Packet::Connect(c), None) => {
                    if sh.allow.as_ref().is_some_and(|a| !a.contains(&c.client_id)) {
                        stream.write_all(&mqtt::encode(&Packet::Connack {
                            session_present: false,
                            code: ConnectReturnCode::NotAuthorized,
                        }))?;
                        return Ok(());
                    }
                    let mut sessions = sh.sessions.lock().unwrap();
                    let present = !c.clean_session && sessions.contains_key(&c.client_id);
                    let s = if c.clean_session {
                        let s = Arc::new(Mutex::new(Session::default()));
                        sessions.insert(c.client_id.clone(), s.clone());
                        s
                    } else {
                        sessions.entry(c.client_id.clone()).or_default().clone()
                    };
                    drop(sessions);
                    {
                        let mut st = s.lock().unwrap();
                        st.owner += 1;
                        generation = st.owner;
                        if let Some(old) = st.socket.take() {
                            let _ = old.shutdown(Shutdown::Both);
                        }
                        st.socket = stream.try_clone().ok();
                    }
                    session = Some(s);
                    if c.keep_alive > 0 {
                        let _ = stream.set_read_timeout(Some(Duration::from_millis(c.keep_alive as u64 * 1500)));
                    }
                    stream.write_all(&mqtt::encode(&Packet::Connack { session_present: present, code: ConnectReturnCode::Accepted }))?;
                }
                (_, None) | (Packet::Connect(_), Some(_)) => {
                    log::warn!("mqtt protocol violation, closing");
                    return Ok(());
                }
                (Packet::Publish(p), Some(s)) => {
                    let mut s = s.lock().unwrap();
                    if s.owner != generation {
                        // Taken over; the new connection resends this.
                        return Ok(());
                    }
                    let duplicate = p.qos == QoS::AtLeastOnce && p.dup && p.packet_id.is_some_and(|id| s.seen(id));
                    if duplicate {
                        sh.counters.duplicates_dropped.fetch_add(1, Ordering::Relaxed);
                    } else {
                        if !store_publish(sh, &p.topic, &p.payload) {
                            // Not acked, so the client will resend.
                            return Ok(());
                        }
                        if let Some(id) = p.packet_id {
                            s.remember(id);
                        }
                    }
                    drop(s);
                    if let (QoS::AtLeastOnce, Some(id)) = (p.qos, p.packet_id) {
                        stream.write_all(&mqtt::encode(&Packet::Puback { packet_id: id }))?;
                    }
                }
                (Packet::Subscribe(sub), Some(_)) => {
                    let codes = vec![0x80; sub.topics.len()];
                    stream.write_all(&mqtt::encode(&Packet::Suback { packet_id: sub.packet_id, return_codes: codes }))?;
                }
                (Packet::Pingreq, Some(_)) => stream.write_all(&mqtt::encode(&Packet::Pingresp))?,
                (Packet::Disconnect, Some(_)) => return Ok(()),
                (other, Some(_)) => log::debug!("ignoring mqtt packet type {}", other.type_code()),
            }
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

/// False when the store failed and the publish must not be acknowledged.
/// Invalid batches are dropped but acknowledged: a resend cannot fix them.
fn store_publish(sh: &Shared, topic: &str, payload: &[u8]) -> bool {
    let batch = match SampleBatch::from_publish(topic, payload) {
        Ok(b) => b,
        Err(e) => {
            log::warn!("rejected publish on {topic}: {e}");
            sh.counters.rejected.fetch_add(1, Ordering::Relaxed);
            return true;
        }
    };
    match sh.store.append(&batch) {
        Ok(()) => {
            sh.counters.batches_stored.fetch_add(1, Ordering::Relaxed);
            sh.counters.samples_stored.fetch_add(batch.values.len() as u64, Ordering::Relaxed);
            true
        }
        Err(e) => {
            log::error!("raw store append failed: {e}");
            false
        }
    }
}
