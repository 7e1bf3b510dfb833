//! Sensor-side simulator: a small MQTT 3.1.1 QoS 1 client that plays a
//! generated cycle into the ingest service and then posts the cycle
//! notification.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use pipewise_core::batch::{CycleNotification, SampleBatch};
use pipewise_core::mqtt::{self, Connect, ConnectReturnCode, Packet, Publish, QoS};
use pipewise_core::segment::{implicit_timestamp, StreamSegment};
use pipewise_core::sim::GeneratedCycle;

const ACK_TIMEOUT: Duration = Duration::from_secs(10);

/// Blocking MQTT client with a bounded window of unacknowledged publishes.
pub struct MqttClient {
    addr: String,
    client_id: String,
    stream: TcpStream,
    buf: Vec<u8>,
    next_id: u16,
    unacked: BTreeMap<u16, Publish>,
    pub reconnects: usize,
    pub resent: usize,
}

impl MqttClient {
    /// Connects with a persistent session, so the broker keeps dedup state
    /// across reconnects.
    pub fn connect(addr: &str, client_id: &str) -> anyhow::Result<Self> {
        let stream = open(addr, client_id)?;
        Ok(Self {
            addr: addr.into(),
            client_id: client_id.into(),
            stream,
            buf: Vec::new(),
            next_id: 0,
            unacked: BTreeMap::new(),
            reconnects: 0,
            resent: 0,
        })
    }

    fn next_packet_id(&mut self) -> u16 {
        loop {
            self.next_id = self.next_id.wrapping_add(1);
            if self.next_id != 0 && !self.unacked.contains_key(&self.next_id) {
                return self.next_id;
            }
        }
    }

    /// Sends one QoS 1 publish, first waiting until fewer than `window`
    /// are outstanding.
    pub fn publish(&mut self, topic: &str, payload: Vec<u8>, window: usize) -> anyhow::Result<()> {
        while self.unacked.len() >= window.max(1) {
            self.read_one()?;
        }
        let id = self.next_packet_id();
        let p = Publish { dup: false, qos: QoS::AtLeastOnce, retain: false, topic: topic.into(), packet_id: Some(id), payload };
        self.stream.write_all(&mqtt::encode(&Packet::Publish(p.clone())))?;
        self.unacked.insert(id, p);
        Ok(())
    }

    /// Waits for every outstanding acknowledgement.
    pub fn flush(&mut self) -> anyhow::Result<()> {
        while !self.unacked.is_empty() {
            self.read_one()?;
        }
        Ok(())
    }

    pub fn outstanding(&self) -> usize {
        self.unacked.len()
    }

    fn read_one(&mut self) -> anyhow::Result<()> {
        let deadline = Instant::now() + ACK_TIMEOUT;
        loop {
            if let Some((packet, used)) = mqtt::decode(&self.buf)? {
                self.buf.drain(..used);
                match packet {
                    Packet::Puback { packet_id } => {
                        self.unacked.remove(&packet_id);
                    }
                    Packet::Pingresp => {}
                    Packet::Disconnect => bail!("server closed the session"),
                    other => bail!("unexpected packet type {}", other.type_code()),
                }
                return Ok(());
            }
            if Instant::now() > deadline {
                bail!("no acknowledgement within {ACK_TIMEOUT:?}");
            }
            let mut chunk = [0u8; 4096];
            match self.stream.read(&mut chunk) {
                Ok(0) => bail!("connection closed"),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Drops the socket without DISCONNECT, as a network failure would.
    pub fn sever(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    /// Opens a new connection on the same session and resends everything
    /// unacknowledged with the DUP flag.
    pub fn reconnect(&mut self) -> anyhow::Result<()> {
        self.sever();
        self.stream = open(&self.addr, &self.client_id)?;
        self.buf.clear();
        self.reconnects += 1;
        for p in self.unacked.values_mut() {
            p.dup = true;
            self.stream.write_all(&mqtt::encode(&Packet::Publish(p.clone())))?;
            self.resent += 1;
        }
        Ok(())
    }

    pub fn disconnect(mut self) -> anyhow::Result<()> {
        self.flush()?;
        self.stream.write_all(&mqtt::encode(&Packet::Disconnect))?;
        let _ = self.stream.shutdown(Shutdown::Both);
        Ok(())
    }
}

fn open(addr: &str, client_id: &str) -> anyhow::Result<TcpStream> {
    let mut stream = TcpStream::connect(addr).with_context(|| format!("cannot reach MQTT at {addr}"))?;
    stream.set_read_timeout(Some(Duration::from_millis(500)))?;
    stream.set_nodelay(true)?;
    let c = Connect { client_id: client_id.into(), clean_session: false, keep_alive: 60, will: None, username: None, password: None };
    stream.write_all(&mqtt::encode(&Packet::Connect(c)))?;
    let mut buf = Vec::new();
    let deadline = Instant::now() + ACK_TIMEOUT;
    loop {
        if let Some((packet, _)) = mqtt::decode(&buf)? {
            return match packet {
                Packet::Connack { code: ConnectReturnCode::Accepted, .. } => Ok(stream),
                Packet::Connack { code, .. } => Err(anyhow!("connection refused: {code:?}")),
                other => Err(anyhow!("expected CONNACK, got packet type {}", other.type_code())),
            };
        }
        if Instant::now() > deadline {
            bail!("no CONNACK from {addr}");
        }
        let mut chunk = [0u8; 64];
        match stream.read(&mut chunk) {
            Ok(0) => bail!("connection closed during handshake"),
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
    }
}

/// One-second batches, ordered by start time across channels.
pub fn cycle_batches(cycle: &GeneratedCycle) -> Vec<SampleBatch> {
    let mut out = Vec::new();
    // Slow samples carry their own timestamps; each becomes a batch.
    for (i, &v) in cycle.power.values.iter().enumerate() {
        out.push(SampleBatch {
            device_id: cycle.power.device_id.clone(),
            channel: cycle.power.channel,
            stream_kind: cycle.power.stream_kind,
            start_us: cycle.power.timestamp(i),
            rate_hz: 1,
            values: vec![v],
        });
    }
    for seg in [&cycle.current, &cycle.vibration] {
        out.extend(fast_batches(seg));
    }
    out.sort_by_key(|b| (b.start_us, b.channel));
    out
}

fn fast_batches(seg: &StreamSegment) -> Vec<SampleBatch> {
    let n = seg.rate_hz as usize;
    seg.values
        .chunks(n)
        .enumerate()
        .map(|(k, chunk)| SampleBatch {
            device_id: seg.device_id.clone(),
            channel: seg.channel,
            stream_kind: seg.stream_kind,
            start_us: implicit_timestamp(seg.start_us, seg.rate_hz, k * n),
            rate_hz: seg.rate_hz,
            values: chunk.to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PublishOptions {
    pub mqtt_addr: String,
    pub client_id: String,
    /// Base URL of the ingest HTTP API; no notification when absent.
    pub notify_url: Option<String>,
    /// Sleep between batches to play at `speedup` times real time.
    pub pace: Option<f64>,
    pub window: usize,
    /// Sever and resume the connection after this many publishes.
    pub sever_after: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct PublishSummary {
    pub batches: usize,
    pub samples: usize,
    pub reconnects: usize,
    pub resent: usize,
    pub notified: Option<String>,
}

pub fn publish_cycle(cycle: &GeneratedCycle, cycle_id: &str, opts: &PublishOptions) -> anyhow::Result<PublishSummary> {
    let mut client = MqttClient::connect(&opts.mqtt_addr, &opts.client_id)?;
    let batches = cycle_batches(cycle);
    let mut summary = PublishSummary { batches: batches.len(), ..Default::default() };
    let t0 = Instant::now();
    for (i, b) in batches.iter().enumerate() {
        if let Some(speedup) = opts.pace {
            let due = Duration::from_secs_f64(((b.start_us - cycle.start_us) as f64 / 1e6 / speedup).max(0.0));
            if let Some(wait) = due.checked_sub(t0.elapsed()) {
                thread::sleep(wait);
            }
        }
        summary.samples += b.values.len();
        let sent = client.publish(&b.topic(), b.payload(), opts.window);
        if let Err(e) = sent {
            log::warn!("publish failed ({e:#}); reconnecting");
            client.reconnect()?;
            client.publish(&b.topic(), b.payload(), opts.window)?;
        }
        if opts.sever_after == Some(i + 1) {
            client.sever();
            client.reconnect()?;
        }
    }
    client.flush()?;
    summary.reconnects = client.reconnects;
    summary.resent = client.resent;
    client.disconnect()?;

    if let Some(url) = &opts.notify_url {
        let device_id = cycle.power.device_id.clone();
        let n = CycleNotification { device_id, start_us: cycle.start_us, end_us: cycle.end_us, cycle_id: cycle_id.into() };
        let resp: serde_json::Value = ureq::post(&format!("{}/notify", url.trim_end_matches('/')))
            .send_json(&n)
            .map_err(|e| anyhow!("notify failed: {e}"))?
            .into_json()?;
        summary.notified = resp.get("msg_id").and_then(|v| v.as_str()).map(String::from);
    }
    Ok(summary)
}
