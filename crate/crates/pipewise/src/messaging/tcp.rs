//! Broker over TCP: [`serve`] exposes a [`LocalBroker`], [`RemoteBroker`]
//! is the matching client.
//!
//! Every request frame gets exactly one `ok` or `error` reply, in order.
//! `deliver` frames for the connection's consumers are interleaved with the
//! replies. When a connection drops, all of its consumers are cancelled and
//! their unacknowledged messages redelivered.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use pipewise_core::broker::{Message, QueueStats};
use pipewise_core::frame::{Frame, Op};

use super::{Bus, BusError, Headers, LocalBroker, Subscription};
use crate::wire::{read_json, write_json};

const REPLY_TIMEOUT: Duration = Duration::from_secs(30);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);
const POLL: Duration = Duration::from_millis(100);

pub struct BrokerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
}

impl BrokerServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and drops every open connection.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Release);
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
    }

    /// Drops the open connections but keeps accepting new ones.
    pub fn kill_connections(&self) {
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Accepts connections on `listener` in a background thread.
pub fn serve(listener: TcpListener, broker: LocalBroker) -> std::io::Result<BrokerServer> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
    let (stop2, conns2) = (stop.clone(), conns.clone());
    thread::Builder::new().name("broker-accept".into()).spawn(move || {
        for stream in listener.incoming() {
            if stop2.load(Ordering::Acquire) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let _ = stream.set_nodelay(true);
            if let Ok(c) = stream.try_clone() {
                let mut all = conns2.lock().unwrap();
                all.retain(|s| s.peer_addr().is_ok());
                all.push(c);
            }
            let broker = broker.clone();
            thread::spawn(move || {
                if let Err(e) = handle_connection(stream, broker) {
                    log::debug!("broker connection ended: {e}");
                }
            });
        }
    })?;
    Ok(BrokerServer { addr, stop, conns })
}

type SharedWriter = Arc<Mutex<BufWriter<TcpStream>>>;

fn send(w: &SharedWriter, frame: &Frame) -> std::io::Result<()> {
    let mut w = w.lock().unwrap_or_else(|p| p.into_inner());
    write_json(&mut *w, frame)
}

fn handle_connection(stream: TcpStream, broker: LocalBroker) -> std::io::Result<()> {
    let writer: SharedWriter = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let mut reader = BufReader::new(stream);
    let mut subs: HashMap<String, Arc<super::LocalSubscription>> = HashMap::new();
    let result = (|| -> std::io::Result<()> {
        while let Some(frame) = read_json::<Frame>(&mut reader)? {
            match execute(&frame, &broker, &mut subs, &writer) {
                Ok(Some(reply)) => send(&writer, &reply)?,
                Ok(None) => {}
                Err(e) => send(&writer, &Frame::error(e.to_string()))?,
            }
        }
        Ok(())
    })();
    for s in subs.values() {
        s.cancel();
    }
    if let Err(e) = &result {
        if e.kind() == std::io::ErrorKind::InvalidData {
            let _ = send(&writer, &Frame::error(e.to_string()));
        }
    }
    result
}

fn field<'a>(v: &'a Option<String>, name: &str) -> Result<&'a str, BusError> {
    v.as_deref().ok_or_else(|| BusError::Protocol(format!("missing `{name}`")))
}

fn execute(
    frame: &Frame,
    broker: &LocalBroker,
    subs: &mut HashMap<String, Arc<super::LocalSubscription>>,
    writer: &SharedWriter,
) -> Result<Option<Frame>, BusError> {
    let ok = Frame::new(Op::Ok);
    let reply = match frame.op {
        Op::Declare => {
            let stats = broker.declare(field(&frame.queue, "queue")?)?;
            Frame { queue: Some(stats.queue.clone()), stats: Some(stats), ..ok }
        }
        Op::Publish => {
            let payload = frame.payload().map_err(|e| BusError::Protocol(e.to_string()))?;
            let id = broker.publish(field(&frame.queue, "queue")?, payload, frame.headers.clone().unwrap_or_default())?;
            Frame { msg_id: Some(id), ..ok }
        }
        Op::Consume => {
            let queue = field(&frame.queue, "queue")?;
            let sub = Arc::new(broker.subscribe(queue, frame.prefetch.unwrap_or(1))?);
            let id = sub.consumer_id().to_string();
            subs.insert(id.clone(), sub.clone());
            // The reply goes out before the forwarder can write a delivery.
            send(writer, &Frame { consumer_id: Some(id.clone()), queue: Some(queue.into()), ..ok.clone() })
                .map_err(|e| BusError::Unreachable(e.to_string()))?;
            let w = writer.clone();
            thread::spawn(move || loop {
                match sub.recv_timeout(POLL) {
                    Ok(Some(m)) => {
                        if send(&w, &Frame::deliver(&id, &m)).is_err() {
                            sub.cancel();
                            return;
                        }
                    }
                    Ok(None) => {}
                    Err(_) => return,
                }
            });
            return Ok(None);
        }
        Op::Cancel => {
            if let Some(s) = subs.remove(field(&frame.consumer_id, "consumer_id")?) {
                s.cancel();
            }
            ok
        }
        Op::Ack | Op::Nack => {
            let cid = field(&frame.consumer_id, "consumer_id")?;
            let msg = field(&frame.msg_id, "msg_id")?;
            let sub = subs.get(cid).ok_or_else(|| BusError::Rejected(format!("unknown consumer `{cid}`")))?;
            if frame.op == Op::Ack {
                sub.ack(msg)?;
            } else {
                sub.nack(msg, frame.requeue.unwrap_or(true))?;
            }
            ok
        }
        Op::Stats => {
            let stats = broker.stats(field(&frame.queue, "queue")?)?;
            Frame { queue: Some(stats.queue.clone()), stats: Some(stats), ..ok }
        }
        Op::Deliver | Op::Ok | Op::Error => return Err(BusError::Protocol(format!("unexpected op {:?}", frame.op))),
    };
    Ok(Some(reply))
}

struct Conn {
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    replies: Mutex<Receiver<Frame>>,
    call_lock: Mutex<()>,
    routes: Mutex<Routes>,
    closed: AtomicBool,
}

#[derive(Default)]
struct Routes {
    subs: HashMap<String, Sender<Message>>,
    /// Deliveries that arrived before their consumer was registered here.
    pending: HashMap<String, Vec<Message>>,
}

impl Conn {
    fn call(&self, frame: Frame) -> Result<Frame, BusError> {
        let _guard = self.call_lock.lock().unwrap_or_else(|p| p.into_inner());
        if self.closed.load(Ordering::Acquire) {
            return Err(BusError::Unreachable("connection closed".into()));
        }
        {
            let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
            write_json(&mut *w, &frame).map_err(|e| BusError::Unreachable(e.to_string()))?;
        }
        let reply = self
            .replies
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .recv_timeout(REPLY_TIMEOUT)
            .map_err(|_| BusError::Unreachable("no reply from broker".into()))?;
        match reply.op {
            Op::Ok => Ok(reply),
            Op::Error => Err(BusError::Rejected(reply.reason.unwrap_or_default())),
            other => Err(BusError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

/// Client for a broker served by [`serve`]. Clones share one connection.
#[derive(Clone)]
pub struct RemoteBroker {
    conn: Arc<Conn>,
}

impl RemoteBroker {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, BusError> {
        let unreachable = |e: std::io::Error| BusError::Unreachable(e.to_string());
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(unreachable)?.collect();
        let mut last = None;
        let mut stream = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        let stream = stream.ok_or_else(|| {
            last.map(unreachable).unwrap_or_else(|| BusError::Unreachable("no address".into()))
        })?;
        let _ = stream.set_nodelay(true);
        let (tx, rx) = mpsc::channel();
        let conn = Arc::new(Conn {
            writer: Mutex::new(BufWriter::new(stream.try_clone().map_err(unreachable)?)),
            stream: stream.try_clone().map_err(unreachable)?,
            replies: Mutex::new(rx),
            call_lock: Mutex::new(()),
            routes: Mutex::default(),
            closed: AtomicBool::new(false),
        });
        let reader = BufReader::new(stream);
        let weak = Arc::downgrade(&conn);
        thread::Builder::new()
            .name("broker-client".into())
            .spawn(move || read_loop(reader, tx, weak))
            .map_err(unreachable)?;
        Ok(Self { conn })
    }

    /// Closes the socket; the broker then redelivers everything this client
    /// held.
    pub fn close(&self) {
        let _ = self.conn.stream.shutdown(Shutdown::Both);
    }
}

fn read_loop(mut reader: BufReader<TcpStream>, replies: Sender<Frame>, conn: std::sync::Weak<Conn>) {
    loop {
        let frame = match read_json::<Frame>(&mut reader) {
            Ok(Some(f)) => f,
            _ => break,
        };
        let Some(conn) = conn.upgrade() else { break };
        if frame.op == Op::Deliver {
            let (Some(cid), Ok(msg)) = (frame.consumer_id.clone(), frame.to_message()) else { continue };
            let mut routes = conn.routes.lock().unwrap_or_else(|p| p.into_inner());
            match routes.subs.get(&cid) {
                Some(tx) => {
                    let _ = tx.send(msg);
                }
                None => routes.pending.entry(cid).or_default().push(msg),
            }
        } else if replies.send(frame).is_err() {
            break;
        }
    }
    if let Some(conn) = conn.upgrade() {
        conn.closed.store(true, Ordering::Release);
        let mut routes = conn.routes.lock().unwrap_or_else(|p| p.into_inner());
        routes.subs.clear();
        routes.pending.clear();
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

fn stats_of(reply: Frame) -> Result<QueueStats, BusError> {
    reply.stats.ok_or_else(|| BusError::Protocol("reply lacks stats".into()))
}

impl Bus for RemoteBroker {
    fn declare(&self, queue: &str) -> Result<QueueStats, BusError> {
        stats_of(self.conn.call(Frame { queue: Some(queue.into()), ..Frame::new(Op::Declare) })?)
    }

    fn publish(&self, queue: &str, payload: Vec<u8>, headers: Headers) -> Result<String, BusError> {
        let msg = Message { msg_id: String::new(), queue: queue.into(), headers, payload, delivery_count: 0 };
        let mut frame = Frame::from_message(Op::Publish, &msg);
        frame.msg_id = None;
        frame.delivery_count = None;
        let reply = self.conn.call(frame)?;
        reply.msg_id.ok_or_else(|| BusError::Protocol("reply lacks msg_id".into()))
    }

    fn consume(&self, queue: &str, prefetch: u32) -> Result<Arc<dyn Subscription>, BusError> {
        let reply = self.conn.call(Frame { queue: Some(queue.into()), prefetch: Some(prefetch), ..Frame::new(Op::Consume) })?;
        let id = reply.consumer_id.ok_or_else(|| BusError::Protocol("reply lacks consumer_id".into()))?;
        let (tx, rx) = mpsc::channel();
        {
            let mut routes = self.conn.routes.lock().unwrap_or_else(|p| p.into_inner());
            for m in routes.pending.remove(&id).unwrap_or_default() {
                let _ = tx.send(m);
            }
            if !self.conn.closed.load(Ordering::Acquire) {
                routes.subs.insert(id.clone(), tx);
            }
        }
        Ok(Arc::new(RemoteSubscription {
            conn: self.conn.clone(),
            consumer_id: id,
            rx: Mutex::new(rx),
            cancelled: AtomicBool::new(false),
        }))
    }

    fn stats(&self, queue: &str) -> Result<QueueStats, BusError> {
        stats_of(self.conn.call(Frame { queue: Some(queue.into()), ..Frame::new(Op::Stats) })?)
    }
}

pub struct RemoteSubscription {
    conn: Arc<Conn>,
    consumer_id: String,
    rx: Mutex<Receiver<Message>>,
    cancelled: AtomicBool,
}

impl Subscription for RemoteSubscription {
    fn consumer_id(&self) -> &str {
        &self.consumer_id
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Message>, BusError> {
        if self.cancelled.load(Ordering::Acquire) {
            return Err(BusError::Closed);
        }
        let rx = self.rx.lock().unwrap_or_else(|p| p.into_inner());
        match rx.recv_timeout(timeout) {
            Ok(_) if self.cancelled.load(Ordering::Acquire) => Err(BusError::Closed),
            Ok(m) => Ok(Some(m)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Closed),
        }
    }

    fn ack(&self, msg_id: &str) -> Result<(), BusError> {
        self.conn
            .call(Frame {
                consumer_id: Some(self.consumer_id.clone()),
                msg_id: Some(msg_id.into()),
                ..Frame::new(Op::Ack)
            })
            .map(|_| ())
    }

    fn nack(&self, msg_id: &str, requeue: bool) -> Result<(), BusError> {
        self.conn
            .call(Frame {
                consumer_id: Some(self.consumer_id.clone()),
                msg_id: Some(msg_id.into()),
                requeue: Some(requeue),
                ..Frame::new(Op::Nack)
            })
            .map(|_| ())
    }

    fn cancel(&self) {
        if self.cancelled.swap(true, Ordering::AcqRel) {
            return;
        }
        self.conn.routes.lock().unwrap_or_else(|p| p.into_inner()).subs.remove(&self.consumer_id);
        let _ = self.conn.call(Frame { consumer_id: Some(self.consumer_id.clone()), ..Frame::new(Op::Cancel) });
    }
}

impl Drop for RemoteSubscription {
    fn drop(&mut self) {
        self.cancel();
    }
}
