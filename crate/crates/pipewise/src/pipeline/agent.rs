//! Per-machine node agent: starts and stops workers on request and exposes
//! that over a small TCP control protocol.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use pipewise_core::topology::{MachineDescriptor, PipelineSpec, WorkerDescriptor, WorkerKind, WorkerState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::worker::{LoopContext, WorkerHandle};
use super::Registry;
use crate::messaging::{BusError, Endpoint};
use crate::monitor::alerts::AlertSink;
use crate::wire::{read_json, write_json};

pub const DEFAULT_AGENT_PORT: u16 = 7622;
const CALL_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("stage `{stage}` already runs {max} workers here")]
    AtMaxWorkers { stage: String, max: u32 },
    #[error("machine `{0}` is not active")]
    MachineUnavailable(String),
    #[error("unknown worker `{0}`")]
    UnknownWorker(String),
    #[error("no handler registered for `{0}`")]
    NoHandler(String),
    #[error("subprocess workers are not configured on this agent")]
    NoSubprocess,
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// An error reported by a remote agent.
    #[error("agent: {0}")]
    Remote(String),
}

/// How to launch a subprocess worker: `program args.. --stage S
/// --worker-id W --machine M`.
#[derive(Debug, Clone)]
pub struct SubprocessTemplate {
    pub program: PathBuf,
    pub args: Vec<String>,
}

struct Inner {
    machine: MachineDescriptor,
    workers: BTreeMap<String, WorkerHandle>,
    next: u32,
}

pub struct NodeAgent {
    inner: Mutex<Inner>,
    spec: PipelineSpec,
    registry: Registry,
    endpoint: Endpoint,
    alerts: Arc<dyn AlertSink>,
    template: Option<SubprocessTemplate>,
}

impl NodeAgent {
    pub fn new(
        machine: MachineDescriptor,
        spec: PipelineSpec,
        registry: Registry,
        endpoint: Endpoint,
        alerts: Arc<dyn AlertSink>,
        template: Option<SubprocessTemplate>,
    ) -> Self {
        Self { inner: Mutex::new(Inner { machine, workers: BTreeMap::new(), next: 1 }), spec, registry, endpoint, alerts, template }
    }

    pub fn machine(&self) -> MachineDescriptor {
        self.inner.lock().unwrap().machine.clone()
    }

    pub fn set_active(&self, active: bool) {
        self.inner.lock().unwrap().machine.active = active;
    }

    pub fn spawn_worker(&self, stage_name: &str, kind: WorkerKind) -> Result<WorkerDescriptor, AgentError> {
        let stage = self.spec.stage(stage_name).ok_or_else(|| AgentError::UnknownStage(stage_name.into()))?.clone();
        let mut inner = self.inner.lock().unwrap();
        if !inner.machine.active {
            return Err(AgentError::MachineUnavailable(inner.machine.machine_id.clone()));
        }
        let live = inner.workers.values_mut().filter(|w| w.stage_name() == stage_name).filter_map(|w| w.is_live().then_some(())).count();
        if live as u32 >= stage.max_workers {
            return Err(AgentError::AtMaxWorkers { stage: stage_name.into(), max: stage.max_workers });
        }
        let worker_id = format!("{}-w{:04}", inner.machine.machine_id, inner.next);
        let desc = WorkerDescriptor {
            worker_id: worker_id.clone(),
            stage_name: stage_name.into(),
            machine_id: inner.machine.machine_id.clone(),
            state: WorkerState::Starting,
            kind,
        };
        let handle = match kind {
            WorkerKind::InProcess => {
                let handler = self.registry.get(&stage.handler_kind).ok_or_else(|| AgentError::NoHandler(stage.handler_kind.clone()))?;
                let bus = self.endpoint.connect()?;
                WorkerHandle::spawn_thread(desc, LoopContext { stage, bus, handler, alerts: self.alerts.clone() })?
            }
            WorkerKind::Subprocess => {
                let t = self.template.as_ref().ok_or(AgentError::NoSubprocess)?;
                let mut cmd = Command::new(&t.program);
                cmd.args(&t.args)
                    .args(["--stage", stage_name, "--worker-id", &worker_id, "--machine", &inner.machine.machine_id])
                    .stdin(Stdio::null());
                WorkerHandle::spawn_process(desc, cmd)?
            }
        };
        inner.next += 1;
        let out = handle.descriptor();
        inner.workers.insert(worker_id, handle);
        Ok(out)
    }

    /// Stops and forgets a worker. See [`WorkerHandle::stop`] for what
    /// `graceful` means for in-flight messages.
    pub fn stop_worker(&self, worker_id: &str, graceful: bool) -> Result<WorkerDescriptor, AgentError> {
        let mut handle = self.inner.lock().unwrap().workers.remove(worker_id).ok_or_else(|| AgentError::UnknownWorker(worker_id.into()))?;
        // A graceful stop may wait on a handler; don't hold the lock for it.
        handle.stop(graceful);
        Ok(handle.descriptor())
    }

    pub fn list(&self) -> Vec<WorkerDescriptor> {
        let mut inner = self.inner.lock().unwrap();
        inner.workers.values_mut().map(|w| {
            w.is_live();
            w.descriptor()
        }).collect()
    }

    /// Live workers with the OS ids a probe should sample.
    pub fn probe_targets(&self) -> Vec<(WorkerDescriptor, u32, Option<i32>)> {
        let mut inner = self.inner.lock().unwrap();
        inner
            .workers
            .values_mut()
            .filter_map(|w| {
                if !w.is_live() {
                    return None;
                }
                let (pid, tid) = w.probe_target()?;
                Some((w.descriptor(), pid, tid))
            })
            .collect()
    }

    /// Stops every worker.
    pub fn shutdown(&self, graceful: bool) {
        let workers: Vec<WorkerHandle> = std::mem::take(&mut self.inner.lock().unwrap().workers).into_values().collect();
        for mut w in workers {
            w.stop(graceful);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum AgentRequest {
    Spawn { stage_name: String, kind: WorkerKind },
    Stop { worker_id: String, graceful: bool },
    List,
    Machine,
    SetActive { active: bool },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "kebab-case")]
pub enum AgentResponse {
    Worker { worker: WorkerDescriptor },
    Workers { workers: Vec<WorkerDescriptor> },
    Machine { machine: MachineDescriptor },
    Ok,
    Error { reason: String },
}

fn execute(agent: &NodeAgent, req: AgentRequest) -> AgentResponse {
    let r = match req {
        AgentRequest::Spawn { stage_name, kind } => agent.spawn_worker(&stage_name, kind).map(|worker| AgentResponse::Worker { worker }),
        AgentRequest::Stop { worker_id, graceful } => agent.stop_worker(&worker_id, graceful).map(|worker| AgentResponse::Worker { worker }),
        AgentRequest::List => Ok(AgentResponse::Workers { workers: agent.list() }),
        AgentRequest::Machine => Ok(AgentResponse::Machine { machine: agent.machine() }),
        AgentRequest::SetActive { active } => {
            agent.set_active(active);
            Ok(AgentResponse::Ok)
        }
    };
    r.unwrap_or_else(|e| AgentResponse::Error { reason: e.to_string() })
}

pub struct AgentServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
}

impl AgentServer {
    pub fn start(listener: TcpListener, agent: Arc<NodeAgent>) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let (stop2, conns2) = (stop.clone(), conns.clone());
        thread::Builder::new().name("agent-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if stop2.load(Ordering::Acquire) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Ok(c) = stream.try_clone() {
                    conns2.lock().unwrap().push(c);
                }
                let agent = agent.clone();
                thread::spawn(move || {
                    let Ok(w) = stream.try_clone() else { return };
                    let (mut r, mut w) = (BufReader::new(stream), BufWriter::new(w));
                    while let Ok(Some(req)) = read_json::<AgentRequest>(&mut r) {
                        if write_json(&mut w, &execute(&agent, req)).is_err() {
                            break;
                        }
                    }
                });
            }
        })?;
        Ok(Self { addr, stop, conns })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Release);
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
    }
}

impl Drop for AgentServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Blocking client for a remote [`AgentServer`].
pub struct AgentClient {
    conn: Mutex<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
}

impl AgentClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, AgentError> {
        let s = TcpStream::connect(addr)?;
        s.set_read_timeout(Some(CALL_TIMEOUT))?;
        let w = s.try_clone()?;
        Ok(Self { conn: Mutex::new((BufReader::new(s), BufWriter::new(w))) })
    }

    pub fn call(&self, req: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let mut c = self.conn.lock().unwrap();
        write_json(&mut c.1, req)?;
        match read_json::<AgentResponse>(&mut c.0)? {
            Some(AgentResponse::Error { reason }) => Err(AgentError::Remote(reason)),
            Some(r) => Ok(r),
            None => Err(AgentError::Remote("connection closed".into())),
        }
    }

    pub fn spawn(&self, stage_name: &str, kind: WorkerKind) -> Result<WorkerDescriptor, AgentError> {
        match self.call(&AgentRequest::Spawn { stage_name: stage_name.into(), kind })? {
            AgentResponse::Worker { worker } => Ok(worker),
            other => Err(unexpected(other)),
        }
    }

    pub fn stop(&self, worker_id: &str, graceful: bool) -> Result<WorkerDescriptor, AgentError> {
        match self.call(&AgentRequest::Stop { worker_id: worker_id.into(), graceful })? {
            AgentResponse::Worker { worker } => Ok(worker),
            other => Err(unexpected(other)),
        }
    }

    pub fn list(&self) -> Result<Vec<WorkerDescriptor>, AgentError> {
        match self.call(&AgentRequest::List)? {
            AgentResponse::Workers { workers } => Ok(workers),
            other => Err(unexpected(other)),
        }
    }

    pub fn machine(&self) -> Result<MachineDescriptor, AgentError> {
        match self.call(&AgentRequest::Machine)? {
            AgentResponse::Machine { machine } => Ok(machine),
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(r: AgentResponse) -> AgentError {
    AgentError::Remote(format!("unexpected reply {r:?}"))
}
