//! The consume → handle → publish → ack loop, for in-process (thread) and
//! subprocess workers.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Child, Command};
use std::sync::atomic::{AtomicI32, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use pipewise_core::broker::Message;
use pipewise_core::topology::{StageSpec, WorkerDescriptor, WorkerKind, WorkerState};

use super::Handler;
use crate::messaging::{Bus, BusError, Subscription};
use crate::monitor::alerts::{AlertRecord, AlertSink, Severity};

/// Deliveries per message before it is dead-lettered.
pub const MAX_ATTEMPTS: u32 = 3;

const RUN: u8 = 0;
const DRAIN: u8 = 1;
const ABORT: u8 = 2;
const POLL: Duration = Duration::from_millis(50);

/// State shared between a worker thread and its handle.
pub(crate) struct Shared {
    desc: Mutex<WorkerDescriptor>,
    stop: AtomicU8,
    /// Kernel thread id of an in-process worker, for CPU probes.
    tid: AtomicI32,
    processed: AtomicU64,
    failed: AtomicU64,
}

impl Shared {
    fn set_state(&self, next: WorkerState) {
        let mut d = self.desc.lock().unwrap();
        if d.state.can_transition_to(next) {
            d.state = next;
        }
    }
}

enum Runner {
    Thread { thread: Option<JoinHandle<()>>, sub: Arc<dyn Subscription> },
    Process { child: Child },
}

/// A live worker. Dropping the handle without stopping leaves a thread
/// worker running detached.
pub struct WorkerHandle {
    shared: Arc<Shared>,
    runner: Runner,
}

/// Everything the loop needs apart from the subscription.
pub struct LoopContext {
    pub stage: StageSpec,
    pub bus: Arc<dyn Bus>,
    pub handler: Arc<dyn Handler>,
    pub alerts: Arc<dyn AlertSink>,
}

impl WorkerHandle {
    pub fn spawn_thread(desc: WorkerDescriptor, ctx: LoopContext) -> Result<Self, BusError> {
        let shared = Arc::new(Shared {
            desc: Mutex::new(WorkerDescriptor { kind: WorkerKind::InProcess, state: WorkerState::Starting, ..desc }),
            stop: AtomicU8::new(RUN),
            tid: AtomicI32::new(0),
            processed: AtomicU64::new(0),
            failed: AtomicU64::new(0),
        });
        let sub = ctx.bus.consume(&ctx.stage.input_queue, ctx.stage.prefetch)?;
        shared.set_state(WorkerState::Running);
        let (sh, s) = (shared.clone(), sub.clone());
        let name = shared.desc.lock().unwrap().worker_id.clone();
        let thread = thread::Builder::new()
            .name(name)
            .spawn(move || {
                sh.tid.store(current_tid(), Ordering::Release);
                run_loop(&ctx, &*s, &sh);
            })
            .map_err(|e| BusError::Unreachable(format!("cannot spawn worker thread: {e}")))?;
        Ok(Self { shared, runner: Runner::Thread { thread: Some(thread), sub } })
    }

    pub fn spawn_process(desc: WorkerDescriptor, mut command: Command) -> std::io::Result<Self> {
        let child = command.spawn()?;
        let shared = Arc::new(Shared {
            desc: Mutex::new(WorkerDescriptor { kind: WorkerKind::Subprocess, state: WorkerState::Running, ..desc }),
            stop: AtomicU8::new(RUN),
            tid: AtomicI32::new(0),
            processed: AtomicU64::new(0),
            failed: AtomicU64::new(0),
        });
        Ok(Self { shared, runner: Runner::Process { child } })
    }

    pub fn descriptor(&self) -> WorkerDescriptor {
        let mut d = self.shared.desc.lock().unwrap().clone();
        if let Runner::Process { .. } = &self.runner {
            // Refreshed by `poll_exit`; a stale Running is corrected there.
            d.kind = WorkerKind::Subprocess;
        }
        d
    }

    pub fn worker_id(&self) -> String {
        self.shared.desc.lock().unwrap().worker_id.clone()
    }

    pub fn stage_name(&self) -> String {
        self.shared.desc.lock().unwrap().stage_name.clone()
    }

    pub fn processed(&self) -> u64 {
        self.shared.processed.load(Ordering::Relaxed)
    }

    pub fn failures(&self) -> u64 {
        self.shared.failed.load(Ordering::Relaxed)
    }

    /// What a CPU probe should read: `(pid, Some(tid))` for a thread worker,
    /// `(pid, None)` for a subprocess.
    pub fn probe_target(&self) -> Option<(u32, Option<i32>)> {
        match &self.runner {
            Runner::Thread { .. } => {
                let tid = self.shared.tid.load(Ordering::Acquire);
                (tid > 0).then(|| (std::process::id(), Some(tid)))
            }
            Runner::Process { child } => Some((child.id(), None)),
        }
    }

    pub fn is_live(&mut self) -> bool {
        self.poll_exit();
        self.shared.desc.lock().unwrap().state.is_live()
    }

    /// Notices a subprocess that exited on its own.
    fn poll_exit(&mut self) {
        if let Runner::Process { child } = &mut self.runner {
            if let Ok(Some(status)) = child.try_wait() {
                let stopping = self.shared.stop.load(Ordering::Acquire) != RUN;
                self.shared.set_state(if stopping || status.success() { WorkerState::Draining } else { WorkerState::Failed });
                self.shared.set_state(WorkerState::Stopped);
            }
        }
    }

    /// Graceful: finish and ack the message in hand, then stop. Otherwise the
    /// consumer is cancelled at once and the broker redelivers whatever the
    /// worker held; a handler still running is left to finish, and its
    /// result is discarded.
    pub fn stop(&mut self, graceful: bool) {
        self.shared.stop.store(if graceful { DRAIN } else { ABORT }, Ordering::Release);
        self.shared.set_state(WorkerState::Draining);
        match &mut self.runner {
            Runner::Thread { thread, sub } => {
                if graceful {
                    if let Some(t) = thread.take() {
                        let _ = t.join();
                    }
                } else {
                    sub.cancel();
                    thread.take();
                }
                sub.cancel();
            }
            Runner::Process { child } => {
                if graceful {
                    terminate(child);
                } else {
                    let _ = child.kill();
                }
                let _ = child.wait();
            }
        }
        self.shared.set_state(WorkerState::Stopped);
    }
}

#[cfg(target_os = "linux")]
fn current_tid() -> i32 {
    // SAFETY: gettid has no preconditions.
    unsafe { libc::gettid() }
}

#[cfg(not(target_os = "linux"))]
fn current_tid() -> i32 {
    0
}

fn terminate(child: &mut Child) {
    // SAFETY: plain kill(2) on a pid we own.
    let rc = unsafe { libc::kill(child.id() as libc::pid_t, libc::SIGTERM) };
    if rc != 0 {
        let _ = child.kill();
    }
}

/// Runs the stage loop on the calling thread until stopped or the
/// subscription closes. Used directly by subprocess workers.
pub fn run_stage_loop(ctx: &LoopContext, sub: &dyn Subscription, stop: &dyn Fn() -> bool) {
    let shared = Shared {
        desc: Mutex::new(WorkerDescriptor {
            worker_id: sub.consumer_id().into(),
            stage_name: ctx.stage.stage_name.clone(),
            machine_id: String::new(),
            state: WorkerState::Running,
            kind: WorkerKind::Subprocess,
        }),
        stop: AtomicU8::new(RUN),
        tid: AtomicI32::new(0),
        processed: AtomicU64::new(0),
        failed: AtomicU64::new(0),
    };
    loop_with(ctx, sub, &shared, stop);
}

fn run_loop(ctx: &LoopContext, sub: &dyn Subscription, sh: &Shared) {
    loop_with(ctx, sub, sh, &|| false);
}

fn loop_with(ctx: &LoopContext, sub: &dyn Subscription, sh: &Shared, external_stop: &dyn Fn() -> bool) {
    let (worker_id, machine_id) = {
        let d = sh.desc.lock().unwrap();
        (d.worker_id.clone(), d.machine_id.clone())
    };
    loop {
        if external_stop() && sh.stop.load(Ordering::Acquire) == RUN {
            sh.stop.store(DRAIN, Ordering::Release);
        }
        if sh.stop.load(Ordering::Acquire) != RUN {
            break;
        }
        let message = match sub.recv_timeout(POLL) {
            Ok(Some(m)) => m,
            Ok(None) => continue,
            Err(_) => {
                if sh.stop.load(Ordering::Acquire) == RUN {
                    sh.set_state(WorkerState::Failed);
                    ctx.alerts.record(
                        AlertRecord::new(&machine_id, Severity::Fatal, "worker lost its broker subscription")
                            .worker(&worker_id, &ctx.stage.stage_name),
                    );
                }
                return;
            }
        };
        process(ctx, sub, sh, &message, &worker_id, &machine_id);
    }
    sub.cancel();
}

fn process(ctx: &LoopContext, sub: &dyn Subscription, sh: &Shared, m: &Message, worker_id: &str, machine_id: &str) {
    let result = match catch_unwind(AssertUnwindSafe(|| ctx.handler.handle(m))) {
        Ok(r) => r,
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "handler panicked".into());
            Err(anyhow::anyhow!("handler panicked: {what}"))
        }
    };
    if sh.stop.load(Ordering::Acquire) == ABORT {
        // The broker already took this message back.
        return;
    }
    match result {
        Ok(output) => {
            if let (Some(queue), Some(payload)) = (&ctx.stage.output_queue, output) {
                if let Err(e) = ctx.bus.publish(queue, payload, m.headers.clone()) {
                    log::warn!("{worker_id}: publish to {queue} failed: {e}");
                    let _ = sub.nack(&m.msg_id, true);
                    return;
                }
            }
            if let Err(e) = sub.ack(&m.msg_id) {
                log::warn!("{worker_id}: ack failed: {e}");
            }
            sh.processed.fetch_add(1, Ordering::Relaxed);
        }
        Err(e) => {
            sh.failed.fetch_add(1, Ordering::Relaxed);
            if m.delivery_count < MAX_ATTEMPTS {
                log::warn!("{worker_id}: attempt {} of {} failed: {e:#}", m.delivery_count, m.msg_id);
                let _ = sub.nack(&m.msg_id, true);
            } else {
                let _ = sub.nack(&m.msg_id, false);
                ctx.handler.dead_lettered(m, &e);
                ctx.alerts.record(
                    AlertRecord::new(machine_id, Severity::Error, format!("message dead-lettered: {e:#}"))
                        .worker(worker_id, &ctx.stage.stage_name)
                        .with("msg_id", &m.msg_id)
                        .with("queue", &m.queue)
                        .with("attempts", m.delivery_count),
                );
            }
        }
    }
}
