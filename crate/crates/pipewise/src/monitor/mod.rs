//! Utilization probes, alerts and the elasticity controller.
//!
//! Each node agent runs a [`ProbeLoop`] that publishes
//! [`UtilizationReport`]s to `q.monitor`; a single [`ControllerLoop`]
//! consumes them and scales stages.

pub mod alerts;
pub mod controller;
pub mod probe;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use pipewise_core::elastic::UtilizationReport;

use crate::clock::now_us;
use crate::messaging::{publish_json, Bus};
use crate::pipeline::NodeAgent;
use alerts::{AlertRecord, AlertSink, Severity};
pub use controller::{ClusterSnapshot, Controller, LocalCluster, RemoteCluster, WorkerControl};
pub use probe::Probe;

pub const MONITOR_QUEUE: &str = "q.monitor";

/// A background thread that stops when dropped.
pub struct Periodic {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Periodic {
    fn spawn(name: &str, period: Duration, mut tick: impl FnMut() + Send + 'static) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let s = stop.clone();
        let thread = thread::Builder::new()
            .name(name.into())
            .spawn(move || {
                let mut next = Instant::now();
                while !s.load(Ordering::Acquire) {
                    if Instant::now() >= next {
                        tick();
                        next += period;
                    }
                    thread::sleep(Duration::from_millis(20).min(period));
                }
            })
            .expect("spawn periodic thread");
        Self { stop, thread: Some(thread) }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Periodic {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Samples an agent's workers every `period` and publishes the reports.
pub fn start_probe_loop(agent: Arc<NodeAgent>, bus: Arc<dyn Bus>, alerts: Arc<dyn AlertSink>, period: Duration) -> Periodic {
    let machine_id = agent.machine().machine_id;
    let mut probe = Probe::new(&machine_id);
    if let Err(e) = bus.declare(MONITOR_QUEUE) {
        log::warn!("cannot declare {MONITOR_QUEUE}: {e}");
    }
    Periodic::spawn("probe", period, move || {
        let (reports, errors) = probe.sample(&agent.probe_targets(), now_us());
        for e in errors {
            alerts.record(AlertRecord::new(&machine_id, Severity::Warn, format!("probe failed: {e}")));
        }
        for r in &reports {
            if let Err(e) = publish_json(&*bus, MONITOR_QUEUE, r) {
                alerts.record(AlertRecord::new(&machine_id, Severity::Warn, format!("cannot publish utilization: {e}")));
                break;
            }
        }
    })
}

/// Drains `q.monitor` into the controller and runs a round every probe
/// period.
pub fn start_controller_loop(controller: Arc<Mutex<Controller>>, bus: Arc<dyn Bus>) -> anyhow::Result<Periodic> {
    bus.declare(MONITOR_QUEUE)?;
    for q in controller.lock().unwrap().input_queues() {
        bus.declare(&q)?;
    }
    let sub = bus.consume(MONITOR_QUEUE, 1024)?;
    controller.lock().unwrap().ensure_minimum(now_us());
    let period = Duration::from_secs_f64(controller.lock().unwrap().config().probe_period_s);
    Ok(Periodic::spawn("controller", period, move || {
        let mut c = controller.lock().unwrap();
        while let Ok(Some(m)) = sub.recv_timeout(Duration::ZERO) {
            match serde_json::from_slice::<UtilizationReport>(&m.payload) {
                Ok(r) => c.ingest_report(r),
                Err(e) => log::warn!("dropping malformed utilization report: {e}"),
            }
            let _ = sub.ack(&m.msg_id);
        }
        let stats: Vec<_> = c.input_queues().iter().filter_map(|q| bus.stats(q).ok()).collect();
        c.round(&stats, now_us());
    }))
}
