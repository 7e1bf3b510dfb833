//! Scenarios shared by the integration tests and the acceptance run. Each
//! returns measurements; callers decide what to assert.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use pipewise::dataset::{default_sim_config, save_model};
use pipewise::ingest::{IngestConfig, IngestService, RetryPolicy};
use pipewise::messaging::{serve, Bus, Endpoint, LocalBroker, RemoteBroker};
use pipewise::monitor::alerts::MemoryAlerts;
use pipewise::monitor::{Controller, WorkerControl};
use pipewise::pipeline::AgentError;
use pipewise::sim::{publish_cycle, PublishOptions, PublishSummary};
use pipewise::stack::{Stack, StackConfig};
use pipewise::storage::Layout;
use pipewise_core::batch::CycleNotification;
use pipewise_core::broker::{dead_letter_queue, BrokerConfig, QueueStats};
use pipewise_core::cycle::CycleStatus;
use pipewise_core::elastic::{ElasticityConfig, MachineInfo, ScalingDecision, UtilizationReport};
use pipewise_core::ml::{Prediction, TrainedModel};
use pipewise_core::segment::Channel;
use pipewise_core::sim::{generate_cycle, ApplianceProfile, FaultMode, GeneratedCycle, SimConfig};
use pipewise_core::topology::{PipelineSpec, StageSpec};

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let t0 = Instant::now();
    while t0.elapsed() < timeout {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    f()
}

// ---------------------------------------------------------------- broker

#[derive(Debug, Default)]
pub struct BrokerOutcome {
    pub published: usize,
    /// Successful acks per message index.
    pub acks: BTreeMap<u32, u32>,
    pub dead_lettered: BTreeSet<u32>,
    /// Acks that the broker refused (already acked or not held).
    pub refused_acks: usize,
    pub killed_holding: usize,
    pub elapsed: Duration,
}

impl BrokerOutcome {
    pub fn lost(&self) -> Vec<u32> {
        (0..self.published as u32).filter(|i| !self.acks.contains_key(i) && !self.dead_lettered.contains(i)).collect()
    }

    pub fn duplicated(&self) -> usize {
        self.acks.values().filter(|&&n| n > 1).count() + self.acks.keys().filter(|i| self.dead_lettered.contains(i)).count()
    }
}

/// Messages whose index is a multiple of this are rejected by every
/// consumer and must end up dead-lettered.
pub const POISON_EVERY: u32 = 997;

/// `n` messages over TCP to three competing consumers; the first consumer's
/// connection is dropped, with deliveries still unacked, once `kill_at`
/// messages have been acked in total.
pub fn competing_consumers(n: u32, kill_at: usize) -> BrokerOutcome {
    let t0 = Instant::now();
    let broker = LocalBroker::new(BrokerConfig::default());
    let server = serve(TcpListener::bind("127.0.0.1:0").unwrap(), broker.clone()).unwrap();
    let addr = server.local_addr();
    let publisher = RemoteBroker::connect(addr).unwrap();
    publisher.declare("q.work").unwrap();
    for i in 0..n {
        publisher.publish("q.work", i.to_be_bytes().to_vec(), BTreeMap::new()).unwrap();
    }

    let acked_total = Arc::new(AtomicUsize::new(0));
    let outcome = Arc::new(Mutex::new(BrokerOutcome { published: n as usize, ..Default::default() }));
    let rejected_total = Arc::new(AtomicUsize::new(0));
    let handles: Vec<_> = (0..3)
        .map(|c| {
            let (acked_total, outcome, rejected_total) = (acked_total.clone(), outcome.clone(), rejected_total.clone());
            thread::spawn(move || {
                let conn = RemoteBroker::connect(addr).unwrap();
                let sub = conn.consume("q.work", 8).unwrap();
                loop {
                    let done = acked_total.load(Ordering::SeqCst) + rejected_total.load(Ordering::SeqCst);
                    if done >= n as usize {
                        return;
                    }
                    if c == 0 && acked_total.load(Ordering::SeqCst) >= kill_at {
                        // Take one more delivery and die holding it.
                        let held = sub.recv_timeout(Duration::from_millis(200)).ok().flatten().is_some() as usize;
                        outcome.lock().unwrap().killed_holding = held;
                        conn.close();
                        return;
                    }
                    let Some(m) = sub.recv_timeout(Duration::from_millis(50)).unwrap() else { continue };
                    let i = u32::from_be_bytes(m.payload[..4].try_into().unwrap());
                    if i % POISON_EVERY == 0 {
                        // Same retry budget as the pipeline workers.
                        let last = m.delivery_count >= 3;
                        if sub.nack(&m.msg_id, !last).is_ok() && last {
                            rejected_total.fetch_add(1, Ordering::SeqCst);
                        }
                        continue;
                    }
                    match sub.ack(&m.msg_id) {
                        Ok(()) => {
                            *outcome.lock().unwrap().acks.entry(i).or_default() += 1;
                            acked_total.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(_) => outcome.lock().unwrap().refused_acks += 1,
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let dlq = dead_letter_queue("q.work");
    let sub = publisher.consume(&dlq, 64).unwrap();
    while let Some(m) = sub.recv_timeout(Duration::from_millis(300)).unwrap() {
        let i = u32::from_be_bytes(m.payload[..4].try_into().unwrap());
        outcome.lock().unwrap().dead_lettered.insert(i);
        sub.ack(&m.msg_id).unwrap();
    }
    server.shutdown();
    let mut out = std::mem::take(&mut *outcome.lock().unwrap());
    out.elapsed = t0.elapsed();
    out
}

/// Single consumer; true when deliveries arrive in publish order.
pub fn fifo_single_consumer(n: u32) -> bool {
    let broker = LocalBroker::new(BrokerConfig::default());
    let server = serve(TcpListener::bind("127.0.0.1:0").unwrap(), broker).unwrap();
    let conn = RemoteBroker::connect(server.local_addr()).unwrap();
    conn.declare("q.fifo").unwrap();
    for i in 0..n {
        conn.publish("q.fifo", i.to_be_bytes().to_vec(), BTreeMap::new()).unwrap();
    }
    let sub = conn.consume("q.fifo", 16).unwrap();
    let mut next = 0u32;
    while next < n {
        let Some(m) = sub.recv_timeout(Duration::from_secs(5)).unwrap() else { return false };
        if u32::from_be_bytes(m.payload[..4].try_into().unwrap()) != next {
            return false;
        }
        sub.ack(&m.msg_id).unwrap();
        next += 1;
    }
    server.shutdown();
    true
}

// ---------------------------------------------------------------- ingest

pub struct IngestOutcome {
    pub expected_current: usize,
    pub stored: BTreeMap<Channel, usize>,
    pub summary: PublishSummary,
    pub duplicates_dropped: u64,
    pub elapsed: Duration,
}

/// One 60 s healthy cycle played over MQTT at `speedup`, with the
/// connection severed after `sever_after` publishes.
pub fn ingest_cycle(root: &Path, speedup: Option<f64>, sever_after: Option<usize>) -> IngestOutcome {
    let broker = LocalBroker::new(BrokerConfig::default());
    let ingest = IngestService::start(IngestConfig {
        raw_root: root.join("raw"),
        mqtt_addr: "127.0.0.1:0".into(),
        http_addr: "127.0.0.1:0".into(),
        broker: Endpoint::Local(broker),
        allow: None,
        retry: RetryPolicy::default(),
    })
    .unwrap();
    let config = SimConfig { seed: 7, ..default_sim_config() };
    let cycle = generate_cycle(&ApplianceProfile::washing_machine(), &FaultMode::NONE, &config, "wm-01", 1_700_000_000_000_000).unwrap();
    let opts = PublishOptions {
        mqtt_addr: ingest.mqtt_addr().to_string(),
        client_id: "sim-wm-01".into(),
        notify_url: None,
        pace: speedup,
        window: 32,
        sever_after,
    };
    let t0 = Instant::now();
    let summary = publish_cycle(&cycle, "wm-01-c1", &opts).unwrap();
    let elapsed = t0.elapsed();
    let stored = Channel::ALL.iter().map(|&c| (c, ingest.store.sample_count("wm-01", c))).collect();
    let duplicates_dropped = ingest.mqtt.counters().duplicates_dropped.load(Ordering::Relaxed);
    ingest.mqtt.shutdown();
    IngestOutcome { expected_current: cycle.current.values.len(), stored, summary, duplicates_dropped, elapsed }
}

// -------------------------------------------------------------- pipeline

/// A local stack with `model` deployed before any worker starts.
pub fn start_stack(root: &Path, model: &TrainedModel) -> Stack {
    let cfg = StackConfig::local(root);
    save_model(model, &Layout::new(root.join("store")).model_path()).unwrap();
    Stack::start(cfg).unwrap()
}

pub struct FlowOutcome {
    pub status: Option<CycleStatus>,
    /// From the notification POST to the terminal manifest status.
    pub latency: Duration,
    pub prediction: Option<Prediction>,
}

/// Publishes `cycle` over MQTT, then notifies and waits for a terminal
/// status.
pub fn run_cycle(stack: &Stack, cycle: &GeneratedCycle, cycle_id: &str, timeout: Duration) -> FlowOutcome {
    let opts = PublishOptions {
        mqtt_addr: stack.mqtt_addr().to_string(),
        client_id: format!("sim-{cycle_id}"),
        notify_url: None,
        pace: None,
        window: 32,
        sever_after: None,
    };
    publish_cycle(cycle, cycle_id, &opts).unwrap();
    let n = CycleNotification { device_id: cycle.power.device_id.clone(), start_us: cycle.start_us, end_us: cycle.end_us, cycle_id: cycle_id.into() };
    let t0 = Instant::now();
    ureq::post(&format!("{}/notify", stack.ingest_url())).send_json(&n).unwrap();
    let status = || stack.layout.load_manifest(cycle_id).ok().map(|r| r.status);
    wait_until(timeout, || status().is_some_and(|s| s.is_terminal()));
    let latency = t0.elapsed();
    let prediction = std::fs::read(stack.layout.prediction_path(cycle_id)).ok().and_then(|b| serde_json::from_slice(&b).ok());
    FlowOutcome { status: status(), latency, prediction }
}

// ------------------------------------------------------------ elasticity

/// Hands out sequential worker ids and never fails.
#[derive(Default)]
pub struct FakeCluster {
    next: AtomicUsize,
    pub stopped: Mutex<Vec<String>>,
}

impl WorkerControl for FakeCluster {
    fn spawn(&self, _stage: &str, machine_id: &str) -> Result<String, AgentError> {
        Ok(format!("{machine_id}-w{:04}", self.next.fetch_add(1, Ordering::SeqCst)))
    }

    fn stop(&self, worker_id: &str, _machine_id: &str, _graceful: bool) -> Result<(), AgentError> {
        self.stopped.lock().unwrap().push(worker_id.into());
        Ok(())
    }
}

pub struct ElasticTrace {
    pub config: ElasticityConfig,
    /// (time µs, worker count) after every control round.
    pub counts: Vec<(i64, u32)>,
    pub decisions: Vec<ScalingDecision>,
    /// First instant the backlog exceeded `backlog_high`.
    pub backlog_start_us: Option<i64>,
    /// Queue empty and no message in service.
    pub drained_us: Option<i64>,
}

impl ElasticTrace {
    pub fn first_time_at(&self, count: u32, after_us: i64) -> Option<i64> {
        self.counts.iter().find(|(t, c)| *t >= after_us && *c == count).map(|(t, _)| *t)
    }
}

/// A burst of `burst` messages lands on the clean queue at t = 0; each
/// worker needs `service_ms` per message. Time advances in 1 ms steps, the
/// controller runs once per probe period with per-worker busy fractions
/// from the last period. Everything is integer microseconds.
pub fn simulate_burst(burst: u64, service_ms: i64, config: ElasticityConfig, horizon_s: i64) -> ElasticTrace {
    let spec = PipelineSpec { pipeline_name: "burst".into(), stages: vec![StageSpec::new("clean", "q.clean", None, "pdm.clean").with_workers(1, 4)] };
    let machines = vec![
        MachineInfo { machine_id: "m1".into(), active: true, capacity: 4 },
        MachineInfo { machine_id: "m2".into(), active: true, capacity: 4 },
    ];
    let mut ctl = Controller::new(
        &spec,
        machines,
        config.clone(),
        Arc::new(FakeCluster::default()),
        Arc::new(MemoryAlerts::default()),
        None,
    );
    let tick = 1_000i64;
    let probe = (config.probe_period_s * 1e6) as i64;
    let service = service_ms * 1000;

    // worker id -> (busy until, busy µs in the current probe window)
    let mut workers: BTreeMap<String, (i64, i64)> = BTreeMap::new();
    let mut depth = burst;
    // The queue was empty before the burst.
    let mut depth_history: Vec<(i64, u64)> = vec![(i64::MIN, 0)];
    let mut trace = ElasticTrace { config: config.clone(), counts: Vec::new(), decisions: Vec::new(), backlog_start_us: None, drained_us: None };

    let mut decisions = ctl.ensure_minimum(0);
    let mut now = 0i64;
    while now <= horizon_s * 1_000_000 {
        if now % probe == 0 {
            for (w, (_, busy)) in workers.iter_mut() {
                let machine = ctl.state().placements.iter().find(|p| &p.worker_id == w).unwrap().machine_id.clone();
                ctl.ingest_report(UtilizationReport {
                    machine_id: machine,
                    worker_id: Some(w.clone()),
                    stage_name: Some("clean".into()),
                    cpu_fraction: *busy as f64 / probe as f64,
                    rss_bytes: 0,
                    window_s: config.probe_period_s,
                    sampled_at: now,
                });
                *busy = 0;
            }
            for m in ["m1", "m2"] {
                let load = ctl.state().machine_load(m) as f64;
                ctl.ingest_report(UtilizationReport {
                    machine_id: m.into(),
                    worker_id: None,
                    stage_name: None,
                    cpu_fraction: load / 4.0,
                    rss_bytes: 0,
                    window_s: config.probe_period_s,
                    sampled_at: now,
                });
            }
            depth_history.push((now, depth));
            let before = depth_history.iter().rev().find(|(t, _)| *t <= now - probe).map_or(0, |(_, d)| *d);
            let stats = QueueStats { depth, depth_delta: depth as i64 - before as i64, ..QueueStats::empty("q.clean") };
            decisions.extend(ctl.round(&[stats], now));
            trace.counts.push((now, ctl.state().worker_count("clean")));
        }

        // Sync the worker set with the controller. Deactivation needs an
        // empty queue, so a stopped worker has nothing left to hand back.
        let placed: BTreeSet<String> = ctl.state().placements.iter().map(|p| p.worker_id.clone()).collect();
        workers.retain(|w, _| placed.contains(w));
        for w in placed {
            workers.entry(w).or_insert((now, 0));
        }
        trace.decisions.append(&mut decisions);

        if trace.backlog_start_us.is_none() && depth > config.backlog_high {
            trace.backlog_start_us = Some(now);
        }
        for (busy_until, busy) in workers.values_mut() {
            if *busy_until <= now && depth > 0 {
                depth -= 1;
                *busy_until = now + service;
            }
            if *busy_until > now {
                *busy += tick;
            }
        }
        if trace.drained_us.is_none() && depth == 0 && workers.values().all(|(b, _)| *b <= now) {
            trace.drained_us = Some(now);
        }
        now += tick;
    }
    trace.decisions.append(&mut decisions);
    trace
}

/// Fixed `decide()` inputs covering each branch; their serialized outputs
/// are pinned in `tests/golden/decide.json`.
pub fn decide_golden() -> String {
    use pipewise_core::elastic::{decide, ControllerState, Placement, StageLimits};
    let now = 1_000_000_000i64;
    let stage = |min, max| StageLimits { stage_name: "clean".into(), input_queue: "q.clean".into(), min_workers: min, max_workers: max };
    let machines = vec![
        MachineInfo { machine_id: "m1".into(), active: true, capacity: 2 },
        MachineInfo { machine_id: "m2".into(), active: true, capacity: 2 },
        MachineInfo { machine_id: "m3".into(), active: false, capacity: 8 },
    ];
    let placed = |ids: &[(&str, &str)]| -> Vec<Placement> {
        ids.iter().map(|(w, m)| Placement { worker_id: (*w).into(), stage_name: "clean".into(), machine_id: (*m).into() }).collect()
    };
    let report = |m: &str, w: Option<&str>, cpu: f64, age_s: i64| UtilizationReport {
        machine_id: m.into(),
        worker_id: w.map(String::from),
        stage_name: w.map(|_| "clean".into()),
        cpu_fraction: cpu,
        rss_bytes: 1 << 20,
        window_s: 5.0,
        sampled_at: now - age_s * 1_000_000,
    };
    let stats = |depth: u64, delta: i64| vec![QueueStats { depth, depth_delta: delta, ..QueueStats::empty("q.clean") }];
    let base = |placements, last: Option<i64>| ControllerState {
        stages: vec![stage(1, 4)],
        machines: machines.clone(),
        placements,
        last_decision_us: last.map(|t| BTreeMap::from([("clean".to_string(), t)])).unwrap_or_default(),
    };
    let cfg = ElasticityConfig::default();
    let one = placed(&[("w-a", "m1")]);
    let two = placed(&[("w-a", "m1"), ("w-b", "m2")]);
    let full = placed(&[("w-a", "m1"), ("w-b", "m1"), ("w-c", "m2"), ("w-d", "m2")]);
    let cases: Vec<(&str, Vec<UtilizationReport>, Vec<QueueStats>, ControllerState)> = vec![
        ("hot-worker", vec![report("m1", Some("w-a"), 0.95, 1), report("m1", None, 0.7, 1), report("m2", None, 0.1, 1)], stats(0, 0), base(one.clone(), None)),
        ("growing-backlog", vec![report("m1", Some("w-a"), 0.5, 1)], stats(250, 30), base(one.clone(), None)),
        ("shrinking-backlog", vec![report("m1", Some("w-a"), 0.5, 1)], stats(250, -30), base(one.clone(), None)),
        ("cooldown", vec![report("m1", Some("w-a"), 0.99, 1)], stats(900, 90), base(one.clone(), Some(now - 10_000_000))),
        ("at-max", vec![report("m1", Some("w-a"), 0.99, 1)], stats(900, 90), base(full.clone(), None)),
        ("idle-pair", vec![report("m1", Some("w-a"), 0.05, 1), report("m2", Some("w-b"), 0.01, 1), report("m1", None, 0.3, 1), report("m2", None, 0.6, 1)], stats(0, 0), base(two.clone(), None)),
        ("idle-but-queued", vec![report("m1", Some("w-a"), 0.05, 1), report("m2", Some("w-b"), 0.01, 1)], stats(3, 0), base(two.clone(), None)),
        ("idle-at-min", vec![report("m1", Some("w-a"), 0.0, 1)], stats(0, 0), base(one.clone(), None)),
        ("stale-hot-report", vec![report("m1", Some("w-a"), 0.99, 60)], stats(0, 0), base(one, None)),
        ("idle-tie", vec![report("m1", Some("w-a"), 0.05, 1), report("m2", Some("w-b"), 0.05, 1)], stats(0, 0), base(two, None)),
    ];
    let out: Vec<serde_json::Value> = cases
        .into_iter()
        .map(|(name, reports, st, state)| serde_json::json!({ "case": name, "decisions": decide(&reports, &st, &state, &cfg, now) }))
        .collect();
    serde_json::to_string_pretty(&out).unwrap() + "\n"
}

/// Compares `actual` with the golden file, or rewrites it when
/// `UPDATE_GOLDEN` is set.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{} differs from the current output", path.display()))
    }
}
