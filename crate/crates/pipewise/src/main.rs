use std::collections::{BTreeMap, HashSet};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pipewise_core::broker::BrokerConfig;
use pipewise_core::elastic::{ElasticityConfig, MachineInfo};
use pipewise_core::ml::{ModelKind, ModelParams};
use pipewise_core::rng::XorShift64Star;
use pipewise_core::sim::{generate_cycle, ApplianceProfile, FaultMode, SimConfig};
use pipewise_core::topology::{MachineDescriptor, PipelineSpec, WorkerKind};

use pipewise::api::{self, plot_export, ApiConfig};
use pipewise::clock::now_us;
use pipewise::dataset::{cross_validate_on, default_sim_config, make_dataset, read_dataset, save_model, train_on, write_dataset};
use pipewise::ingest::{IngestConfig, IngestService, RetryPolicy};
use pipewise::messaging::{serve, Endpoint, LocalBroker, DEFAULT_PORT};
use pipewise::monitor::alerts::AlertLog;
use pipewise::monitor::{start_controller_loop, start_probe_loop, Controller, RemoteCluster};
use pipewise::pdm::{registry, HttpRawSource, PdmContext};
use pipewise::pipeline::{load_pipeline, run_stage_loop, AgentClient, AgentServer, LoopContext, NodeAgent, SubprocessTemplate};
use pipewise::sim::{publish_cycle, PublishOptions};
use pipewise::stack::{Stack, StackConfig};
use pipewise::storage::Layout;

#[derive(Parser)]
#[command(name = "pipewise", version, about = "Elastic IoT collection and analytics pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the message broker.
    Broker(BrokerArgs),
    /// Run the MQTT collector and raw-data HTTP API.
    Ingest(IngestArgs),
    /// Run a node agent that hosts workers on this machine.
    Agent(AgentArgs),
    /// Run one worker in the foreground (used by subprocess agents).
    Worker(WorkerArgs),
    /// Run the elasticity controller.
    Controller(ControllerArgs),
    /// Run the read-only HTTP API.
    Api(ApiArgs),
    /// Run everything in one process.
    Up(UpArgs),
    /// Play simulated appliance cycles into the ingest service.
    Simulate(SimulateArgs),
    /// Write decimated plot data of one cycle channel as CSV.
    PlotExport(PlotArgs),
    /// Train a classifier on a dataset directory.
    Train(TrainArgs),
    /// Cross-validate a classifier on a dataset directory.
    Cv(CvArgs),
}

#[derive(Args)]
struct BrokerArgs {
    #[arg(long, default_value_t = format!("0.0.0.0:{DEFAULT_PORT}"))]
    listen: String,
    /// Persist queues to this directory.
    #[arg(long)]
    journal: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_deliveries: u32,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, default_value = "data/raw")]
    raw_root: PathBuf,
    #[arg(long, default_value = "0.0.0.0:1883")]
    mqtt: String,
    #[arg(long, default_value = "0.0.0.0:8090")]
    http: String,
    #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
    broker: String,
    /// Comma-separated MQTT client ids allowed to connect.
    #[arg(long, value_delimiter = ',')]
    allow: Option<Vec<String>>,
}

#[derive(Args, Clone)]
struct StageEnv {
    #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
    broker: String,
    /// Storage root for cycle artifacts.
    #[arg(long, default_value = "data/store")]
    root: PathBuf,
    #[arg(long, default_value = "http://127.0.0.1:8090")]
    ingest_url: String,
    /// Pipeline spec JSON; the built-in four-stage pipeline when absent.
    #[arg(long)]
    pipeline: Option<PathBuf>,
}

#[derive(Args)]
struct AgentArgs {
    #[command(flatten)]
    env: StageEnv,
    #[arg(long)]
    machine: String,
    #[arg(long, default_value_t = format!("0.0.0.0:{}", pipewise::pipeline::DEFAULT_AGENT_PORT))]
    control: String,
    /// Worker slots; defaults to the core count.
    #[arg(long)]
    cores: Option<u32>,
    /// Run workers as child processes instead of threads.
    #[arg(long)]
    subprocess: bool,
    #[arg(long, default_value_t = 5.0)]
    probe_period_s: f64,
    #[arg(long, default_value = "data/logs")]
    log_dir: PathBuf,
}

#[derive(Args)]
struct WorkerArgs {
    #[command(flatten)]
    env: StageEnv,
    #[arg(long)]
    stage: String,
    #[arg(long)]
    worker_id: String,
    #[arg(long)]
    machine: String,
    #[arg(long, default_value = "data/logs")]
    log_dir: PathBuf,
}

#[derive(Args)]
struct ControllerArgs {
    #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
    broker: String,
    /// `machine_id=host:port` of each agent.
    #[arg(long = "agent", required = true)]
    agents: Vec<String>,
    /// Elasticity settings as JSON; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "data/cluster")]
    state_dir: PathBuf,
    #[arg(long, default_value = "data/logs")]
    log_dir: PathBuf,
    #[arg(long)]
    pipeline: Option<PathBuf>,
    #[arg(long)]
    subprocess: bool,
}

#[derive(Args)]
struct ApiArgs {
    #[arg(long, default_value_t = format!("0.0.0.0:{}", api::DEFAULT_API_PORT))]
    listen: String,
    #[arg(long, default_value = "data/store")]
    root: PathBuf,
    #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
    broker: String,
    #[arg(long, default_value = "data/cluster")]
    state_dir: PathBuf,
}

#[derive(Args)]
struct UpArgs {
    #[arg(long, default_value = "data")]
    root: PathBuf,
    #[arg(long, default_value_t = format!("0.0.0.0:{DEFAULT_PORT}"))]
    broker: String,
    #[arg(long, default_value = "0.0.0.0:1883")]
    mqtt: String,
    #[arg(long, default_value = "0.0.0.0:8090")]
    ingest: String,
    #[arg(long, default_value_t = format!("0.0.0.0:{}", api::DEFAULT_API_PORT))]
    api: String,
    #[arg(long, default_value_t = 1)]
    machines: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct SimulateArgs {
    #[command(subcommand)]
    dataset: Option<SimulateCmd>,
    #[arg(long, default_value_t = 1)]
    devices: usize,
    #[arg(long, default_value_t = 1)]
    cycles_per_device: usize,
    /// Relative weights `normal:bearing:heating`.
    #[arg(long, default_value = "1:1:1")]
    fault_mix: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 60.0)]
    speedup: f64,
    /// Phase duration multiplier; 1 plays the full 47-minute program.
    #[arg(long, default_value_t = 60.0 / 2820.0)]
    duration_scale: f64,
    #[arg(long, default_value_t = 2048)]
    fast_rate_hz: u32,
    /// MQTT endpoint.
    #[arg(long, default_value = "127.0.0.1:1883")]
    endpoint: String,
    /// Ingest HTTP base URL for cycle notifications.
    #[arg(long, default_value = "http://127.0.0.1:8090")]
    notify_url: String,
}

#[derive(Subcommand)]
enum SimulateCmd {
    /// Generate a labeled feature dataset offline.
    Dataset {
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, default_value = "data/store")]
    root: PathBuf,
    #[arg(long)]
    cycle: String,
    #[arg(long)]
    channel: String,
    #[arg(long, default_value_t = 2000)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    match s {
        "dt" => Ok(ModelKind::Dt),
        "rf" => Ok(ModelKind::Rf),
        "svm" => Ok(ModelKind::Svm),
        _ => Err(format!("unknown model `{s}` (dt, rf or svm)")),
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `simulate dataset`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "rf")]
    model: ModelKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data/store/models/model.json")]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "rf")]
    model: ModelKind,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Broker(a) => run_broker(a),
        Cmd::Ingest(a) => run_ingest(a),
        Cmd::Agent(a) => run_agent(a),
        Cmd::Worker(a) => run_worker(a),
        Cmd::Controller(a) => run_controller(a),
        Cmd::Api(a) => run_api(a),
        Cmd::Up(a) => run_up(a),
        Cmd::Simulate(a) => run_simulate(a),
        Cmd::PlotExport(a) => {
            let s = plot_export(&Layout::new(a.root), &a.cycle, &a.channel, a.points, &a.out)?;
            println!("wrote {} points to {}", s.points.len(), a.out.display());
            Ok(())
        }
        Cmd::Train(a) => {
            let ds = read_dataset(&a.data)?;
            let model = train_on(&ds, &ModelParams::default_for(a.model).with_seed(a.seed))?;
            save_model(&model, &a.out)?;
            println!("trained {} on {} rows -> {}", a.model.as_str(), ds.len(), a.out.display());
            Ok(())
        }
        Cmd::Cv(a) => {
            let ds = read_dataset(&a.data)?;
            let report = cross_validate_on(&ds, &ModelParams::default_for(a.model), a.folds, a.seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

static TERMINATE: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    TERMINATE.store(true, Ordering::Release);
}

fn install_signal_handlers() {
    // SAFETY: the handler only stores to an atomic, which is
    // async-signal-safe.
    unsafe {
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
    }
}

fn wait_for_signal() {
    install_signal_handlers();
    while !TERMINATE.load(Ordering::Acquire) {
        thread::sleep(Duration::from_millis(100));
    }
    log::info!("shutting down");
}

fn read_elasticity(path: Option<&Path>) -> anyhow::Result<ElasticityConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?).with_context(|| format!("bad config {}", p.display()))?,
        None => ElasticityConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pipeline_spec(path: Option<&Path>) -> anyhow::Result<PipelineSpec> {
    path.map_or_else(|| Ok(PipelineSpec::pdm()), load_pipeline)
}

fn run_broker(a: BrokerArgs) -> anyhow::Result<()> {
    let config = BrokerConfig { max_deliveries: a.max_deliveries, ..BrokerConfig::default() };
    let broker = match &a.journal {
        Some(dir) => LocalBroker::with_journal(config, dir)?,
        None => LocalBroker::new(config),
    };
    let server = serve(TcpListener::bind(&a.listen)?, broker)?;
    log::info!("broker listening on {}", server.local_addr());
    wait_for_signal();
    server.shutdown();
    Ok(())
}

fn run_ingest(a: IngestArgs) -> anyhow::Result<()> {
    let svc = IngestService::start(IngestConfig {
        raw_root: a.raw_root,
        mqtt_addr: a.mqtt,
        http_addr: a.http,
        broker: Endpoint::Remote(a.broker),
        allow: a.allow.map(|v| v.into_iter().collect::<HashSet<_>>()),
        retry: RetryPolicy::default(),
    })?;
    log::info!("mqtt on {}, http on {}", svc.mqtt_addr(), svc.http_addr());
    wait_for_signal();
    svc.mqtt.shutdown();
    Ok(())
}

fn stage_context(env: &StageEnv) -> Arc<PdmContext> {
    Arc::new(PdmContext::new(Layout::new(&env.root), Arc::new(HttpRawSource::new(&env.ingest_url))))
}

fn run_agent(a: AgentArgs) -> anyhow::Result<()> {
    let spec = pipeline_spec(a.env.pipeline.as_deref())?;
    let reg = registry(stage_context(&a.env));
    let endpoint = Endpoint::Remote(a.env.broker.clone());
    let bus = endpoint.connect()?;
    pipewise::pipeline::register_pipeline(&spec, &reg, &*bus, None)?;
    let alerts = Arc::new(AlertLog::new(&a.log_dir, Some(bus.clone())));
    let cores = a.cores.unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get() as u32));
    let template = if a.subprocess {
        let mut args = vec!["worker".into(), "--broker".into(), a.env.broker.clone(), "--root".into()];
        args.push(a.env.root.to_string_lossy().into_owned());
        args.extend(["--ingest-url".into(), a.env.ingest_url.clone(), "--log-dir".into(), a.log_dir.to_string_lossy().into_owned()]);
        if let Some(p) = &a.env.pipeline {
            args.extend(["--pipeline".into(), p.to_string_lossy().into_owned()]);
        }
        Some(SubprocessTemplate { program: std::env::current_exe()?, args })
    } else {
        None
    };
    let listener = TcpListener::bind(&a.control)?;
    let machine = MachineDescriptor { machine_id: a.machine.clone(), address: listener.local_addr()?.to_string(), core_count: cores, active: true };
    let agent = Arc::new(NodeAgent::new(machine, spec, reg, endpoint, alerts.clone(), template));
    let server = AgentServer::start(listener, agent.clone())?;
    let _probe = start_probe_loop(agent.clone(), bus, alerts, Duration::from_secs_f64(a.probe_period_s));
    log::info!("agent {} listening on {}", a.machine, server.local_addr());
    wait_for_signal();
    server.shutdown();
    agent.shutdown(true);
    Ok(())
}

fn run_worker(a: WorkerArgs) -> anyhow::Result<()> {
    install_signal_handlers();
    let spec = pipeline_spec(a.env.pipeline.as_deref())?;
    let stage = spec.stage(&a.stage).with_context(|| format!("unknown stage `{}`", a.stage))?.clone();
    let reg = registry(stage_context(&a.env));
    let handler = reg.get(&stage.handler_kind).with_context(|| format!("no handler `{}`", stage.handler_kind))?;
    let bus = Endpoint::Remote(a.env.broker.clone()).connect()?;
    let alerts = Arc::new(AlertLog::new(&a.log_dir, Some(bus.clone())));
    let sub = bus.consume(&stage.input_queue, stage.prefetch)?;
    log::info!("worker {} on {} consuming {}", a.worker_id, a.machine, stage.input_queue);
    let ctx = LoopContext { stage, bus, handler, alerts };
    run_stage_loop(&ctx, &*sub, &|| TERMINATE.load(Ordering::Acquire));
    Ok(())
}

fn run_controller(a: ControllerArgs) -> anyhow::Result<()> {
    let spec = pipeline_spec(a.pipeline.as_deref())?;
    let config = read_elasticity(a.config.as_deref())?;
    let bus = Endpoint::Remote(a.broker).connect()?;
    let mut clients = BTreeMap::new();
    let mut machines = Vec::new();
    for spec_str in &a.agents {
        let (id, addr) = spec_str.split_once('=').with_context(|| format!("expected machine=host:port, got `{spec_str}`"))?;
        let client = AgentClient::connect(addr).with_context(|| format!("cannot reach agent {id} at {addr}"))?;
        let m = client.machine()?;
        if m.machine_id != id {
            bail!("agent at {addr} reports machine `{}`, expected `{id}`", m.machine_id);
        }
        machines.push(MachineInfo { machine_id: id.into(), active: m.active, capacity: m.core_count });
        clients.insert(id.to_string(), client);
    }
    let kind = if a.subprocess { WorkerKind::Subprocess } else { WorkerKind::InProcess };
    let alerts = Arc::new(AlertLog::new(&a.log_dir, Some(bus.clone())));
    let controller = Controller::new(&spec, machines, config, Arc::new(RemoteCluster { agents: clients, kind }), alerts, Some(&a.state_dir));
    let _loop = start_controller_loop(Arc::new(Mutex::new(controller)), bus)?;
    wait_for_signal();
    Ok(())
}

fn run_api(a: ApiArgs) -> anyhow::Result<()> {
    let svc = api::serve(
        &a.listen,
        ApiConfig { layout: Layout::new(a.root), broker: Endpoint::Remote(a.broker), cluster_dir: a.state_dir, pipeline: PipelineSpec::pdm() },
    )?;
    log::info!("api listening on {}", svc.local_addr());
    wait_for_signal();
    Ok(())
}

fn run_up(a: UpArgs) -> anyhow::Result<()> {
    let cfg = StackConfig {
        broker_addr: a.broker,
        mqtt_addr: a.mqtt,
        ingest_addr: a.ingest,
        api_addr: a.api,
        machines: a.machines,
        elasticity: read_elasticity(a.config.as_deref())?,
        journal: true,
        ..StackConfig::local(a.root)
    };
    let stack = Stack::start(cfg)?;
    log::info!(
        "up: broker {}, mqtt {}, ingest {}, api {}",
        stack.broker_server.local_addr(),
        stack.mqtt_addr(),
        stack.ingest_url(),
        stack.api_url()
    );
    wait_for_signal();
    stack.shutdown();
    Ok(())
}

fn parse_mix(s: &str) -> anyhow::Result<[f64; 3]> {
    let parts: Vec<f64> = s.split(':').map(|p| p.parse::<f64>()).collect::<Result<_, _>>().context("fault mix must be three numbers")?;
    let [a, b, c] = parts[..] else { bail!("fault mix must be normal:bearing:heating") };
    if [a, b, c].iter().any(|w| !(*w >= 0.0)) || a + b + c <= 0.0 {
        bail!("fault mix weights must be non-negative with a positive sum");
    }
    Ok([a, b, c])
}

fn run_simulate(a: SimulateArgs) -> anyhow::Result<()> {
    if let Some(SimulateCmd::Dataset { n_per_class, seed, out }) = a.dataset {
        let started = std::time::Instant::now();
        let ds = make_dataset(n_per_class, seed, &default_sim_config())?;
        write_dataset(&ds, &out)?;
        println!("{} cycles written to {} in {:.1?}", ds.len(), out.display(), started.elapsed());
        return Ok(());
    }
    let mix = parse_mix(&a.fault_mix)?;
    let config = SimConfig { seed: a.seed, fast_rate_hz: a.fast_rate_hz, duration_scale: a.duration_scale, speedup: a.speedup };
    config.validate()?;
    let handles: Vec<_> = (0..a.devices)
        .map(|d| {
            let (config, endpoint, notify_url) = (config.clone(), a.endpoint.clone(), a.notify_url.clone());
            let cycles = a.cycles_per_device;
            thread::spawn(move || -> anyhow::Result<()> {
                let device_id = format!("wm-{:02}", d + 1);
                let mut rng = XorShift64Star::new(config.seed ^ (d as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut start_us = now_us();
                for _ in 0..cycles {
                    let pick = rng.next_f64() * mix.iter().sum::<f64>();
                    let severity = rng.uniform(0.3, 1.0);
                    let fault = if pick < mix[0] {
                        FaultMode::NONE
                    } else if pick < mix[0] + mix[1] {
                        FaultMode::bearing(severity)
                    } else {
                        FaultMode::heating(severity)
                    };
                    let cfg = SimConfig { seed: rng.next_u64(), ..config.clone() };
                    let cycle = generate_cycle(&ApplianceProfile::washing_machine(), &fault, &cfg, &device_id, start_us)?;
                    let cycle_id = format!("{device_id}-{start_us}");
                    let opts = PublishOptions {
                        mqtt_addr: endpoint.clone(),
                        client_id: format!("sim-{device_id}"),
                        notify_url: Some(notify_url.clone()),
                        pace: Some(config.speedup),
                        window: 32,
                        sever_after: None,
                    };
                    let s = publish_cycle(&cycle, &cycle_id, &opts)?;
                    println!("{cycle_id}: {:?} {} batches, {} samples", fault.kind, s.batches, s.samples);
                    start_us = cycle.end_us + 1_000_000;
                }
                Ok(())
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| anyhow::anyhow!("simulator thread panicked"))??;
    }
    Ok(())
}
