//! Every service in one process: broker, ingest, node agents, controller
//! and API. Used by `pipewise up` and by end-to-end tests.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use pipewise_core::broker::BrokerConfig;
use pipewise_core::elastic::{ElasticityConfig, MachineInfo};
use pipewise_core::topology::{MachineDescriptor, PipelineSpec, WorkerKind};

use crate::api::{self, ApiConfig};
use crate::http::HttpService;
use crate::ingest::{IngestConfig, IngestService, RetryPolicy};
use crate::messaging::{serve, BrokerServer, Bus, Endpoint, LocalBroker};
use crate::monitor::alerts::AlertLog;
use crate::monitor::{start_controller_loop, start_probe_loop, Controller, LocalCluster, Periodic};
use crate::pdm::{registry, HttpRawSource, PdmContext};
use crate::pipeline::{register_pipeline, NodeAgent};
use crate::storage::Layout;

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub root: PathBuf,
    pub broker_addr: String,
    pub mqtt_addr: String,
    pub ingest_addr: String,
    pub api_addr: String,
    /// Simulated machines, each with `cores_per_machine` worker slots, or
    /// enough to host every stage's minimum.
    pub machines: usize,
    pub cores_per_machine: u32,
    pub elasticity: ElasticityConfig,
    /// Keep broker queues on disk.
    pub journal: bool,
}

impl StackConfig {
    /// Ephemeral ports on localhost.
    pub fn local(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            broker_addr: "127.0.0.1:0".into(),
            mqtt_addr: "127.0.0.1:0".into(),
            ingest_addr: "127.0.0.1:0".into(),
            api_addr: "127.0.0.1:0".into(),
            machines: 1,
            cores_per_machine: std::thread::available_parallelism().map_or(4, |n| n.get() as u32),
            elasticity: ElasticityConfig { probe_period_s: 1.0, cooldown_s: 5.0, ..Default::default() },
            journal: false,
        }
    }
}

pub struct Stack {
    pub broker: LocalBroker,
    pub broker_server: BrokerServer,
    pub ingest: IngestService,
    pub api: HttpService,
    pub agents: Vec<Arc<NodeAgent>>,
    pub controller: Arc<Mutex<Controller>>,
    pub layout: Layout,
    loops: Vec<Periodic>,
}

impl Stack {
    pub fn start(cfg: StackConfig) -> anyhow::Result<Self> {
        let layout = Layout::new(cfg.root.join("store"));
        let broker = if cfg.journal {
            LocalBroker::with_journal(BrokerConfig::default(), &cfg.root.join("broker"))?
        } else {
            LocalBroker::new(BrokerConfig::default())
        };
        let broker_server = serve(TcpListener::bind(&cfg.broker_addr)?, broker.clone())?;
        let endpoint = Endpoint::Local(broker.clone());
        let bus: Arc<dyn Bus> = Arc::new(broker.clone());

        let ingest = IngestService::start(IngestConfig {
            raw_root: cfg.root.join("raw"),
            mqtt_addr: cfg.mqtt_addr.clone(),
            http_addr: cfg.ingest_addr.clone(),
            broker: endpoint.clone(),
            allow: None,
            retry: RetryPolicy::default(),
        })?;

        let spec = PipelineSpec::pdm();
        let source = Arc::new(HttpRawSource::new(&format!("http://{}", ingest.http_addr())));
        let ctx = Arc::new(PdmContext::new(layout.clone(), source));
        let reg = registry(ctx);
        register_pipeline(&spec, &reg, &*bus, Some(&cfg.root.join("pipeline.json")))?;

        let alerts = Arc::new(AlertLog::new(&cfg.root.join("logs"), Some(bus.clone())));
        let mut agents = Vec::new();
        let mut loops = Vec::new();
        let mut machines = Vec::new();
        let n_machines = cfg.machines.max(1);
        // Slots are a worker budget. On a small box the stage minimums still
        // have to fit, or the pipeline never starts.
        let min_total: u32 = spec.stages.iter().map(|s| s.min_workers).sum();
        let capacity = cfg.cores_per_machine.max(min_total.div_ceil(n_machines as u32));
        for i in 0..n_machines {
            let machine_id = format!("m{}", i + 1);
            let desc = MachineDescriptor { machine_id: machine_id.clone(), address: "local".into(), core_count: capacity, active: true };
            let agent = Arc::new(NodeAgent::new(desc, spec.clone(), reg.clone(), endpoint.clone(), alerts.clone(), None));
            let period = Duration::from_secs_f64(cfg.elasticity.probe_period_s);
            loops.push(start_probe_loop(agent.clone(), bus.clone(), alerts.clone(), period));
            machines.push(MachineInfo { machine_id, active: true, capacity });
            agents.push(agent);
        }
        let cluster = LocalCluster {
            agents: agents.iter().map(|a| (a.machine().machine_id, a.clone())).collect::<BTreeMap<_, _>>(),
            kind: WorkerKind::InProcess,
        };
        let cluster_dir = cfg.root.join("cluster");
        let controller = Arc::new(Mutex::new(Controller::new(
            &spec,
            machines,
            cfg.elasticity.clone(),
            Arc::new(cluster),
            alerts,
            Some(&cluster_dir),
        )));
        loops.push(start_controller_loop(controller.clone(), bus)?);

        let api = api::serve(&cfg.api_addr, ApiConfig { layout: layout.clone(), broker: endpoint, cluster_dir, pipeline: spec })?;
        Ok(Self { broker, broker_server, ingest, api, agents, controller, layout, loops })
    }

    pub fn mqtt_addr(&self) -> SocketAddr {
        self.ingest.mqtt_addr()
    }

    pub fn ingest_url(&self) -> String {
        format!("http://{}", self.ingest.http_addr())
    }

    pub fn api_url(&self) -> String {
        format!("http://{}", self.api.local_addr())
    }

    pub fn shutdown(mut self) {
        for l in &mut self.loops {
            l.stop();
        }
        for a in &self.agents {
            a.shutdown(true);
        }
        self.broker_server.shutdown();
    }
}
