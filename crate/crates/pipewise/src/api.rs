//! Read-only HTTP API over the storage tree and cluster state, plus the
//! offline plot export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pipewise_core::broker::QueueStats;
use pipewise_core::cycle::CycleRecord;
use pipewise_core::decimate::{decimate, PlotPoint, PlotSeries};
use pipewise_core::segment::{Channel, StreamKind};
use pipewise_core::topology::PipelineSpec;
use serde::Serialize;
use thiserror::Error;

use crate::http::{serve_http, HttpService, Reply, Request};
use crate::messaging::Endpoint;
use crate::monitor::controller::load_snapshot;
use crate::monitor::{alerts::ALERTS_QUEUE, MONITOR_QUEUE};
use crate::storage::{read_segment, write_atomic, Layout, Level, StorageError, WriteMode};

pub const DEFAULT_API_PORT: u16 = 8080;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("unknown cycle `{0}`")]
    UnknownCycle(String),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("cycle `{cycle_id}` has no {channel} data")]
    NoData { cycle_id: String, channel: Channel },
    #[error("points must be at least 1")]
    Points,
    #[error(transparent)]
    Storage(#[from] StorageError),
}

fn kind_of(channel: Channel) -> StreamKind {
    match channel {
        Channel::Power | Channel::Temperature => StreamKind::Slow,
        Channel::Current | Channel::Vibration => StreamKind::Fast,
    }
}

/// Decimates the cleaned stream of a channel, or the raw one if the cycle
/// has not been cleaned yet.
pub fn plot_series(layout: &Layout, cycle_id: &str, channel: &str, points: usize) -> Result<PlotSeries, PlotError> {
    if points == 0 {
        return Err(PlotError::Points);
    }
    let channel: Channel = channel.parse().map_err(|_| PlotError::UnknownChannel(channel.into()))?;
    match layout.load_manifest(cycle_id) {
        Ok(_) => {}
        Err(StorageError::UnknownCycle(_)) => return Err(PlotError::UnknownCycle(cycle_id.into())),
        Err(e) => return Err(e.into()),
    }
    let kind = kind_of(channel);
    let path = [Level::Clean, Level::Raw]
        .into_iter()
        .map(|level| layout.data_path(cycle_id, channel, kind, level))
        .find(|p| p.exists())
        .ok_or_else(|| PlotError::NoData { cycle_id: cycle_id.into(), channel })?;
    let seg = read_segment(&path)?;
    Ok(decimate(&seg, cycle_id, points))
}

/// Writes `t_us,min,max` rows. Nothing is created when the series cannot
/// be built.
pub fn plot_export(layout: &Layout, cycle_id: &str, channel: &str, points: usize, out: &Path) -> Result<PlotSeries, PlotError> {
    let series = plot_series(layout, cycle_id, channel, points)?;
    let mut body = String::from("t_us,min,max\n");
    for p in &series.points {
        body.push_str(&format!("{},{},{}\n", p.t_us, p.min, p.max));
    }
    write_atomic(out, WriteMode::Replace, |w| w.write_all(body.as_bytes()))?;
    Ok(series)
}

pub fn read_plot_csv(path: &Path) -> anyhow::Result<Vec<PlotPoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(f.len() == 3, "bad plot row `{line}`");
        out.push(PlotPoint { t_us: f[0].parse()?, min: f[1].parse()?, max: f[2].parse()? });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceSummary {
    pub device_id: String,
    pub cycle_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterStatus {
    pub updated_at: Option<i64>,
    pub machines: Vec<pipewise_core::elastic::MachineInfo>,
    pub workers: Vec<pipewise_core::elastic::Placement>,
    pub queues: Vec<QueueStats>,
    pub recent_decisions: Vec<pipewise_core::elastic::ScalingDecision>,
    pub reports: Vec<pipewise_core::elastic::UtilizationReport>,
}

pub struct ApiConfig {
    pub layout: Layout,
    pub broker: Endpoint,
    /// Where the controller writes `state.json`.
    pub cluster_dir: PathBuf,
    pub pipeline: PipelineSpec,
}

pub fn handle(cfg: &ApiConfig, req: &Request) -> Reply {
    if req.method != "GET" {
        return Reply::error(405, "the API is read-only");
    }
    let segs = req.segments();
    match segs.as_slice() {
        ["api", "devices"] => with_manifests(cfg, |all| {
            let mut by_device: BTreeMap<&str, usize> = BTreeMap::new();
            for r in all {
                *by_device.entry(&r.device_id).or_default() += 1;
            }
            let out: Vec<DeviceSummary> =
                by_device.into_iter().map(|(d, n)| DeviceSummary { device_id: d.into(), cycle_count: n }).collect();
            Reply::json(200, &out)
        }),
        ["api", "devices", id, "cycles"] => with_manifests(cfg, |all| {
            let mine: Vec<&CycleRecord> = all.iter().filter(|r| r.device_id == *id).collect();
            if mine.is_empty() {
                return Reply::not_found(&format!("device `{id}`"));
            }
            Reply::json(200, &mine)
        }),
        ["api", "cycles", id] => match cfg.layout.load_manifest(id) {
            Ok(r) => Reply::json(200, &r),
            Err(e) => storage_reply(e, id),
        },
        ["api", "cycles", id, "features"] => match cfg.layout.load_manifest(id) {
            Err(e) => storage_reply(e, id),
            Ok(_) => match cfg.layout.read_features(id) {
                Ok(fv) => Reply::json(200, &fv),
                Err(StorageError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                    Reply::not_found(&format!("features of `{id}`"))
                }
                Err(e) => Reply::error(500, &e.to_string()),
            },
        },
        ["api", "cycles", id, "prediction"] => match cfg.layout.load_manifest(id) {
            Err(e) => storage_reply(e, id),
            Ok(_) => match std::fs::read(cfg.layout.prediction_path(id)) {
                Ok(body) => match serde_json::from_slice::<serde_json::Value>(&body) {
                    Ok(v) => Reply::json(200, &v),
                    Err(e) => Reply::error(500, &e.to_string()),
                },
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Reply::not_found(&format!("prediction of `{id}`")),
                Err(e) => Reply::error(500, &e.to_string()),
            },
        },
        ["api", "cycles", id, "plot"] => {
            let Some(channel) = req.query.get("channel") else {
                return Reply::bad_request("missing `channel`");
            };
            let points = match req.query.get("points").map(|p| p.parse::<usize>()) {
                None => 2000,
                Some(Ok(p)) if p >= 1 => p,
                Some(_) => return Reply::bad_request("`points` must be a positive integer"),
            };
            match plot_series(&cfg.layout, id, channel, points) {
                Ok(s) => Reply::json(200, &s),
                Err(e @ (PlotError::UnknownChannel(_) | PlotError::Points)) => Reply::bad_request(&e.to_string()),
                Err(e @ (PlotError::UnknownCycle(_) | PlotError::NoData { .. })) => Reply::error(404, &e.to_string()),
                Err(e) => Reply::error(500, &e.to_string()),
            }
        }
        ["api", "cluster", "status"] => cluster_status(cfg),
        _ => Reply::not_found("route"),
    }
}

fn with_manifests(cfg: &ApiConfig, f: impl FnOnce(&[CycleRecord]) -> Reply) -> Reply {
    match cfg.layout.list_manifests() {
        Ok(all) => f(&all),
        Err(e) => Reply::error(500, &e.to_string()),
    }
}

fn storage_reply(e: StorageError, id: &str) -> Reply {
    match e {
        StorageError::UnknownCycle(_) => Reply::not_found(&format!("cycle `{id}`")),
        other => Reply::error(500, &other.to_string()),
    }
}

fn cluster_status(cfg: &ApiConfig) -> Reply {
    let bus = match cfg.broker.connect() {
        Ok(b) => b,
        Err(e) => return Reply::error(503, &e.to_string()),
    };
    let mut names = cfg.pipeline.queues();
    names.extend(cfg.pipeline.queues().iter().map(|q| format!("{q}.dlq")));
    names.extend([MONITOR_QUEUE.to_string(), ALERTS_QUEUE.to_string()]);
    let mut queues = Vec::new();
    for q in names {
        match bus.stats(&q) {
            Ok(s) => queues.push(s),
            Err(crate::messaging::BusError::Unreachable(e)) => return Reply::error(503, &e),
            // Not declared yet.
            Err(_) => {}
        }
    }
    let snap = load_snapshot(&cfg.cluster_dir);
    let status = ClusterStatus {
        updated_at: snap.as_ref().map(|s| s.updated_at),
        machines: snap.as_ref().map(|s| s.state.machines.clone()).unwrap_or_default(),
        workers: snap.as_ref().map(|s| s.state.placements.clone()).unwrap_or_default(),
        queues,
        recent_decisions: snap.as_ref().map(|s| s.recent_decisions.clone()).unwrap_or_default(),
        reports: snap.map(|s| s.reports).unwrap_or_default(),
    };
    Reply::json(200, &status)
}

pub fn serve(addr: &str, cfg: ApiConfig) -> std::io::Result<HttpService> {
    serve_http(addr, 4, move |req| handle(&cfg, req))
}
