//! Predictive-maintenance stage handlers: download, clean, feature and
//! classify.
//!
//! Every handler is keyed on the cycle manifest. A message for a cycle that
//! is already past the stage (or failed) is acknowledged without output; one
//! at exactly the stage's status is redone and republished, which makes
//! redelivery harmless. Problems that cannot go away on retry (unknown
//! device, missing channel) fail the cycle at once; anything else is
//! returned as an error so the worker retries and eventually dead-letters.

use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context};
use pipewise_core::batch::CycleNotification;
use pipewise_core::broker::Message;
use pipewise_core::clean::{clean, CleanParams, CleanReport};
use pipewise_core::cycle::{CycleRecord, CycleStatus};
use pipewise_core::features::{extract_features, CycleSignals};
use pipewise_core::ml::TrainedModel;
use pipewise_core::segment::{Channel, StreamKind, StreamSegment, DEFAULT_FAST_RATE_HZ};
use serde::{Deserialize, Serialize};

use crate::clock::now_us;
use crate::ingest::{RawSeries, RawStore, RawStoreError};
use crate::pipeline::{Handler, Registry};
use crate::storage::{read_segment, write_atomic, write_segment, Layout, Level, StorageError, WriteMode};

/// The channels every cycle needs, in feature order.
pub const CYCLE_CHANNELS: [(Channel, StreamKind); 3] =
    [(Channel::Power, StreamKind::Slow), (Channel::Current, StreamKind::Fast), (Channel::Vibration, StreamKind::Fast)];

/// Body of messages after the download stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRef {
    pub cycle_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    /// Will not succeed on retry.
    #[error("{0}")]
    Permanent(String),
    #[error("{0}")]
    Transient(String),
}

/// Where the download stage gets raw samples.
pub trait RawSource: Send + Sync {
    fn fetch(&self, device_id: &str, channel: Channel, from_us: i64, to_us: i64) -> Result<RawSeries, FetchError>;
}

impl RawSource for RawStore {
    fn fetch(&self, device_id: &str, channel: Channel, from_us: i64, to_us: i64) -> Result<RawSeries, FetchError> {
        self.query(device_id, channel, from_us, to_us).map_err(|e| match e {
            RawStoreError::UnknownDevice(_) | RawStoreError::EmptyWindow { .. } => FetchError::Permanent(e.to_string()),
            other => FetchError::Transient(other.to_string()),
        })
    }
}

/// The ingest service's `GET /raw` endpoint.
pub struct HttpRawSource {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpRawSource {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(std::time::Duration::from_secs(30)).build();
        Self { base_url: base_url.trim_end_matches('/').into(), agent }
    }
}

impl RawSource for HttpRawSource {
    fn fetch(&self, device_id: &str, channel: Channel, from_us: i64, to_us: i64) -> Result<RawSeries, FetchError> {
        let url = format!("{}/raw/{device_id}/{channel}", self.base_url);
        let resp = self
            .agent
            .get(&url)
            .query("from_us", &from_us.to_string())
            .query("to_us", &to_us.to_string())
            .call();
        let resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Status(code @ (400 | 404), r)) => {
                return Err(FetchError::Permanent(format!("{url}: {code} {}", r.into_string().unwrap_or_default())))
            }
            Err(e) => return Err(FetchError::Transient(format!("{url}: {e}"))),
        };
        let kind = resp.header("X-Stream-Kind").and_then(|k| k.parse().ok());
        let rate_hz = resp.header("X-Rate-Hz").and_then(|r| r.parse().ok());
        let body = resp.into_string().map_err(|e| FetchError::Transient(e.to_string()))?;
        let mut samples = Vec::new();
        for (i, line) in body.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let parsed = line.split_once(',').and_then(|(t, v)| Some((t.parse().ok()?, v.parse().ok()?)));
            samples.push(parsed.ok_or_else(|| FetchError::Transient(format!("{url}: bad line {}", i + 1)))?);
        }
        Ok(RawSeries { kind, rate_hz, samples })
    }
}

pub struct PdmContext {
    pub layout: Layout,
    pub source: Arc<dyn RawSource>,
    pub clean_params: CleanParams,
    model: Mutex<Option<Arc<TrainedModel>>>,
}

impl PdmContext {
    pub fn new(layout: Layout, source: Arc<dyn RawSource>) -> Self {
        Self { layout, source, clean_params: CleanParams::default(), model: Mutex::new(None) }
    }

    /// Loads `models/model.json` on first use.
    pub fn model(&self) -> anyhow::Result<Arc<TrainedModel>> {
        let mut slot = self.model.lock().unwrap();
        if let Some(m) = &*slot {
            return Ok(m.clone());
        }
        let path = self.layout.model_path();
        let text = std::fs::read(&path).with_context(|| format!("no model at {}", path.display()))?;
        let m: Arc<TrainedModel> = Arc::new(serde_json::from_slice(&text).with_context(|| format!("bad model {}", path.display()))?);
        *slot = Some(m.clone());
        Ok(m)
    }

    /// Marks a cycle failed unless it already reached a terminal status.
    pub fn fail_cycle(&self, cycle_id: &str, reason: &str) {
        let Ok(mut rec) = self.layout.load_manifest(cycle_id) else { return };
        if rec.status.is_terminal() {
            return;
        }
        if rec.fail(reason).is_ok() {
            if let Err(e) = self.layout.write_manifest(&rec) {
                log::error!("cannot mark {cycle_id} failed: {e}");
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Download,
    Clean,
    Feature,
    Classify,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [StageKind::Download, StageKind::Clean, StageKind::Feature, StageKind::Classify];

    pub fn handler_kind(self) -> &'static str {
        match self {
            StageKind::Download => "pdm.download",
            StageKind::Clean => "pdm.clean",
            StageKind::Feature => "pdm.feature",
            StageKind::Classify => "pdm.classify",
        }
    }

    /// Status the stage leaves the cycle in.
    pub fn produces(self) -> CycleStatus {
        match self {
            StageKind::Download => CycleStatus::Downloaded,
            StageKind::Clean => CycleStatus::Cleaned,
            StageKind::Feature => CycleStatus::Featured,
            StageKind::Classify => CycleStatus::Classified,
        }
    }
}

/// Outcome of a stage body.
enum Step {
    Done(CycleRecord),
    /// Deterministic failure: fail the cycle, publish nothing.
    Fail(String),
}

pub struct Stage {
    pub ctx: Arc<PdmContext>,
    pub kind: StageKind,
}

pub fn registry(ctx: Arc<PdmContext>) -> Registry {
    let mut r = Registry::new();
    for kind in StageKind::ALL {
        r.register(kind.handler_kind(), Arc::new(Stage { ctx: ctx.clone(), kind }));
    }
    r
}

fn cycle_id_of(kind: StageKind, m: &Message) -> Option<String> {
    if kind == StageKind::Download {
        serde_json::from_slice::<CycleNotification>(&m.payload).ok().map(|n| n.cycle_id)
    } else {
        serde_json::from_slice::<CycleRef>(&m.payload).ok().map(|r| r.cycle_id)
    }
}

impl Handler for Stage {
    fn handle(&self, m: &Message) -> anyhow::Result<Option<Vec<u8>>> {
        let rec = match self.kind {
            StageKind::Download => {
                let n: CycleNotification = match serde_json::from_slice(&m.payload) {
                    Ok(n) => n,
                    Err(e) => {
                        log::warn!("dropping malformed notification {}: {e}", m.msg_id);
                        return Ok(None);
                    }
                };
                if let Err(e) = n.validate() {
                    log::warn!("dropping invalid notification {}: {e}", m.msg_id);
                    return Ok(None);
                }
                match self.ctx.layout.load_manifest(&n.cycle_id) {
                    Ok(r) => r,
                    Err(StorageError::UnknownCycle(_)) => {
                        let r = CycleRecord::new(&n.cycle_id, &n.device_id, n.start_us, n.end_us, now_us());
                        self.ctx.layout.write_manifest(&r)?;
                        r
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            _ => {
                let Ok(r) = serde_json::from_slice::<CycleRef>(&m.payload) else {
                    log::warn!("dropping malformed message {}", m.msg_id);
                    return Ok(None);
                };
                match self.ctx.layout.load_manifest(&r.cycle_id) {
                    Ok(rec) => rec,
                    Err(StorageError::UnknownCycle(id)) => {
                        log::warn!("no manifest for {id}; dropping");
                        return Ok(None);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };

        let target = self.kind.produces();
        let (Some(have), Some(want)) = (rec.status.rank(), target.rank()) else {
            // Failed cycles are left alone.
            return Ok(None);
        };
        if have > want {
            return Ok(None);
        }
        if have + 1 < want {
            return Err(anyhow!("{} is {} and not ready for {}", rec.cycle_id, rec.status.as_str(), target.as_str()));
        }

        let cycle_id = rec.cycle_id.clone();
        let step = match self.kind {
            StageKind::Download => download(&self.ctx, rec)?,
            StageKind::Clean => clean_stage(&self.ctx, rec)?,
            StageKind::Feature => feature_stage(&self.ctx, rec)?,
            StageKind::Classify => classify_stage(&self.ctx, rec)?,
        };
        match step {
            Step::Done(mut rec) => {
                rec.advance(target)?;
                self.ctx.layout.write_manifest(&rec)?;
                if self.kind == StageKind::Classify {
                    return Ok(None);
                }
                Ok(Some(serde_json::to_vec(&CycleRef { cycle_id })?))
            }
            Step::Fail(reason) => {
                log::warn!("{cycle_id}: {reason}");
                self.ctx.fail_cycle(&cycle_id, &reason);
                Ok(None)
            }
        }
    }

    fn dead_lettered(&self, m: &Message, error: &anyhow::Error) {
        if let Some(id) = cycle_id_of(self.kind, m) {
            self.ctx.fail_cycle(&id, &format!("{} stage gave up: {error:#}", self.kind.handler_kind()));
        }
    }
}

fn file_key(channel: Channel, kind: StreamKind, level: Level) -> String {
    format!("{channel}.{kind}.{}", level.as_str())
}

fn to_segment(device_id: &str, channel: Channel, kind: StreamKind, series: &RawSeries) -> StreamSegment {
    let rate_hz = match kind {
        StreamKind::Slow => 1,
        StreamKind::Fast => series.rate_hz.unwrap_or(DEFAULT_FAST_RATE_HZ),
    };
    let start = series.samples.first().map_or(0, |s| s.0);
    let mut seg = StreamSegment::regular(device_id, channel, kind, start, rate_hz, series.samples.iter().map(|s| s.1).collect());
    seg.explicit_timestamps = Some(series.samples.iter().map(|s| s.0).collect());
    seg
}

fn download(ctx: &PdmContext, mut rec: CycleRecord) -> anyhow::Result<Step> {
    let mut fetched = Vec::new();
    for (channel, kind) in CYCLE_CHANNELS {
        let series = match ctx.source.fetch(&rec.device_id, channel, rec.start_us, rec.end_us) {
            Ok(s) => s,
            Err(FetchError::Permanent(e)) => return Ok(Step::Fail(format!("download {channel}: {e}"))),
            Err(FetchError::Transient(e)) => return Err(anyhow!("download {channel}: {e}")),
        };
        if series.kind.is_some_and(|k| k != kind) {
            return Ok(Step::Fail(format!("{channel} arrived as a {} stream", series.kind.unwrap())));
        }
        fetched.push((channel, kind, series));
    }
    if fetched.iter().all(|(_, _, s)| s.samples.is_empty()) {
        return Ok(Step::Fail("empty-window".into()));
    }
    if let Some((channel, _, _)) = fetched.iter().find(|(_, _, s)| s.samples.is_empty()) {
        return Ok(Step::Fail(format!("empty-window: no {channel} samples")));
    }
    for (channel, kind, series) in &fetched {
        let seg = to_segment(&rec.device_id, *channel, *kind, series);
        let path = ctx.layout.data_path(&rec.cycle_id, *channel, *kind, Level::Raw);
        write_segment(&seg, &path, WriteMode::Replace)?;
        rec.files.insert(file_key(*channel, *kind, Level::Raw), ctx.layout.relative(&path));
    }
    Ok(Step::Done(rec))
}

fn clean_stage(ctx: &PdmContext, mut rec: CycleRecord) -> anyhow::Result<Step> {
    let mut reports = Vec::new();
    for (channel, kind) in CYCLE_CHANNELS {
        let raw = match read_segment(&ctx.layout.data_path(&rec.cycle_id, channel, kind, Level::Raw)) {
            Ok(s) => s,
            Err(StorageError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Step::Fail(format!("raw {channel} file is missing")))
            }
            Err(e @ StorageError::Malformed { .. }) => return Ok(Step::Fail(e.to_string())),
            Err(e) => return Err(e.into()),
        };
        let (cleaned, report) = clean(&raw, &ctx.clean_params);
        if cleaned.is_empty() {
            return Ok(Step::Fail(format!("{channel} is empty after cleaning")));
        }
        let path = ctx.layout.data_path(&rec.cycle_id, channel, kind, Level::Clean);
        write_segment(&cleaned, &path, WriteMode::Replace)?;
        rec.files.insert(file_key(channel, kind, Level::Clean), ctx.layout.relative(&path));
        reports.push(report.for_cycle(&rec.cycle_id));
    }
    let path = ctx.layout.clean_report_path(&rec.cycle_id);
    let body = serde_json::to_vec_pretty(&reports)?;
    write_atomic(&path, WriteMode::Replace, |w| w.write_all(&body))?;
    rec.files.insert("clean_report".into(), ctx.layout.relative(&path));
    Ok(Step::Done(rec))
}

fn feature_stage(ctx: &PdmContext, mut rec: CycleRecord) -> anyhow::Result<Step> {
    let mut segs = Vec::new();
    for (channel, kind) in CYCLE_CHANNELS {
        match read_segment(&ctx.layout.data_path(&rec.cycle_id, channel, kind, Level::Clean)) {
            Ok(s) => segs.push(s),
            Err(e @ StorageError::Malformed { .. }) => return Ok(Step::Fail(e.to_string())),
            Err(e) => return Err(e.into()),
        }
    }
    let text = std::fs::read(ctx.layout.clean_report_path(&rec.cycle_id))?;
    let reports: Vec<CleanReport> = match serde_json::from_slice(&text) {
        Ok(r) => r,
        Err(e) => return Ok(Step::Fail(format!("bad clean report: {e}"))),
    };
    if reports.len() != 3 {
        return Ok(Step::Fail(format!("clean report has {} entries", reports.len())));
    }
    let signals = CycleSignals {
        cycle_id: &rec.cycle_id,
        start_us: rec.start_us,
        end_us: rec.end_us,
        power: &segs[0],
        current: &segs[1],
        vibration: &segs[2],
        reports: [&reports[0], &reports[1], &reports[2]],
    };
    let fv = match extract_features(&signals) {
        Ok(fv) => fv,
        Err(e) => return Ok(Step::Fail(format!("feature extraction: {e}"))),
    };
    let path = ctx.layout.write_features(&fv, WriteMode::Replace)?;
    rec.files.insert("features".into(), ctx.layout.relative(&path));
    Ok(Step::Done(rec))
}

fn classify_stage(ctx: &PdmContext, mut rec: CycleRecord) -> anyhow::Result<Step> {
    let model = ctx.model()?;
    let fv = match ctx.layout.read_features(&rec.cycle_id) {
        Ok(fv) => fv,
        Err(e @ StorageError::Malformed { .. }) => return Ok(Step::Fail(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let prediction = match model.predict(&fv) {
        Ok(p) => p,
        Err(e) => return Ok(Step::Fail(format!("classification: {e}"))),
    };
    let path = ctx.layout.prediction_path(&rec.cycle_id);
    let body = serde_json::to_vec_pretty(&prediction)?;
    write_atomic(&path, WriteMode::Replace, |w| w.write_all(&body))?;
    rec.files.insert("prediction".into(), ctx.layout.relative(&path));
    Ok(Step::Done(rec))
}
