//! File staging: stream CSVs, feature CSVs and cycle manifests.
//!
//! Two CSV dialects share one header line,
//! `# device=<id> channel=<ch> rate_hz=<r> start_us=<t>`:
//! * timestamped: `timestamp_us,value` per line (slow streams, raw downloads
//!   and any cleaned stream with irregular spacing);
//! * fast: one value per line, timestamps implied by the header.
//!
//! Values are written rounded to 9 significant digits, in the shortest
//! plain decimal form that reads back to the same rounded value.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pipewise_core::cycle::{CycleRecord, CycleStatus};
use pipewise_core::features::FeatureVector;
use pipewise_core::segment::{is_valid_fast_rate, Channel, StreamKind, StreamSegment};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{0} already exists")]
    PathExists(PathBuf),
    #[error("unknown cycle `{0}`")]
    UnknownCycle(String),
    #[error("cycle `{cycle_id}`: cannot move from {} to {}", from.as_str(), to.as_str())]
    Transition { cycle_id: String, from: CycleStatus, to: CycleStatus },
    #[error("cannot write a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, StorageError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io { path: path.to_path_buf(), source }
}

/// Whether a write may replace an existing file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteMode {
    CreateNew,
    /// Atomically replaces the file; used by idempotent stage handlers.
    Replace,
}

/// Rounds to 9 significant digits and prints the shortest plain decimal
/// that reads back to that rounded value.
pub fn format_value(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// The value `format_value` followed by a parse produces.
pub fn round9(v: f64) -> f64 {
    format_value(v).parse().expect("formatted float parses")
}

fn header(seg: &StreamSegment) -> String {
    format!(
        "# device={} channel={} rate_hz={} start_us={}\n",
        seg.device_id, seg.channel, seg.rate_hz, seg.start_us
    )
}

/// Writes `contents` via `<path>.tmp`, fsync and rename.
pub fn write_atomic(path: &Path, mode: WriteMode, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    if mode == WriteMode::CreateNew && path.exists() {
        return Err(StorageError::PathExists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    write(&mut w).map_err(io_err(&tmp))?;
    let file = w.into_inner().map_err(|e| StorageError::Io { path: tmp.clone(), source: e.into_error() })?;
    file.sync_all().map_err(io_err(&tmp))?;
    if mode == WriteMode::CreateNew && path.exists() {
        let _ = fs::remove_file(&tmp);
        return Err(StorageError::PathExists(path.to_path_buf()));
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(StorageError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Serializes a segment as timestamped CSV.
pub fn timestamped_csv(seg: &StreamSegment) -> Result<String> {
    check_finite(&seg.values)?;
    let mut out = header(seg);
    for (i, v) in seg.values.iter().enumerate() {
        let _ = writeln!(out, "{},{}", seg.timestamp(i), format_value(*v));
    }
    Ok(out)
}

/// Serializes a regular segment as fast CSV.
pub fn fast_csv(seg: &StreamSegment) -> Result<String> {
    check_finite(&seg.values)?;
    if seg.explicit_timestamps.is_some() {
        return Err(StorageError::Invalid("fast CSV needs implicit timestamps".into()));
    }
    let mut out = header(seg);
    out.reserve(seg.values.len() * 10);
    for v in &seg.values {
        out.push_str(&format_value(*v));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_slow_csv(seg: &StreamSegment, path: &Path) -> Result<()> {
    write_slow_csv_with(seg, path, WriteMode::CreateNew)
}

pub fn write_slow_csv_with(seg: &StreamSegment, path: &Path, mode: WriteMode) -> Result<()> {
    if seg.stream_kind != StreamKind::Slow || seg.rate_hz != 1 {
        return Err(StorageError::Invalid("slow CSV needs a 1 Hz slow segment".into()));
    }
    write_timestamped_csv(seg, path, mode)
}

pub fn write_timestamped_csv(seg: &StreamSegment, path: &Path, mode: WriteMode) -> Result<()> {
    let body = timestamped_csv(seg)?;
    write_atomic(path, mode, |w| w.write_all(body.as_bytes()))
}

pub fn write_fast_csv(seg: &StreamSegment, path: &Path) -> Result<()> {
    write_fast_csv_with(seg, path, WriteMode::CreateNew)
}

pub fn write_fast_csv_with(seg: &StreamSegment, path: &Path, mode: WriteMode) -> Result<()> {
    if seg.stream_kind != StreamKind::Fast || !is_valid_fast_rate(seg.rate_hz) {
        return Err(StorageError::Invalid("fast CSV needs a fast segment".into()));
    }
    let body = fast_csv(seg)?;
    write_atomic(path, mode, |w| w.write_all(body.as_bytes()))
}

/// Fast dialect when the segment is regular, timestamped otherwise.
pub fn write_segment(seg: &StreamSegment, path: &Path, mode: WriteMode) -> Result<()> {
    if seg.stream_kind == StreamKind::Fast && seg.explicit_timestamps.is_none() {
        write_fast_csv_with(seg, path, mode)
    } else {
        write_timestamped_csv(seg, path, mode)
    }
}

struct Header {
    device_id: String,
    channel: Channel,
    rate_hz: u32,
    start_us: i64,
}

fn parse_header(path: &Path, line: &str) -> Result<Header> {
    let bad = |reason: String| StorageError::Malformed { path: path.to_path_buf(), line: 1, reason };
    let rest = line.strip_prefix("# ").ok_or_else(|| bad("missing `# ` header".into()))?;
    let (mut device, mut channel, mut rate, mut start) = (None, None, None, None);
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("garbled header field `{field}`")))?;
        match k {
            "device" => device = Some(v.to_string()),
            "channel" => channel = Some(v.parse::<Channel>().map_err(|e| bad(e.to_string()))?),
            "rate_hz" => rate = Some(v.parse::<u32>().map_err(|_| bad(format!("bad rate_hz `{v}`")))?),
            "start_us" => start = Some(v.parse::<i64>().map_err(|_| bad(format!("bad start_us `{v}`")))?),
            _ => return Err(bad(format!("unknown header field `{k}`"))),
        }
    }
    Ok(Header {
        device_id: device.ok_or_else(|| bad("header lacks device".into()))?,
        channel: channel.ok_or_else(|| bad("header lacks channel".into()))?,
        rate_hz: rate.ok_or_else(|| bad("header lacks rate_hz".into()))?,
        start_us: start.ok_or_else(|| bad("header lacks start_us".into()))?,
    })
}

fn parse_value(path: &Path, line_no: usize, s: &str) -> Result<f64> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(StorageError::Malformed { path: path.to_path_buf(), line: line_no, reason: format!("value `{s}` is not finite") }),
        Err(_) => Err(StorageError::Malformed { path: path.to_path_buf(), line: line_no, reason: format!("bad value `{s}`") }),
    }
}

/// Reads either dialect, telling them apart by the first data line.
pub fn read_segment(path: &Path) -> Result<StreamSegment> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()
        .map_err(io_err(path))?
        .ok_or_else(|| StorageError::Malformed { path: path.to_path_buf(), line: 1, reason: "empty file".into() })?;
    let h = parse_header(path, &first)?;
    let kind = if h.rate_hz == 1 { StreamKind::Slow } else { StreamKind::Fast };
    if kind == StreamKind::Fast && !is_valid_fast_rate(h.rate_hz) {
        return Err(StorageError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("rate_hz={} is not a valid stream rate", h.rate_hz),
        });
    }
    let mut values = Vec::new();
    let mut timestamps: Option<Vec<i64>> = None;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        match line.split_once(',') {
            Some((t, v)) => {
                let ts = timestamps.get_or_insert_with(Vec::new);
                if ts.len() != values.len() {
                    return Err(StorageError::Malformed { path: path.to_path_buf(), line: line_no, reason: "mixed dialects".into() });
                }
                let t = t.trim().parse::<i64>().map_err(|_| StorageError::Malformed {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!("bad timestamp `{t}`"),
                })?;
                ts.push(t);
                values.push(parse_value(path, line_no, v)?);
            }
            None => {
                if timestamps.is_some() {
                    return Err(StorageError::Malformed { path: path.to_path_buf(), line: line_no, reason: "mixed dialects".into() });
                }
                values.push(parse_value(path, line_no, &line)?);
            }
        }
    }
    Ok(StreamSegment {
        device_id: h.device_id,
        channel: h.channel,
        stream_kind: kind,
        start_us: h.start_us,
        rate_hz: h.rate_hz,
        values,
        explicit_timestamps: timestamps.or(if kind == StreamKind::Slow { Some(Vec::new()) } else { None }),
    })
}

pub fn read_slow_csv(path: &Path) -> Result<StreamSegment> {
    let seg = read_segment(path)?;
    if seg.stream_kind != StreamKind::Slow {
        return Err(StorageError::Malformed { path: path.to_path_buf(), line: 1, reason: "not a slow stream".into() });
    }
    Ok(seg)
}

pub fn read_fast_csv(path: &Path) -> Result<StreamSegment> {
    let seg = read_segment(path)?;
    if seg.stream_kind != StreamKind::Fast {
        return Err(StorageError::Malformed { path: path.to_path_buf(), line: 1, reason: "not a fast stream".into() });
    }
    Ok(seg)
}

/// Directory layout under one storage root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Raw,
    Clean,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Raw => "raw",
            Level::Clean => "clean",
        }
    }
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn cycles_dir(&self) -> PathBuf {
        self.root.join("cycles")
    }

    pub fn manifest_path(&self, cycle_id: &str) -> PathBuf {
        self.cycles_dir().join(format!("{cycle_id}.json"))
    }

    pub fn data_file_name(channel: Channel, kind: StreamKind, level: Level) -> String {
        format!("{}.{}.{}.csv", channel, kind, level.as_str())
    }

    pub fn data_path(&self, cycle_id: &str, channel: Channel, kind: StreamKind, level: Level) -> PathBuf {
        self.root.join("data").join(cycle_id).join(Self::data_file_name(channel, kind, level))
    }

    pub fn features_path(&self, cycle_id: &str) -> PathBuf {
        self.root.join("features").join(format!("{cycle_id}.csv"))
    }

    pub fn prediction_path(&self, cycle_id: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{cycle_id}.json"))
    }

    pub fn clean_report_path(&self, cycle_id: &str) -> PathBuf {
        self.root.join("data").join(cycle_id).join("clean-report.json")
    }

    pub fn model_path(&self) -> PathBuf {
        self.root.join("models").join("model.json")
    }

    /// Relative form stored in manifests.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().into_owned()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn write_manifest(&self, record: &CycleRecord) -> Result<()> {
        if let Ok(existing) = self.load_manifest(&record.cycle_id) {
            if !existing.status.can_transition_to(record.status) {
                return Err(StorageError::Transition {
                    cycle_id: record.cycle_id.clone(),
                    from: existing.status,
                    to: record.status,
                });
            }
        }
        let body = serde_json::to_vec_pretty(record).expect("record serializes");
        write_atomic(&self.manifest_path(&record.cycle_id), WriteMode::Replace, |w| w.write_all(&body))
    }

    pub fn load_manifest(&self, cycle_id: &str) -> Result<CycleRecord> {
        let path = self.manifest_path(cycle_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StorageError::UnknownCycle(cycle_id.into())),
            Err(e) => return Err(StorageError::Io { path, source: e }),
        };
        serde_json::from_slice(&bytes).map_err(|e| StorageError::Malformed { path, line: e.line(), reason: e.to_string() })
    }

    /// All manifests, sorted by cycle id.
    pub fn list_manifests(&self) -> Result<Vec<CycleRecord>> {
        let dir = self.cycles_dir();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StorageError::Io { path: dir, source: e }),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(String::from))
            .collect();
        ids.sort();
        ids.iter().map(|id| self.load_manifest(id)).collect()
    }

    pub fn write_features(&self, fv: &FeatureVector, mode: WriteMode) -> Result<PathBuf> {
        let path = self.features_path(&fv.cycle_id);
        write_atomic(&path, mode, |w| w.write_all(features_csv(fv).as_bytes()))?;
        Ok(path)
    }

    pub fn read_features(&self, cycle_id: &str) -> Result<FeatureVector> {
        read_features_csv(&self.features_path(cycle_id), cycle_id)
    }
}

/// Header row of names, one row of values at full precision.
pub fn features_csv(fv: &FeatureVector) -> String {
    let mut out = fv.names.join(",");
    out.push('\n');
    let values: Vec<String> = fv.values.iter().map(|v| format!("{v}")).collect();
    out.push_str(&values.join(","));
    out.push('\n');
    out
}

pub fn read_features_csv(path: &Path, cycle_id: &str) -> Result<FeatureVector> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let bad = |line: usize, reason: &str| StorageError::Malformed { path: path.to_path_buf(), line, reason: reason.into() };
    let names: Vec<String> = lines.next().ok_or_else(|| bad(1, "missing header"))?.split(',').map(String::from).collect();
    let row = lines.next().ok_or_else(|| bad(2, "missing values"))?;
    let values = row.split(',').map(|v| parse_value(path, 2, v)).collect::<Result<Vec<f64>>>()?;
    if values.len() != names.len() {
        return Err(bad(2, "value count differs from header"));
    }
    Ok(FeatureVector { cycle_id: cycle_id.into(), names, values })
}

/// Appends one line to a file, creating parents as needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(format!("{line}\n").as_bytes()).map_err(io_err(path))
}
