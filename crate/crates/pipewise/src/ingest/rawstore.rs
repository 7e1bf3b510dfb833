//! Append-only raw sample store.
//!
//! One file per (device, channel, UTC day of the batch start) under
//! `<root>/<device>/<channel>/<YYYY-MM-DD>.csv`. Each appended batch is a
//! complete fast-CSV block: the usual `# device=...` header followed by one
//! value per line. An in-memory index of extents (start, rate, count, byte
//! offset) answers range queries without scanning whole files; it is rebuilt
//! from the files on open.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use pipewise_core::batch::SampleBatch;
use pipewise_core::segment::{implicit_timestamp, Channel, StreamKind};
use thiserror::Error;

use crate::storage::format_value;

#[derive(Debug, Error)]
pub enum RawStoreError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("empty query window [{from_us}, {to_us})")]
    EmptyWindow { from_us: i64, to_us: i64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone)]
struct Extent {
    start_us: i64,
    rate_hz: u32,
    kind: StreamKind,
    count: usize,
    file: PathBuf,
    /// Byte offset of the first value line.
    offset: u64,
}

impl Extent {
    fn ts(&self, i: usize) -> i64 {
        implicit_timestamp(self.start_us, self.rate_hz, i)
    }

    fn end_us(&self) -> i64 {
        if self.count == 0 {
            self.start_us
        } else {
            self.ts(self.count - 1) + 1
        }
    }

    /// First index with timestamp >= t.
    fn lower_bound(&self, t: i64) -> usize {
        let (mut lo, mut hi) = (0, self.count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.ts(mid) < t {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

#[derive(Default)]
struct ChannelLog {
    extents: Vec<Extent>,
}

type Key = (String, Channel);

/// Samples for one (device, channel) window, ascending by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub kind: Option<StreamKind>,
    pub rate_hz: Option<u32>,
    pub samples: Vec<(i64, f64)>,
}

pub struct RawStore {
    root: PathBuf,
    logs: RwLock<HashMap<Key, Arc<Mutex<ChannelLog>>>>,
}

impl RawStore {
    pub fn open(root: &Path) -> Result<Self, RawStoreError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RawStoreError::Io { path, source }
        };
        fs::create_dir_all(root).map_err(io_err(root))?;
        let mut logs: HashMap<Key, Arc<Mutex<ChannelLog>>> = HashMap::new();
        for dev in fs::read_dir(root).map_err(io_err(root))?.filter_map(|e| e.ok()) {
            let Some(device) = dev.file_name().to_str().map(String::from) else { continue };
            let Ok(channels) = fs::read_dir(dev.path()) else { continue };
            for ch in channels.filter_map(|e| e.ok()) {
                let Some(channel) = ch.file_name().to_str().and_then(|c| c.parse::<Channel>().ok()) else { continue };
                let mut files: Vec<PathBuf> = fs::read_dir(ch.path())
                    .map_err(io_err(&ch.path()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                    .collect();
                files.sort();
                let mut log = ChannelLog::default();
                for f in files {
                    log.extents.extend(scan_file(&f)?);
                }
                logs.insert((device.clone(), channel), Arc::new(Mutex::new(log)));
            }
        }
        Ok(Self { root: root.to_path_buf(), logs: RwLock::new(logs) })
    }

    fn log(&self, key: &Key) -> Arc<Mutex<ChannelLog>> {
        if let Some(l) = self.logs.read().unwrap().get(key) {
            return l.clone();
        }
        self.logs.write().unwrap().entry(key.clone()).or_default().clone()
    }

    fn file_for(&self, batch: &SampleBatch) -> PathBuf {
        let day = chrono::DateTime::from_timestamp_micros(batch.start_us)
            .map(|d| d.format("%Y-%m-%d").to_string())
            .unwrap_or_else(|| "out-of-range".into());
        self.root.join(&batch.device_id).join(batch.channel.as_str()).join(format!("{day}.csv"))
    }

    /// Appends one batch. Appends to one (device, channel) are serialized.
    pub fn append(&self, batch: &SampleBatch) -> Result<(), RawStoreError> {
        let log = self.log(&(batch.device_id.clone(), batch.channel));
        let mut log = log.lock().unwrap();
        let path = self.file_for(batch);
        let io_err = |source| RawStoreError::Io { path: path.clone(), source };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut block = format!(
            "# device={} channel={} rate_hz={} start_us={}\n",
            batch.device_id, batch.channel, batch.rate_hz, batch.start_us
        );
        let header_len = block.len() as u64;
        for v in &batch.values {
            block.push_str(&format_value(*v));
            block.push('\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err)?;
        let at = f.seek(SeekFrom::End(0)).map_err(io_err)?;
        f.write_all(block.as_bytes()).map_err(io_err)?;
        log.extents.push(Extent {
            start_us: batch.start_us,
            rate_hz: batch.rate_hz,
            kind: batch.stream_kind,
            count: batch.values.len(),
            file: path.clone(),
            offset: at + header_len,
        });
        Ok(())
    }

    pub fn has_device(&self, device_id: &str) -> bool {
        self.logs.read().unwrap().keys().any(|(d, _)| d == device_id)
    }

    pub fn devices(&self) -> Vec<String> {
        let mut d: Vec<String> = self.logs.read().unwrap().keys().map(|(d, _)| d.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    /// Total stored samples for a (device, channel), duplicates included.
    pub fn sample_count(&self, device_id: &str, channel: Channel) -> usize {
        match self.logs.read().unwrap().get(&(device_id.to_string(), channel)) {
            Some(l) => l.lock().unwrap().extents.iter().map(|e| e.count).sum(),
            None => 0,
        }
    }

    /// Every stored sample with timestamp in `[from_us, to_us)`, ascending.
    /// Overlapping batches keep their duplicates.
    pub fn query(&self, device_id: &str, channel: Channel, from_us: i64, to_us: i64) -> Result<RawSeries, RawStoreError> {
        if to_us <= from_us {
            return Err(RawStoreError::EmptyWindow { from_us, to_us });
        }
        if !self.has_device(device_id) {
            return Err(RawStoreError::UnknownDevice(device_id.into()));
        }
        let extents: Vec<Extent> = match self.logs.read().unwrap().get(&(device_id.to_string(), channel)) {
            Some(l) => l.lock().unwrap().extents.clone(),
            None => Vec::new(),
        };
        let last = extents.last();
        let mut series = RawSeries { kind: last.map(|e| e.kind), rate_hz: last.map(|e| e.rate_hz), samples: Vec::new() };
        for e in extents.iter().filter(|e| e.start_us < to_us && e.end_us() > from_us) {
            let (i0, i1) = (e.lower_bound(from_us), e.lower_bound(to_us));
            if i0 < i1 {
                read_values(e, i0, i1, &mut series.samples)?;
            }
        }
        series.samples.sort_by_key(|&(t, _)| t);
        Ok(series)
    }
}

fn read_values(e: &Extent, i0: usize, i1: usize, out: &mut Vec<(i64, f64)>) -> Result<(), RawStoreError> {
    let io_err = |source| RawStoreError::Io { path: e.file.clone(), source };
    let mut f = File::open(&e.file).map_err(io_err)?;
    f.seek(SeekFrom::Start(e.offset)).map_err(io_err)?;
    let mut lines = BufReader::new(f).lines();
    for i in 0..i1 {
        let line = lines
            .next()
            .transpose()
            .map_err(io_err)?
            .ok_or_else(|| RawStoreError::Corrupt { path: e.file.clone(), line: 0, reason: "extent runs past end of file".into() })?;
        if i >= i0 {
            let v = line.trim().parse::<f64>().map_err(|_| RawStoreError::Corrupt {
                path: e.file.clone(),
                line: 0,
                reason: format!("bad value `{line}`"),
            })?;
            out.push((e.ts(i), v));
        }
    }
    Ok(())
}

/// Rebuilds the extents of one day file.
fn scan_file(path: &Path) -> Result<Vec<Extent>, RawStoreError> {
    let io_err = |source| RawStoreError::Io { path: path.to_path_buf(), source };
    let mut reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut extents: Vec<Extent> = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    let mut line_no = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        offset += n as u64;
        if !line.ends_with('\n') {
            // Torn tail from a crash mid-append: ignore it.
            break;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            let mut start = None;
            let mut rate = None;
            for field in rest.split_whitespace() {
                match field.split_once('=') {
                    Some(("rate_hz", v)) => rate = v.parse::<u32>().ok(),
                    Some(("start_us", v)) => start = v.parse::<i64>().ok(),
                    _ => {}
                }
            }
            let (Some(start_us), Some(rate_hz)) = (start, rate) else {
                return Err(RawStoreError::Corrupt { path: path.to_path_buf(), line: line_no, reason: "bad block header".into() });
            };
            let kind = if rate_hz == 1 { StreamKind::Slow } else { StreamKind::Fast };
            extents.push(Extent { start_us, rate_hz, kind, count: 0, file: path.to_path_buf(), offset });
        } else if let Some(e) = extents.last_mut() {
            e.count += 1;
        } else {
            return Err(RawStoreError::Corrupt { path: path.to_path_buf(), line: line_no, reason: "value before header".into() });
        }
    }
    Ok(extents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(start_us: i64, rate: u32, n: usize) -> SampleBatch {
        SampleBatch {
            device_id: "wm-01".into(),
            channel: Channel::Current,
            stream_kind: if rate == 1 { StreamKind::Slow } else { StreamKind::Fast },
            start_us,
            rate_hz: rate,
            values: (0..n).map(|i| i as f64 * 0.5).collect(),
        }
    }

    const T0: i64 = 1_700_000_000_000_000;

    #[test]
    fn one_second_of_fast_data() {
        let dir = tempfile::tempdir().unwrap();
        let store = RawStore::open(dir.path()).unwrap();
        store.append(&batch(T0, 2048, 2048)).unwrap();
        let s = store.query("wm-01", Channel::Current, T0, T0 + 1_000_000).unwrap();
        assert_eq!(s.samples.len(), 2048);
        assert_eq!(s.samples[1].0, T0 + 488);
        assert_eq!(s.rate_hz, Some(2048));
        assert!(store.query("wm-01", Channel::Current, T0 - 10, T0).unwrap().samples.is_empty());
        assert!(matches!(store.query("nope", Channel::Current, T0, T0 + 1), Err(RawStoreError::UnknownDevice(_))));
    }

    #[test]
    fn overlapping_batches_keep_duplicates_and_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = RawStore::open(dir.path()).unwrap();
            store.append(&batch(T0, 128, 128)).unwrap();
            store.append(&batch(T0, 128, 128)).unwrap();
        }
        let store = RawStore::open(dir.path()).unwrap();
        let s = store.query("wm-01", Channel::Current, T0, T0 + 500_000).unwrap();
        assert_eq!(s.samples.len(), 128);
        assert_eq!(s.samples[0], s.samples[1]);
        assert_eq!(store.sample_count("wm-01", Channel::Current), 256);
    }
}
