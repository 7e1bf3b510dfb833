//! CPU and memory sampling from procfs.
//!
//! A worker's `cpu_fraction` is CPU time over wall time for its thread (or
//! process), so one saturated core reads 1.0. The machine figure is busy
//! time over all cores.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::time::Instant;

use pipewise_core::elastic::UtilizationReport;
use pipewise_core::topology::WorkerDescriptor;

/// CPU ticks and start time of one task.
#[derive(Debug, Clone, Copy)]
pub struct TaskTimes {
    pub cpu_ticks: u64,
    pub start_ticks: u64,
}

fn stat_path(pid: u32, tid: Option<i32>) -> String {
    match tid {
        Some(t) => format!("/proc/{pid}/task/{t}/stat"),
        None => format!("/proc/{pid}/stat"),
    }
}

/// Parses utime+stime and starttime out of a `stat` line. The command name
/// may contain spaces and parentheses, so fields are counted from the last
/// `)`.
pub fn parse_task_stat(line: &str) -> Option<TaskTimes> {
    let rest = &line[line.rfind(')')? + 1..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    // f[0] is field 3 (state).
    let utime: u64 = f.get(11)?.parse().ok()?;
    let stime: u64 = f.get(12)?.parse().ok()?;
    let start: u64 = f.get(19)?.parse().ok()?;
    Some(TaskTimes { cpu_ticks: utime + stime, start_ticks: start })
}

pub fn read_task(pid: u32, tid: Option<i32>) -> io::Result<TaskTimes> {
    let path = stat_path(pid, tid);
    let text = fs::read_to_string(&path)?;
    parse_task_stat(&text).ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("unparsable {path}")))
}

/// `(busy, total)` jiffies from the aggregate line of `/proc/stat`.
pub fn parse_proc_stat(text: &str) -> Option<(u64, u64)> {
    let line = text.lines().find(|l| l.starts_with("cpu "))?;
    let v: Vec<u64> = line.split_whitespace().skip(1).filter_map(|x| x.parse().ok()).collect();
    if v.len() < 4 {
        return None;
    }
    // guest time is already counted in user.
    let total: u64 = v.iter().take(8).sum();
    let idle = v[3] + v.get(4).copied().unwrap_or(0);
    Some((total - idle, total))
}

fn read_machine() -> io::Result<(u64, u64)> {
    parse_proc_stat(&fs::read_to_string("/proc/stat")?).ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "unparsable /proc/stat"))
}

fn uptime_s() -> io::Result<f64> {
    let text = fs::read_to_string("/proc/uptime")?;
    text.split_whitespace().next().and_then(|s| s.parse().ok()).ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "unparsable /proc/uptime"))
}

pub fn rss_bytes(pid: u32) -> io::Result<u64> {
    let text = fs::read_to_string(format!("/proc/{pid}/statm"))?;
    let pages: u64 = text.split_whitespace().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok(pages * page_size())
}

fn clock_ticks() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 { t as f64 } else { 100.0 }
}

fn page_size() -> u64 {
    // SAFETY: as above.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 { p as u64 } else { 4096 }
}

type Key = (u32, Option<i32>);

/// Keeps the previous sample per task so each report covers the time since
/// the last probe.
pub struct Probe {
    machine_id: String,
    ticks: f64,
    tasks: HashMap<Key, (u64, Instant)>,
    machine: Option<(u64, u64, Instant)>,
}

impl Probe {
    pub fn new(machine_id: &str) -> Self {
        Self { machine_id: machine_id.into(), ticks: clock_ticks(), tasks: HashMap::new(), machine: None }
    }

    /// CPU fraction of one task since the previous call, or since it started
    /// on first sight. Returns `(fraction, window_s)`.
    pub fn task_cpu(&mut self, pid: u32, tid: Option<i32>) -> io::Result<(f64, f64)> {
        let t = read_task(pid, tid)?;
        let now = Instant::now();
        let key = (pid, tid);
        let out = match self.tasks.get(&key) {
            Some(&(prev, at)) => {
                let wall = now.duration_since(at).as_secs_f64();
                let used = t.cpu_ticks.saturating_sub(prev) as f64 / self.ticks;
                (if wall > 0.0 { used / wall } else { 0.0 }, wall)
            }
            None => {
                let wall = uptime_s()? - t.start_ticks as f64 / self.ticks;
                let used = t.cpu_ticks as f64 / self.ticks;
                (if wall > 0.0 { used / wall } else { 0.0 }, wall.max(0.0))
            }
        };
        self.tasks.insert(key, (t.cpu_ticks, now));
        Ok((out.0.clamp(0.0, 1.0), out.1))
    }

    pub fn machine_cpu(&mut self) -> io::Result<(f64, f64)> {
        let (busy, total) = read_machine()?;
        let now = Instant::now();
        let out = match self.machine {
            Some((b0, t0, at)) if total > t0 => ((busy.saturating_sub(b0)) as f64 / (total - t0) as f64, now.duration_since(at).as_secs_f64()),
            Some((_, _, at)) => (0.0, now.duration_since(at).as_secs_f64()),
            None if total > 0 => (busy as f64 / total as f64, 0.0),
            None => (0.0, 0.0),
        };
        self.machine = Some((busy, total, now));
        Ok(out)
    }

    /// One report for the machine and one per target. Targets that could
    /// not be sampled come back as errors.
    pub fn sample(&mut self, targets: &[(WorkerDescriptor, u32, Option<i32>)], now_us: i64) -> (Vec<UtilizationReport>, Vec<String>) {
        let mut reports = Vec::new();
        let mut errors = Vec::new();
        match self.machine_cpu() {
            Ok((cpu, window)) => reports.push(UtilizationReport {
                machine_id: self.machine_id.clone(),
                worker_id: None,
                stage_name: None,
                cpu_fraction: cpu,
                rss_bytes: rss_bytes(std::process::id()).unwrap_or(0),
                window_s: window,
                sampled_at: now_us,
            }),
            Err(e) => errors.push(format!("machine: {e}")),
        }
        for (desc, pid, tid) in targets {
            match self.task_cpu(*pid, *tid) {
                Ok((cpu, window)) => reports.push(UtilizationReport {
                    machine_id: self.machine_id.clone(),
                    worker_id: Some(desc.worker_id.clone()),
                    stage_name: Some(desc.stage_name.clone()),
                    cpu_fraction: cpu,
                    // Thread workers share the agent's address space.
                    rss_bytes: rss_bytes(*pid).unwrap_or(0),
                    window_s: window,
                    sampled_at: now_us,
                }),
                Err(e) => errors.push(format!("{}: {e}", desc.worker_id)),
            }
        }
        let live: Vec<Key> = targets.iter().map(|(_, p, t)| (*p, *t)).collect();
        self.tasks.retain(|k, _| live.contains(k));
        (reports, errors)
    }
}
