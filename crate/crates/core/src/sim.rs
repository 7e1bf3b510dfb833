//! Washing-machine cycle generator with injectable bearing and heating faults.
//!
//! Signal model, per phase:
//! * power (1 Hz): phase base power times a per-cycle load factor, plus
//!   Gaussian noise;
//! * current: power / 230 V plus a 50 Hz motor harmonic while the drum turns,
//!   plus a little noise;
//! * vibration: drum-frequency sinusoid, 50 Hz motor component and a Gaussian
//!   floor.
//!
//! A bearing fault adds a 137 Hz sinusoid whose amplitude grows with severity
//! and raises the vibration floor by `1 + severity`. A heating fault scales
//! heat-phase power by `1 - 0.4 * severity` and stretches the heat phase by
//! `1 + severity`.
//!
//! Each signal draws from its own generator stream, so a fault never shifts
//! the noise sequence of another signal: for one seed, a faulty cycle and a
//! healthy one share their noise.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{splitmix64, XorShift64Star};
use crate::segment::{is_valid_fast_rate, Channel, StreamKind, StreamSegment, DEFAULT_FAST_RATE_HZ};

pub const MAINS_VOLTAGE: f64 = 230.0;
pub const MOTOR_HZ: f64 = 50.0;
pub const BEARING_HZ: f64 = 137.0;
pub const BEARING_AMPLITUDE_G: f64 = 0.3;
pub const VIBRATION_FLOOR_G: f64 = 0.02;
pub const HEAT_PHASE: &str = "heat";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub duration_s: f64,
    pub base_power_w: f64,
    pub power_noise_w: f64,
    /// Zero when the drum is still.
    pub drum_hz: f64,
    pub vibration_rms_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceProfile {
    pub name: String,
    pub phases: Vec<Phase>,
}

fn phase(name: &str, duration_s: f64, base_power_w: f64, power_noise_w: f64, drum_hz: f64, vibration_rms_g: f64) -> Phase {
    Phase { name: name.into(), duration_s, base_power_w, power_noise_w, drum_hz, vibration_rms_g }
}

impl ApplianceProfile {
    pub fn washing_machine() -> Self {
        Self {
            name: "washing_machine".into(),
            phases: alloc::vec![
                phase("fill", 120.0, 60.0, 5.0, 0.0, 0.0),
                phase(HEAT_PHASE, 600.0, 2000.0, 40.0, 0.8, 0.05),
                phase("wash", 1200.0, 400.0, 30.0, 0.8, 0.3),
                phase("rinse", 600.0, 300.0, 25.0, 0.8, 0.25),
                phase("spin", 300.0, 600.0, 50.0, 20.0, 1.5),
            ],
        }
    }

    pub fn total_duration_s(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }
}

impl Default for ApplianceProfile {
    fn default() -> Self {
        Self::washing_machine()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    None,
    BearingFault,
    HeatingFault,
}

impl FaultKind {
    pub fn label(self) -> &'static str {
        match self {
            FaultKind::None => "normal",
            FaultKind::BearingFault => "bearing_fault",
            FaultKind::HeatingFault => "heating_fault",
        }
    }

    pub const ALL: [FaultKind; 3] = [FaultKind::None, FaultKind::BearingFault, FaultKind::HeatingFault];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultMode {
    pub kind: FaultKind,
    pub severity: f64,
}

impl FaultMode {
    pub const NONE: FaultMode = FaultMode { kind: FaultKind::None, severity: 0.0 };

    pub fn bearing(severity: f64) -> Self {
        Self { kind: FaultKind::BearingFault, severity }
    }

    pub fn heating(severity: f64) -> Self {
        Self { kind: FaultKind::HeatingFault, severity }
    }

    fn severity_of(&self, kind: FaultKind) -> f64 {
        if self.kind == kind {
            self.severity
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub fast_rate_hz: u32,
    /// Multiplies every phase duration.
    pub duration_scale: f64,
    /// Playback speed relative to real time.
    pub speedup: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { seed: 0, fast_rate_hz: DEFAULT_FAST_RATE_HZ, duration_scale: 1.0, speedup: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("fast rate {0} Hz is not a power of two in [128, 16384]")]
    FastRate(u32),
    #[error("duration scale and speedup must be positive")]
    Scale,
    #[error("fault severity must be in (0, 1]")]
    Severity,
    #[error("phase durations must be positive")]
    Phase,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !is_valid_fast_rate(self.fast_rate_hz) {
            return Err(SimError::FastRate(self.fast_rate_hz));
        }
        if !(self.duration_scale > 0.0 && self.speedup > 0.0) {
            return Err(SimError::Scale);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCycle {
    pub start_us: i64,
    pub end_us: i64,
    /// (phase name, duration in seconds) after scaling and faults.
    pub phases: Vec<(String, f64)>,
    pub power: StreamSegment,
    pub current: StreamSegment,
    pub vibration: StreamSegment,
}

/// Phase durations after duration scaling and any heating fault.
pub fn phase_durations(profile: &ApplianceProfile, fault: &FaultMode, config: &SimConfig) -> Vec<(String, f64)> {
    let heat_stretch = 1.0 + fault.severity_of(FaultKind::HeatingFault);
    profile
        .phases
        .iter()
        .map(|p| {
            let mut d = p.duration_s * config.duration_scale;
            if p.name == HEAT_PHASE {
                d *= heat_stretch;
            }
            (p.name.clone(), d)
        })
        .collect()
}

// Stream selectors mixed into the seed.
const POWER_STREAM: u64 = 0x706f_7765_72;
const CURRENT_STREAM: u64 = 0x6375_7272;
const VIBRATION_STREAM: u64 = 0x7669_6272;
const CYCLE_STREAM: u64 = 0x6379_636c;

fn stream(seed: u64, selector: u64) -> XorShift64Star {
    XorShift64Star::new(splitmix64(seed) ^ selector)
}

struct PhaseClock<'a> {
    ends: Vec<f64>,
    phases: &'a [Phase],
    at: usize,
}

impl<'a> PhaseClock<'a> {
    fn new(phases: &'a [Phase], durations: &[(String, f64)]) -> Self {
        let mut acc = 0.0;
        let ends = durations
            .iter()
            .map(|(_, d)| {
                acc += d;
                acc
            })
            .collect();
        Self { ends, phases, at: 0 }
    }

    /// Phase active at `t` seconds; `t` must not decrease between calls.
    fn at(&mut self, t: f64) -> &'a Phase {
        while self.at + 1 < self.ends.len() && t >= self.ends[self.at] {
            self.at += 1;
        }
        &self.phases[self.at]
    }
}

pub fn generate_cycle(
    profile: &ApplianceProfile,
    fault: &FaultMode,
    config: &SimConfig,
    device_id: &str,
    start_us: i64,
) -> Result<GeneratedCycle, SimError> {
    config.validate()?;
    if fault.kind != FaultKind::None && !(fault.severity > 0.0 && fault.severity <= 1.0) {
        return Err(SimError::Severity);
    }
    if profile.phases.is_empty() || profile.phases.iter().any(|p| !(p.duration_s > 0.0)) {
        return Err(SimError::Phase);
    }
    let durations = phase_durations(profile, fault, config);
    let total_s: f64 = durations.iter().map(|(_, d)| d).sum();
    let rate = config.fast_rate_hz;
    let n_slow = (libm::round(total_s) as usize).max(1);
    let n_fast = libm::round(total_s * rate as f64) as usize;

    let load = stream(config.seed, CYCLE_STREAM).uniform(0.9, 1.1);
    let heat_factor = 1.0 - 0.4 * fault.severity_of(FaultKind::HeatingFault);
    let bearing = fault.severity_of(FaultKind::BearingFault);

    let mut rng = stream(config.seed, POWER_STREAM);
    let mut clock = PhaseClock::new(&profile.phases, &durations);
    let power: Vec<f64> = (0..n_slow)
        .map(|j| {
            let p = clock.at(j as f64);
            let mut base = p.base_power_w * load;
            if p.name == HEAT_PHASE {
                base *= heat_factor;
            }
            (base + rng.normal(0.0, p.power_noise_w)).max(0.0)
        })
        .collect();

    let mut rng = stream(config.seed, CURRENT_STREAM);
    let mut clock = PhaseClock::new(&profile.phases, &durations);
    let current: Vec<f64> = (0..n_fast)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let p = clock.at(t);
            let watts = power[(t as usize).min(n_slow - 1)];
            let motor = if p.drum_hz > 0.0 { 0.5 * load * libm::sin(2.0 * PI * MOTOR_HZ * t) } else { 0.0 };
            watts / MAINS_VOLTAGE + motor + rng.normal(0.0, 0.01)
        })
        .collect();

    let mut rng = stream(config.seed, VIBRATION_STREAM);
    let mut clock = PhaseClock::new(&profile.phases, &durations);
    let floor = VIBRATION_FLOOR_G * (1.0 + bearing);
    let vibration: Vec<f64> = (0..n_fast)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let p = clock.at(t);
            let mut v = rng.normal(0.0, floor);
            if p.drum_hz > 0.0 {
                let a = p.vibration_rms_g * load;
                v += 0.9 * SQRT_2 * a * libm::sin(2.0 * PI * p.drum_hz * t);
                v += 0.1 * SQRT_2 * a * libm::sin(2.0 * PI * MOTOR_HZ * t);
            }
            if bearing > 0.0 {
                v += BEARING_AMPLITUDE_G * bearing * libm::sin(2.0 * PI * BEARING_HZ * t);
            }
            v
        })
        .collect();

    let end_us = start_us + libm::round(total_s * 1e6) as i64;
    let slow_ts: Vec<i64> = (0..n_slow as i64).map(|j| start_us + j * 1_000_000).collect();
    let mut power_seg = StreamSegment::regular(device_id, Channel::Power, StreamKind::Slow, start_us, 1, power);
    power_seg.explicit_timestamps = Some(slow_ts);
    Ok(GeneratedCycle {
        start_us,
        end_us,
        phases: durations,
        power: power_seg,
        current: StreamSegment::regular(device_id, Channel::Current, StreamKind::Fast, start_us, rate, current),
        vibration: StreamSegment::regular(device_id, Channel::Vibration, StreamKind::Fast, start_us, rate, vibration),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub cycle_id: String,
    pub label: String,
    pub fault: FaultMode,
    pub seed: u64,
}

/// `n_per_class` cycles of each class, interleaved normal / bearing /
/// heating, with severities uniform in [0.3, 1.0].
pub fn plan_dataset(n_per_class: usize, seed: u64) -> Vec<DatasetEntry> {
    let mut rng = XorShift64Star::new(seed);
    let mut out = Vec::with_capacity(3 * n_per_class);
    for i in 0..n_per_class {
        for kind in FaultKind::ALL {
            let severity = rng.uniform(0.3, 1.0);
            let cycle_seed = rng.next_u64();
            let fault = match kind {
                FaultKind::None => FaultMode::NONE,
                _ => FaultMode { kind, severity },
            };
            out.push(DatasetEntry {
                cycle_id: alloc::format!("{}-{i:04}", kind.label()),
                label: kind.label().into(),
                fault,
                seed: cycle_seed,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::TimeStats;

    fn short() -> SimConfig {
        SimConfig { seed: 7, fast_rate_hz: 2048, duration_scale: 120.0 / 2820.0, speedup: 1.0 }
    }

    #[test]
    fn deterministic() {
        let a = generate_cycle(&ApplianceProfile::default(), &FaultMode::bearing(0.5), &short(), "wm-01", 0).unwrap();
        let b = generate_cycle(&ApplianceProfile::default(), &FaultMode::bearing(0.5), &short(), "wm-01", 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_counts() {
        let c = generate_cycle(&ApplianceProfile::default(), &FaultMode::NONE, &short(), "wm-01", 5).unwrap();
        assert_eq!(c.current.len(), 245_760);
        assert_eq!(c.vibration.len(), 245_760);
        assert_eq!(c.power.len(), 120);
        assert_eq!(c.end_us - c.start_us, 120_000_000);
    }

    #[test]
    fn bearing_raises_vibration_rms() {
        let p = ApplianceProfile::default();
        let base = generate_cycle(&p, &FaultMode::NONE, &short(), "d", 0).unwrap();
        let bad = generate_cycle(&p, &FaultMode::bearing(0.5), &short(), "d", 0).unwrap();
        let rms = |s: &StreamSegment| TimeStats::compute(&s.values).unwrap().rms;
        assert!(rms(&bad.vibration) > rms(&base.vibration));
        assert_eq!(base.power, bad.power);
    }

    #[test]
    fn heating_stretches_heat_phase_exactly() {
        let p = ApplianceProfile::default();
        let cfg = SimConfig::default();
        let d = phase_durations(&p, &FaultMode::heating(0.75), &cfg);
        assert_eq!(d[1], (HEAT_PHASE.into(), 600.0 * 1.75));
        assert_eq!(d[2].1, 1200.0);
    }

    #[test]
    fn dataset_plan_counts() {
        let plan = plan_dataset(100, 42);
        assert_eq!(plan.len(), 300);
        for kind in FaultKind::ALL {
            assert_eq!(plan.iter().filter(|e| e.label == kind.label()).count(), 100);
        }
        assert!(plan.iter().filter(|e| e.fault.kind != FaultKind::None).all(|e| (0.3..=1.0).contains(&e.fault.severity)));
        assert_eq!(plan, plan_dataset(100, 42));
    }

    #[test]
    fn invalid_inputs() {
        let bad = SimConfig { fast_rate_hz: 1000, ..SimConfig::default() };
        assert_eq!(generate_cycle(&ApplianceProfile::default(), &FaultMode::NONE, &bad, "d", 0).unwrap_err(), SimError::FastRate(1000));
        assert_eq!(
            generate_cycle(&ApplianceProfile::default(), &FaultMode::bearing(1.5), &short(), "d", 0).unwrap_err(),
            SimError::Severity
        );
    }
}
