//! The 79-value per-cycle feature catalog.
//!
//! | group | count |
//! |---|---|
//! | 9 time-domain statistics for slow power, fast current, fast vibration | 27 |
//! | 16 band energies + 4 spectral summaries for fast current and vibration | 40 |
//! | cycle-level bookkeeping | 12 |
//!
//! Names are `<signal>.<feature>` (e.g. `vibration_fast.rms`,
//! `current_fast.band_09`, `cycle.energy_wh`) and their order is fixed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clean::CleanReport;
use crate::moments::{MomentsError, TimeStats};
use crate::segment::StreamSegment;
use crate::spectrum::{spectrum_features, SpectrumError, N_BANDS};

pub const FEATURE_COUNT: usize = 79;

pub const TIME_SIGNALS: [&str; 3] = ["power_slow", "current_fast", "vibration_fast"];
pub const SPECTRAL_SIGNALS: [&str; 2] = ["current_fast", "vibration_fast"];
pub const SPECTRAL_SUMMARIES: [&str; 4] = ["dominant_freq_hz", "dominant_magnitude", "spectral_centroid_hz", "spectral_entropy"];
pub const CYCLE_FEATURES: [&str; 12] = [
    "duration_s",
    "energy_wh",
    "slow_samples",
    "current_samples",
    "vibration_samples",
    "slow_gaps",
    "fast_gaps",
    "max_gap_s",
    "gap_ratio",
    "outliers_clipped",
    "duplicates_removed",
    "peak_power_time_frac",
];

/// Feature names in catalog order.
pub fn catalog() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_COUNT);
    for signal in TIME_SIGNALS {
        for stat in TimeStats::NAMES {
            names.push(format!("{signal}.{stat}"));
        }
    }
    for signal in SPECTRAL_SIGNALS {
        for b in 0..N_BANDS {
            names.push(format!("{signal}.band_{b:02}"));
        }
        for s in SPECTRAL_SUMMARIES {
            names.push(format!("{signal}.{s}"));
        }
    }
    for c in CYCLE_FEATURES {
        names.push(format!("cycle.{c}"));
    }
    names
}

pub fn index_of(name: &str) -> Option<usize> {
    catalog().iter().position(|n| n == name)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("{signal}: {source}")]
    Moments { signal: &'static str, source: MomentsError },
    #[error("{signal}: {source}")]
    Spectrum { signal: &'static str, source: SpectrumError },
    #[error("expected {FEATURE_COUNT} features, got {0}")]
    Length(usize),
    #[error("feature names do not match the catalog")]
    Names,
    #[error("feature `{0}` is not finite")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub cycle_id: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.values.len() != FEATURE_COUNT || self.names.len() != FEATURE_COUNT {
            return Err(FeatureError::Length(self.values.len()));
        }
        if self.names != catalog() {
            return Err(FeatureError::Names);
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite(self.names[i].clone()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Cleaned signals and reports for one cycle.
#[derive(Debug, Clone, Copy)]
pub struct CycleSignals<'a> {
    pub cycle_id: &'a str,
    pub start_us: i64,
    pub end_us: i64,
    pub power: &'a StreamSegment,
    pub current: &'a StreamSegment,
    pub vibration: &'a StreamSegment,
    /// Reports for power, current and vibration, in that order.
    pub reports: [&'a CleanReport; 3],
}

pub fn extract_features(cycle: &CycleSignals<'_>) -> Result<FeatureVector, FeatureError> {
    let mut values = Vec::with_capacity(FEATURE_COUNT);
    for (signal, seg) in TIME_SIGNALS.into_iter().zip([cycle.power, cycle.current, cycle.vibration]) {
        let stats = TimeStats::compute(&seg.values).map_err(|source| FeatureError::Moments { signal, source })?;
        values.extend_from_slice(&stats.to_array());
    }
    for (signal, seg) in SPECTRAL_SIGNALS.into_iter().zip([cycle.current, cycle.vibration]) {
        let spec = spectrum_features(&seg.values, seg.rate_hz as f64)
            .map_err(|source| FeatureError::Spectrum { signal, source })?;
        values.extend(spec.to_vec());
    }
    values.extend_from_slice(&cycle_level(cycle));

    let fv = FeatureVector { cycle_id: cycle.cycle_id.into(), names: catalog(), values };
    fv.validate()?;
    Ok(fv)
}

fn cycle_level(cycle: &CycleSignals<'_>) -> [f64; 12] {
    let duration_s = (cycle.end_us - cycle.start_us) as f64 / 1e6;
    let [power_rep, current_rep, vibration_rep] = cycle.reports;

    let power_ts = cycle.power.timestamps();
    let energy_wh = power_ts
        .windows(2)
        .zip(cycle.power.values.windows(2))
        .map(|(t, p)| 0.5 * (p[0] + p[1]) * (t[1] - t[0]) as f64 / 1e6)
        .sum::<f64>()
        / 3600.0;

    let segs = [cycle.power, cycle.current, cycle.vibration];
    let expected: f64 = segs.iter().map(|s| duration_s * s.rate_hz as f64).sum();
    let missing: f64 = segs
        .iter()
        .map(|s| (duration_s * s.rate_hz as f64 - s.len() as f64).max(0.0))
        .sum();
    let gap_ratio = if expected > 0.0 { (missing / expected).min(1.0) } else { 0.0 };

    let max_gap_s = cycle.reports.iter().map(|r| r.max_gap_s()).fold(0.0, f64::max);

    let peak_power_time_frac = cycle
        .power
        .values
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| {
            let span = (cycle.end_us - cycle.start_us) as f64;
            ((power_ts[i] - cycle.start_us) as f64 / span).clamp(0.0, 1.0)
        })
        .unwrap_or(0.0);

    [
        duration_s,
        energy_wh,
        cycle.power.len() as f64,
        cycle.current.len() as f64,
        cycle.vibration.len() as f64,
        power_rep.gaps.len() as f64,
        (current_rep.gaps.len() + vibration_rep.gaps.len()) as f64,
        max_gap_s,
        gap_ratio,
        cycle.reports.iter().map(|r| r.outliers_clipped).sum::<usize>() as f64,
        cycle.reports.iter().map(|r| r.duplicates_removed).sum::<usize>() as f64,
        peak_power_time_frac,
    ]
}
