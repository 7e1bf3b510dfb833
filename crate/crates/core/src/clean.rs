//! Raw stream cleaning: ordering, de-duplication, robust outlier replacement
//! and gap detection.
//!
//! Outliers are samples with `|x - median| > k * 1.4826 * MAD` over the whole
//! segment; each is replaced by the median of the centered window around it
//! (truncated at the edges). Replacement shifts the global median and MAD, so
//! the outlier pass repeats until no value changes, which makes `clean`
//! idempotent. Gaps are reported, never filled.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::moments::median_in_place;
use crate::segment::{Channel, StreamSegment};

/// Scale from MAD to a normal-consistent standard deviation.
pub const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanParams {
    pub outlier_sigmas: f64,
    /// Odd window length for replacement medians.
    pub window: usize,
    /// A gap is any spacing larger than this many nominal sample periods.
    pub gap_factor: f64,
    pub max_outlier_passes: usize,
}

impl Default for CleanParams {
    fn default() -> Self {
        Self { outlier_sigmas: 5.0, window: 11, gap_factor: 1.5, max_outlier_passes: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub start_us: i64,
    pub end_us: i64,
}

impl Gap {
    pub fn duration_s(&self) -> f64 {
        (self.end_us - self.start_us) as f64 / 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub cycle_id: String,
    pub channel: Channel,
    pub duplicates_removed: usize,
    pub outliers_clipped: usize,
    /// Spacing between consecutive kept samples that exceeded the gap rule.
    pub gaps: Vec<Gap>,
    /// True when the input was out of timestamp order.
    pub sorted: bool,
    /// MAD was zero, so the outlier step was skipped.
    #[serde(default)]
    pub mad_degenerate: bool,
    #[serde(default)]
    pub samples_out: usize,
}

impl CleanReport {
    pub fn for_cycle(mut self, cycle_id: impl Into<String>) -> Self {
        self.cycle_id = cycle_id.into();
        self
    }

    /// Expected-but-absent samples implied by the gaps at `rate_hz`.
    pub fn missing_samples(&self, rate_hz: u32) -> f64 {
        self.gaps
            .iter()
            .map(|g| (g.duration_s() * rate_hz as f64 - 1.0).max(0.0))
            .sum()
    }

    pub fn max_gap_s(&self) -> f64 {
        self.gaps.iter().map(Gap::duration_s).fold(0.0, f64::max)
    }
}

pub fn clean(segment: &StreamSegment, params: &CleanParams) -> (StreamSegment, CleanReport) {
    let n = segment.values.len();
    let timestamps = segment.timestamps();

    let mut order: Vec<usize> = (0..n).collect();
    let needs_sort = timestamps.windows(2).any(|w| w[1] < w[0]);
    if needs_sort {
        // Stable, so the first occurrence of a repeated timestamp stays first.
        order.sort_by_key(|&i| timestamps[i]);
    }

    let mut ts = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut duplicates_removed = 0;
    for &i in &order {
        if ts.last() == Some(&timestamps[i]) {
            duplicates_removed += 1;
            continue;
        }
        ts.push(timestamps[i]);
        values.push(segment.values[i]);
    }

    let (outliers_clipped, mad_degenerate) = replace_outliers(&mut values, params);

    let nominal_us = 1e6 / segment.rate_hz as f64;
    let gaps: Vec<Gap> = ts
        .windows(2)
        .filter(|w| (w[1] - w[0]) as f64 > params.gap_factor * nominal_us)
        .map(|w| Gap { start_us: w[0], end_us: w[1] })
        .collect();

    let regular = segment.explicit_timestamps.is_none() && !needs_sort && duplicates_removed == 0 && gaps.is_empty();
    let cleaned = StreamSegment {
        device_id: segment.device_id.clone(),
        channel: segment.channel,
        stream_kind: segment.stream_kind,
        start_us: ts.first().copied().unwrap_or(segment.start_us),
        rate_hz: segment.rate_hz,
        explicit_timestamps: if regular { None } else { Some(ts) },
        values,
    };
    let report = CleanReport {
        cycle_id: String::new(),
        channel: segment.channel,
        duplicates_removed,
        outliers_clipped,
        gaps,
        sorted: needs_sort,
        mad_degenerate,
        samples_out: cleaned.values.len(),
    };
    (cleaned, report)
}

/// Returns (number of distinct samples changed, MAD was degenerate).
fn replace_outliers(values: &mut [f64], params: &CleanParams) -> (usize, bool) {
    if values.is_empty() {
        return (0, false);
    }
    let half = params.window / 2;
    let mut changed = alloc::vec![false; values.len()];
    let mut scratch = Vec::with_capacity(values.len());
    let mut window_buf = Vec::with_capacity(params.window);
    let mut degenerate = false;
    for pass in 0..params.max_outlier_passes {
        scratch.clear();
        scratch.extend_from_slice(values);
        let med = median_in_place(&mut scratch);
        for (d, &x) in scratch.iter_mut().zip(values.iter()) {
            *d = (x - med).abs();
        }
        let mad = median_in_place(&mut scratch);
        if mad <= 0.0 {
            degenerate = pass == 0;
            break;
        }
        let limit = params.outlier_sigmas * MAD_TO_SIGMA * mad;
        let flagged: Vec<usize> = (0..values.len()).filter(|&i| (values[i] - med).abs() > limit).collect();
        // Window medians come from the values as they stood at the start of
        // the pass, not from replacements made earlier in the same pass.
        let snapshot: &[f64] = &window_medians(values, &mut window_buf, &flagged, half);
        let mut any = false;
        for (&i, &replacement) in flagged.iter().zip(snapshot) {
            if replacement != values[i] {
                values[i] = replacement;
                changed[i] = true;
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    (changed.iter().filter(|&&c| c).count(), degenerate)
}

fn window_medians(values: &[f64], window_buf: &mut Vec<f64>, flagged: &[usize], half: usize) -> Vec<f64> {
    flagged
        .iter()
        .map(|&i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            window_buf.clear();
            window_buf.extend_from_slice(&values[lo..hi]);
            median_in_place(window_buf)
        })
        .collect()
}
