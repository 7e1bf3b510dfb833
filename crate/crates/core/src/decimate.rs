//! Min/max envelope decimation for plotting long streams.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::segment::{Channel, StreamSegment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub t_us: i64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub cycle_id: String,
    pub channel: Channel,
    pub points: Vec<PlotPoint>,
    pub source_count: usize,
}

/// Size of each bin when `n` samples are split into at most `n_points` bins.
pub fn bin_size(n: usize, n_points: usize) -> usize {
    assert!(n_points >= 1, "n_points must be positive");
    n.div_ceil(n_points).max(1)
}

/// Splits the segment into contiguous equal-count bins (the last may be
/// short) and keeps the first timestamp, minimum and maximum of each.
pub fn decimate(segment: &StreamSegment, cycle_id: &str, n_points: usize) -> PlotSeries {
    let size = bin_size(segment.len(), n_points);
    let points = segment
        .values
        .chunks(size)
        .enumerate()
        .map(|(b, chunk)| {
            let (min, max) = chunk
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            PlotPoint { t_us: segment.timestamp(b * size), min, max }
        })
        .collect();
    PlotSeries { cycle_id: cycle_id.into(), channel: segment.channel, points, source_count: segment.len() }
}
