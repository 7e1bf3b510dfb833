//! Back-of-envelope size of one cycle's staged CSV files.

/// Typical fast-file line: a value such as `-0.0123456` plus newline.
pub const AVG_FAST_LINE_BYTES: f64 = 9.0;
/// Typical slow-file line: `1700000000000000,1234.56789` plus newline.
pub const AVG_SLOW_LINE_BYTES: f64 = 28.0;

pub fn estimate_cycle_bytes(duration_s: f64, fast_rate_hz: f64, n_fast_channels: u32, slow_channels: u32) -> f64 {
    duration_s * fast_rate_hz * n_fast_channels as f64 * AVG_FAST_LINE_BYTES
        + duration_s * slow_channels as f64 * AVG_SLOW_LINE_BYTES
}
