use std::time::{SystemTime, UNIX_EPOCH};

/// Wall-clock time in epoch microseconds.
pub fn now_us() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as i64)
}
