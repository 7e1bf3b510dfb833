//! Blocking IO for length-prefixed JSON frames.

use std::io::{self, Read, Write};

use pipewise_core::frame::{encode_json, frame_len, FrameError, LEN_PREFIX};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Reads one frame. `Ok(None)` on a clean EOF before the length prefix.
pub fn read_json<T: DeserializeOwned>(r: &mut impl Read) -> io::Result<Option<T>> {
    let mut prefix = [0u8; LEN_PREFIX];
    match r.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let total = frame_len(&prefix).map_err(invalid)?;
    let mut body = vec![0u8; total - LEN_PREFIX];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map(Some).map_err(|e| invalid(FrameError::Malformed(e.to_string())))
}

pub fn write_json<T: Serialize>(w: &mut impl Write, value: &T) -> io::Result<()> {
    w.write_all(&encode_json(value))?;
    w.flush()
}

fn invalid(e: FrameError) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}
