//! Std runtime for the pipewise pipeline: sockets, threads, files and
//! the HTTP surfaces around the deterministic core in `pipewise-core`.

pub mod api;
pub mod clock;
pub mod dataset;
pub mod http;
pub mod ingest;
pub mod messaging;
pub mod monitor;
pub mod pdm;
pub mod pipeline;
pub mod sim;
pub mod stack;
pub mod storage;
pub mod wire;
