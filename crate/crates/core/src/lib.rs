//! Allocation-only building blocks for the pipewise IoT analytics pipeline.
//!
//! Everything in this crate is deterministic and free of IO: the broker queue
//! state machine and its wire frames, the MQTT 3.1.1 subset codec, stream
//! cleaning, moment and spectral statistics, the 79-value feature catalog,
//! decision tree / random forest / linear SVM classifiers, the appliance
//! simulator, min/max plot decimation and the elasticity decision rule.
//!
//! The `pipewise` crate wraps these pieces with sockets, files, threads and a
//! command line.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod batch;
pub mod broker;
pub mod clean;
pub mod cycle;
pub mod decimate;
pub mod elastic;
pub mod features;
pub mod fft;
pub mod frame;
pub mod ml;
pub mod moments;
pub mod mqtt;
pub mod rng;
pub mod segment;
pub mod sim;
pub mod spectrum;
pub mod topology;
pub mod volume;

pub use batch::{CycleNotification, SampleBatch};
pub use broker::{Broker, BrokerConfig, BrokerError, Delivery, Message, QueueStats};
pub use segment::{Channel, StreamKind, StreamSegment};
