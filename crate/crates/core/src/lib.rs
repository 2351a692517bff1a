//! Load balancing for heterogeneous clusters by proportional work
//! partitioning.
//!
//! A coordinator keeps a heartbeat-fed performance table and splits each
//! job into integer row allotments in proportion to every provider's
//! recent effective speed. Providers compute their rows and send results
//! straight to the client. A virtual-clock simulator compares the scheme
//! with an equal split and with the closed-form speedup prediction.

pub mod cli;
pub mod client;
pub mod config;
pub mod coordinator;
pub mod error;
pub mod logging;
pub mod matmul;
pub mod perf_model;
pub mod provider;
pub mod scheduler;
pub mod sim;
pub mod transport;

pub use error::{Error, Result};
