//! Federated training runtime around `fedrt-core`: FLRT framing, RTFD
//! dataset files, in-process and TCP transports, the orchestrator and
//! client state machines, and the experiment harness behind the `fedrt` CLI.

pub mod client;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod orchestrator;
pub mod transport;
pub mod wire;

pub use error::{FedError, FedResult};
