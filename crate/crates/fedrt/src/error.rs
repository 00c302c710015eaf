use std::io;
use std::time::Duration;

use crate::dataset::DatasetError;
use crate::wire::WireError;

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Core(#[from] fedrt_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("timed out waiting for a message")]
    Timeout,
    #[error("centre {centre} did not answer within {after:?}")]
    Stalled { centre: String, after: Duration },
    #[error("link closed")]
    Disconnected,
    #[error("centre {centre} reported an error: {message}")]
    Client { centre: String, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("configuration: {0}")]
    Config(String),
}

pub type FedResult<T> = Result<T, FedError>;
