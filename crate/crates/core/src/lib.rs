//! Numerical core for federated structure-name standardisation.
//!
//! Everything in this crate is a pure function over explicit state: dense
//! tensors and the handful of layer kinds the fusion network needs, the
//! network builders and local training loop, the synthetic phantom
//! generator with its feature extractors, server-side aggregation
//! strategies and an exact t-SNE. There is no IO here; file formats,
//! transports and the CLI live in the `fedrt` crate.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod aggregate;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod tsne;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Number of structure classes in the standard configuration.
pub const NUM_CLASSES: usize = 7;

/// Class names, in label-index order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "GTV-1",
    "Spinal-Cord",
    "Esophagus",
    "Lung-Left",
    "Lung-Right",
    "Heart",
    "Lungs-Total",
];
