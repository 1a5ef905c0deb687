//! Desk-scale federated segmentation simulator.
//!
//! K simulated clients fine-tune a small encoder-decoder segmentation network
//! with evidential-uncertainty-guided local training, client-specific feature
//! embeddings, and uncertainty-weighted global aggregation, with a FedAvg
//! baseline for comparison. Everything runs in-process on synthetic data and
//! is bit-deterministic under a fixed seed.

pub mod cfe;
pub mod error;
pub mod evidential;
pub mod model;
pub mod rng;
pub mod special;
pub mod tensor;

pub use error::{Error, Result};
