//! Fine-grained face-retouching detection toolkit.
//!
//! The crate bundles a small 64-bit autodiff substrate, the multi-granularity
//! token-clustering attention model built on top of it, the four-head
//! level-classification objective, the TP/TN/AC evaluation indicators, the
//! lossy-operation augmentation protocol, and manifest tooling for the
//! dataset layout, plus a synthetic four-factor task for desk-scale runs.

pub mod augment;
pub mod backbone;
pub mod clustering;
pub mod config;
pub mod encoder;
pub mod gradcheck;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use rng::RngStream;
pub use tensor::{NumericError, Tensor};
