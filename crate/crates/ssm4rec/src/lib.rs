//! Sequential recommendation with a selective state-space backbone.
//!
//! The crate builds everything from first principles on a small tape-based
//! autodiff engine: the zero-order-hold discretized selective SSM, the
//! gated block around it, the recommendation model (embeddings, position-
//! wise feed-forward, tied-embedding scoring), the data pipeline for
//! implicit-feedback logs, training with Adam and early stopping, and
//! top-k ranking evaluation.
//!
//! Entry points: the `examples/` directory exercises each capability; the
//! thin `ssm4rec` binary exposes `prepare`, `train`, `eval`, `bench`, and
//! `ablate` subcommands.

pub mod block;
pub mod checkpoint;
pub mod attention;
pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod ssm;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
