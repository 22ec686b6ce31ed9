//! Small multimodal transformers in pure Rust: a reverse-mode autodiff tape,
//! a decoder LM that fuses visual features inside attention, a projector
//! baseline, synthetic visual tasks and a deterministic trainer.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
