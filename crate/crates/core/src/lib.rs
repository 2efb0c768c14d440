//! Trace-driven simulator for LLM decoding on a GPU paired with
//! near-data-processing DIMMs.

pub mod costmodel;
pub mod engine;
pub mod error;
pub mod mapper;
pub mod model;
pub mod predictor;
pub mod scheduler;
pub mod trace;

pub use error::{Error, Result};
pub use model::{
    validate_placement, BlockKind, DimmConfig, GpuConfig, HardwareConfig, ModelShape,
    NeuronPlacement, NeuronRef, TokenCounts, Violation,
};
