//! Shared domain types: model shape, hardware, and neuron placement.

mod hardware;
mod placement;
pub mod presets;
mod shape;

pub use hardware::{DimmConfig, GpuConfig, HardwareConfig};
pub use placement::{validate_placement, NeuronPlacement, PlacementMeta, Violation};
pub use shape::{fingerprint_of, BlockKind, ModelShape, NeuronRef, TokenCounts, BYTES_PER_ELEMENT};
