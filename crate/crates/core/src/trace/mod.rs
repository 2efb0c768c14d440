//! Activation traces: synthetic generation, measurement, and the on-disk
//! format.

mod gen;
mod io;
mod stats;

pub use gen::{generate_trace, generate_trace_with_parents, PlantedParents, TraceGenConfig};
pub use io::{load_trace, save_trace, write_trace};
pub use stats::{jaccard, measure_stats, overlap_ratio, ActivationStats, Cooccurrence, MAX_DISTANCE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fingerprint_of, ModelShape, TokenCounts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub fingerprint: String,
    pub layer_sizes: Vec<u32>,
    pub tokens: TokenCounts,
    /// Target inactive fraction the trace was generated for.
    pub sparsity: f64,
}

/// Activated neurons for every token and FC layer.
///
/// Token indices run over the prompt first, then the generated tokens, as
/// one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    header: TraceHeader,
    /// `records[t][l]`: strictly increasing neuron indices.
    records: Vec<Vec<Vec<u32>>>,
}

impl ActivationTrace {
    /// Build a trace from raw records, checking every invariant.
    pub fn new(
        layer_sizes: Vec<u32>,
        tokens: TokenCounts,
        sparsity: f64,
        records: Vec<Vec<Vec<u32>>>,
    ) -> Result<Self> {
        if records.len() != tokens.total() as usize {
            return Err(Error::structural(format!(
                "{} token records for {} tokens",
                records.len(),
                tokens.total()
            )));
        }
        for (t, layers) in records.iter().enumerate() {
            if layers.len() != layer_sizes.len() {
                return Err(Error::structural(format!(
                    "token {t} has {} layers, expected {}",
                    layers.len(),
                    layer_sizes.len()
                )));
            }
            for (l, set) in layers.iter().enumerate() {
                check_set(set, layer_sizes[l]).map_err(|msg| {
                    Error::structural(format!("token {t} layer {l}: {msg}"))
                })?;
            }
        }
        let header = TraceHeader {
            fingerprint: fingerprint_of(&layer_sizes),
            layer_sizes,
            tokens,
            sparsity,
        };
        Ok(Self { header, records })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn tokens(&self) -> TokenCounts {
        self.header.tokens
    }

    pub fn num_tokens(&self) -> u32 {
        self.records.len() as u32
    }

    pub fn num_layers(&self) -> u32 {
        self.header.layer_sizes.len() as u32
    }

    pub fn layer_size(&self, layer: u32) -> u32 {
        self.header.layer_sizes[layer as usize]
    }

    pub fn active(&self, token: u32, layer: u32) -> &[u32] {
        &self.records[token as usize][layer as usize]
    }

    pub fn token(&self, token: u32) -> &[Vec<u32>] {
        &self.records[token as usize]
    }

    /// Token range of the prompt.
    pub fn prefill_range(&self) -> std::ops::Range<u32> {
        0..self.header.tokens.prefill
    }

    pub fn decode_range(&self) -> std::ops::Range<u32> {
        self.header.tokens.prefill..self.num_tokens()
    }

    pub fn matches(&self, shape: &ModelShape) -> bool {
        self.header.layer_sizes == shape.layer_sizes()
    }

    /// Configuration error unless the trace was recorded for `shape`.
    pub fn check_shape(&self, shape: &ModelShape) -> Result<()> {
        if self.matches(shape) {
            Ok(())
        } else {
            Err(Error::config(format!(
                "trace fingerprint {} does not match model {} ({})",
                self.header.fingerprint,
                shape.name,
                shape.fingerprint()
            )))
        }
    }
}

pub(crate) fn check_set(set: &[u32], size: u32) -> std::result::Result<(), String> {
    if let Some(&last) = set.last() {
        if last >= size {
            return Err(format!("neuron id {last} out of range for {size} neurons"));
        }
    }
    if let Some(w) = set.windows(2).find(|w| w[0] >= w[1]) {
        return Err(format!("ids not strictly increasing at {} -> {}", w[0], w[1]));
    }
    Ok(())
}
