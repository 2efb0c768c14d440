use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// FP16 weights.
pub const BYTES_PER_ELEMENT: u64 = 2;

/// One neuron: a row or column of one sparse FC layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: u32,
    pub index: u32,
}

impl NeuronRef {
    pub const fn new(layer: u32, index: u32) -> Self {
        Self { layer, index }
    }
}

impl std::fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}:{}", self.layer, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// The QKV-generation FC layer of a transformer block.
    Attention,
    Mlp,
}

/// Layer and neuron inventory of a decoder-only transformer.
///
/// Each transformer block contributes two sparse FC layers, QKV generation
/// followed by the MLP, so FC layer `2k` is block `k`'s attention layer and
/// `2k + 1` its MLP. Everything that talks about "layers" (traces, placement,
/// the predictor) indexes these FC layers. The output projection is dense and
/// is not made of placeable neurons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub name: String,
    pub transformer_layers: u32,
    pub hidden_dim: u64,
    /// Width of the K and V projections; smaller than `hidden_dim` under
    /// grouped-query attention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_dim: Option<u64>,
    pub attention_neurons: u32,
    pub mlp_neurons: u32,
    /// Bytes per attention-FC neuron; `hidden_dim * 2` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_neuron_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_neuron_bytes: Option<u64>,
    /// Arithmetic per neuron per token; two ops per stored element when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_flops_per_neuron: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_flops_per_neuron: Option<u64>,
}

impl ModelShape {
    /// A shape where every neuron is `hidden_dim * 2` bytes.
    pub fn uniform(
        name: impl Into<String>,
        transformer_layers: u32,
        hidden_dim: u64,
        attention_neurons: u32,
        mlp_neurons: u32,
    ) -> Self {
        Self {
            name: name.into(),
            transformer_layers,
            hidden_dim,
            kv_dim: None,
            attention_neurons,
            mlp_neurons,
            attention_neuron_bytes: None,
            mlp_neuron_bytes: None,
            attention_flops_per_neuron: None,
            mlp_flops_per_neuron: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.transformer_layers == 0 {
            return Err(Error::config("model must have at least one layer"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be positive"));
        }
        if self.attention_neurons == 0 || self.mlp_neurons == 0 {
            return Err(Error::config("every FC layer needs at least one neuron"));
        }
        if self.kv_dim == Some(0) {
            return Err(Error::config("kv_dim must be positive"));
        }
        for (what, v) in [
            ("attention_neuron_bytes", self.attention_neuron_bytes),
            ("mlp_neuron_bytes", self.mlp_neuron_bytes),
            ("attention_flops_per_neuron", self.attention_flops_per_neuron),
            ("mlp_flops_per_neuron", self.mlp_flops_per_neuron),
        ] {
            if v == Some(0) {
                return Err(Error::config(format!("{what} must be positive")));
            }
        }
        Ok(())
    }

    /// Number of sparse FC layers.
    pub fn num_layers(&self) -> u32 {
        self.transformer_layers * 2
    }

    pub fn layer_kind(&self, layer: u32) -> BlockKind {
        if layer.is_multiple_of(2) {
            BlockKind::Attention
        } else {
            BlockKind::Mlp
        }
    }

    /// Transformer block that owns an FC layer.
    pub fn block_of(&self, layer: u32) -> u32 {
        layer / 2
    }

    pub fn neurons_in_layer(&self, layer: u32) -> u32 {
        match self.layer_kind(layer) {
            BlockKind::Attention => self.attention_neurons,
            BlockKind::Mlp => self.mlp_neurons,
        }
    }

    pub fn layer_sizes(&self) -> Vec<u32> {
        (0..self.num_layers()).map(|l| self.neurons_in_layer(l)).collect()
    }

    pub fn neuron_bytes(&self, layer: u32) -> u64 {
        let explicit = match self.layer_kind(layer) {
            BlockKind::Attention => self.attention_neuron_bytes,
            BlockKind::Mlp => self.mlp_neuron_bytes,
        };
        explicit.unwrap_or(self.hidden_dim * BYTES_PER_ELEMENT)
    }

    pub fn flops_per_neuron(&self, layer: u32) -> u64 {
        let explicit = match self.layer_kind(layer) {
            BlockKind::Attention => self.attention_flops_per_neuron,
            BlockKind::Mlp => self.mlp_flops_per_neuron,
        };
        // one multiply-accumulate (2 ops) per stored element
        explicit.unwrap_or(2 * self.neuron_bytes(layer) / BYTES_PER_ELEMENT)
    }

    pub fn kv_dim(&self) -> u64 {
        self.kv_dim.unwrap_or(self.hidden_dim)
    }

    pub fn total_neurons(&self) -> u64 {
        (0..self.num_layers())
            .map(|l| u64::from(self.neurons_in_layer(l)))
            .sum()
    }

    pub fn contains(&self, n: NeuronRef) -> bool {
        n.layer < self.num_layers() && n.index < self.neurons_in_layer(n.layer)
    }

    pub fn layer_neuron_bytes(&self, layer: u32) -> u64 {
        u64::from(self.neurons_in_layer(layer)) * self.neuron_bytes(layer)
    }

    /// Σ M_i over every neuron.
    pub fn total_neuron_bytes(&self) -> u64 {
        (0..self.num_layers())
            .map(|l| self.layer_neuron_bytes(l))
            .sum()
    }

    /// Dense output projection of one transformer block.
    pub fn projection_bytes(&self) -> u64 {
        self.hidden_dim * self.hidden_dim * BYTES_PER_ELEMENT
    }

    pub fn projection_flops(&self) -> u64 {
        2 * self.hidden_dim * self.hidden_dim
    }

    pub fn dense_bytes(&self) -> u64 {
        self.projection_bytes() * u64::from(self.transformer_layers)
    }

    pub fn total_model_bytes(&self) -> u64 {
        self.total_neuron_bytes() + self.dense_bytes()
    }

    /// All weights of transformer block `block`, dense projection included.
    pub fn block_bytes(&self, block: u32) -> u64 {
        self.layer_neuron_bytes(2 * block)
            + self.layer_neuron_bytes(2 * block + 1)
            + self.projection_bytes()
    }

    pub fn block_flops(&self, block: u32) -> u64 {
        let a = 2 * block;
        let m = a + 1;
        u64::from(self.neurons_in_layer(a)) * self.flops_per_neuron(a)
            + u64::from(self.neurons_in_layer(m)) * self.flops_per_neuron(m)
            + self.projection_flops()
    }

    /// K and V cache bytes one block reads when attending over `context`
    /// tokens.
    pub fn kv_bytes(&self, context: u64, batch: u32) -> u64 {
        2 * self.kv_dim() * BYTES_PER_ELEMENT * context * u64::from(batch)
    }

    /// Stable identifier of the neuron inventory, used to bind trace and
    /// placement files to a shape. Byte sizes do not participate.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.layer_sizes())
    }
}

pub fn fingerprint_of(layer_sizes: &[u32]) -> String {
    let mut h = Sha256::new();
    h.update((layer_sizes.len() as u64).to_le_bytes());
    for s in layer_sizes {
        h.update(s.to_le_bytes());
    }
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Prompt and generation lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prefill: u32,
    pub decode: u32,
}

impl TokenCounts {
    pub const fn new(prefill: u32, decode: u32) -> Self {
        Self { prefill, decode }
    }

    pub fn total(&self) -> u32 {
        self.prefill + self.decode
    }
}

impl Default for TokenCounts {
    fn default() -> Self {
        Self::new(128, 128)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_alternate_attention_and_mlp() {
        let s = ModelShape::uniform("t", 3, 16, 4, 10);
        assert_eq!(s.num_layers(), 6);
        assert_eq!(s.layer_kind(0), BlockKind::Attention);
        assert_eq!(s.layer_kind(5), BlockKind::Mlp);
        assert_eq!(s.neurons_in_layer(3), 10);
        assert_eq!(s.block_of(5), 2);
        assert_eq!(s.total_neurons(), 42);
    }

    #[test]
    fn default_neuron_bytes_is_fp16_row() {
        let s = ModelShape::uniform("t", 1, 4096, 4, 4);
        assert_eq!(s.neuron_bytes(0), 8192);
        assert_eq!(s.flops_per_neuron(0), 8192);
        assert_eq!(s.total_neuron_bytes(), 8 * 8192);
    }

    #[test]
    fn fingerprint_tracks_inventory_only() {
        let a = ModelShape::uniform("a", 2, 16, 4, 8);
        let mut b = a.clone();
        b.name = "b".into();
        b.mlp_neuron_bytes = Some(99);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ModelShape::uniform("c", 2, 16, 4, 9);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(ModelShape::uniform("t", 0, 16, 4, 4).validate().is_err());
        assert!(ModelShape::uniform("t", 1, 16, 0, 4).validate().is_err());
        let mut s = ModelShape::uniform("t", 1, 16, 4, 4);
        s.mlp_neuron_bytes = Some(0);
        assert!(s.validate().is_err());
    }
}
