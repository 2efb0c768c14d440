//! Named model shapes and hardware profiles.
//!
//! Model dimensions follow the public architecture cards. OPT and Falcon MLP
//! neurons span two matrices (up row + down column); LLaMA2 gated MLPs span
//! three. An attention-FC neuron is one input row of the fused QKV weight.

use super::{DimmConfig, GpuConfig, HardwareConfig, ModelShape, BYTES_PER_ELEMENT};
use crate::error::{Error, Result};

const GIB: u64 = 1 << 30;

pub const MODEL_PRESETS: &[&str] = &[
    "desk", "opt13b", "opt30b", "opt66b", "llama13b", "llama70b", "falcon40b",
];

pub const HARDWARE_PRESETS: &[&str] = &["desk", "rtx4090", "rtx3090", "teslat4"];

fn opt_like(name: &str, layers: u32, hidden: u64, ffn: u32) -> ModelShape {
    let mut s = ModelShape::uniform(name, layers, hidden, hidden as u32, ffn);
    s.attention_neuron_bytes = Some(3 * hidden * BYTES_PER_ELEMENT);
    s.mlp_neuron_bytes = Some(2 * hidden * BYTES_PER_ELEMENT);
    s
}

fn gqa(name: &str, layers: u32, hidden: u64, kv: u64, ffn: u32, mlp_mats: u64) -> ModelShape {
    let mut s = ModelShape::uniform(name, layers, hidden, hidden as u32, ffn);
    s.kv_dim = Some(kv);
    s.attention_neuron_bytes = Some((hidden + 2 * kv) * BYTES_PER_ELEMENT);
    s.mlp_neuron_bytes = Some(mlp_mats * hidden * BYTES_PER_ELEMENT);
    s
}

pub fn model(name: &str) -> Result<ModelShape> {
    let shape = match name {
        // Small OPT-style stack used by the bundled experiments.
        "desk" => opt_like("desk", 8, 2048, 8192),
        "opt13b" => opt_like("opt13b", 40, 5120, 20480),
        "opt30b" => opt_like("opt30b", 48, 7168, 28672),
        "opt66b" => opt_like("opt66b", 64, 9216, 36864),
        "llama13b" => gqa("llama13b", 40, 5120, 5120, 13824, 3),
        "llama70b" => gqa("llama70b", 80, 8192, 1024, 28672, 3),
        "falcon40b" => gqa("falcon40b", 60, 8192, 1024, 32768, 2),
        other => {
            return Err(Error::config(format!(
                "unknown model preset {other:?} (known: {})",
                MODEL_PRESETS.join(", ")
            )))
        }
    };
    Ok(shape)
}

fn ndp_dimms() -> DimmConfig {
    DimmConfig {
        count: 8,
        memory_bytes: 32 * GIB,
        // DDR4-3200, 64-bit bus
        internal_bandwidth_bytes_per_s: 25_600_000_000,
        multipliers_per_gemv_unit: 256,
        lanes_per_multiplier: 8,
        cycles_per_multiply: 16,
        frequency_hz: 1_000_000_000,
    }
}

fn with_gpu(gpu: GpuConfig) -> HardwareConfig {
    HardwareConfig {
        gpu,
        dimm: ndp_dimms(),
        pcie_bandwidth_bytes_per_s: 64_000_000_000,
        dimmlink_bandwidth_bytes_per_s: 25_000_000_000,
        t_sync_seconds: 5e-6,
    }
}

pub fn hardware(name: &str) -> Result<HardwareConfig> {
    let gpu = |name: &str, mem: u64, bw: u64, flops: u64| GpuConfig {
        name: name.into(),
        memory_bytes: mem,
        mem_bandwidth_bytes_per_s: bw,
        compute_flops: flops,
    };
    let hw = match name {
        "rtx4090" => with_gpu(gpu("rtx4090", 24 * GIB, 936_000_000_000, 330_000_000_000_000)),
        "rtx3090" => with_gpu(gpu("rtx3090", 24 * GIB, 936_000_000_000, 142_000_000_000_000)),
        "teslat4" => with_gpu(gpu("teslat4", 16 * GIB, 320_000_000_000, 65_000_000_000_000)),
        // An RTX 4090 whose memory is scaled to the `desk` model so that only
        // a small slice of its neurons fits, as a 24 GB card does for 66B.
        "desk" => with_gpu(gpu("desk", 160_000_000, 936_000_000_000, 330_000_000_000_000)),
        other => {
            return Err(Error::config(format!(
                "unknown hardware preset {other:?} (known: {})",
                HARDWARE_PRESETS.join(", ")
            )))
        }
    };
    Ok(hw)
}
