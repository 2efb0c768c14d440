//! Analytical latency model.
//!
//! A sparse FC layer costs `max(T_gpu, max_j T_dimm_j)`, since the GPU and
//! every DIMM work on their share of the layer at once. The GPU share is
//! `n_gpu · t_gpu + 2 · T_sync` and each DIMM share is `n_j · t_dimm`.
//! Per-neuron times come from a roofline over the device's bandwidth and
//! compute, with weights read once per batch.

use serde::{Deserialize, Serialize};

use crate::model::{HardwareConfig, ModelShape, TokenCounts};

pub fn roofline(bytes: f64, flops: f64, bandwidth: f64, compute: f64) -> f64 {
    (bytes / bandwidth).max(flops / compute)
}

/// Seconds to process one activated neuron of each FC layer on each kind
/// of device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceTiming {
    pub batch: u32,
    pub gpu: Vec<f64>,
    pub dimm: Vec<f64>,
}

impl DeviceTiming {
    pub fn derive(shape: &ModelShape, hw: &HardwareConfig, batch: u32) -> Self {
        let b = f64::from(batch);
        let gpu_bw = hw.gpu.mem_bandwidth_bytes_per_s as f64;
        let gpu_flops = hw.gpu.compute_flops as f64;
        let dimm_bw = hw.dimm.internal_bandwidth_bytes_per_s as f64;
        let dimm_flops = hw.dimm.compute_flops();
        let (mut gpu, mut dimm) = (Vec::new(), Vec::new());
        for l in 0..shape.num_layers() {
            let bytes = shape.neuron_bytes(l) as f64;
            let flops = shape.flops_per_neuron(l) as f64 * b;
            gpu.push(roofline(bytes, flops, gpu_bw, gpu_flops));
            dimm.push(roofline(bytes, flops, dimm_bw, dimm_flops));
        }
        Self { batch, gpu, dimm }
    }

    pub fn t_gpu(&self, layer: u32) -> f64 {
        self.gpu[layer as usize]
    }

    pub fn t_dimm(&self, layer: u32) -> f64 {
        self.dimm[layer as usize]
    }

    pub fn num_layers(&self) -> u32 {
        self.gpu.len() as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLatency {
    pub gpu_seconds: f64,
    pub dimm_seconds: Vec<f64>,
    pub layer_total: f64,
}

impl LayerLatency {
    pub fn new(gpu_seconds: f64, dimm_seconds: Vec<f64>) -> Self {
        let layer_total = dimm_seconds.iter().copied().fold(gpu_seconds, f64::max);
        Self { gpu_seconds, dimm_seconds, layer_total }
    }

    pub fn max_dimm(&self) -> f64 {
        self.dimm_seconds.iter().copied().fold(0.0, f64::max)
    }
}

/// GPU share of a layer. A layer with no GPU work needs no synchronization
/// and costs nothing.
pub fn layer_time_gpu(n_active: f64, t_neuron: f64, t_sync: f64) -> f64 {
    if n_active > 0.0 {
        n_active * t_neuron + 2.0 * t_sync
    } else {
        0.0
    }
}

/// Per-DIMM shares of a layer and their maximum.
pub fn layer_time_dimms(active_per_dimm: &[f64], t_neuron: f64) -> (Vec<f64>, f64) {
    let per: Vec<f64> = active_per_dimm.iter().map(|&n| n * t_neuron).collect();
    let max = per.iter().copied().fold(0.0, f64::max);
    (per, max)
}

pub fn layer_latency(
    gpu_active: f64,
    dimm_active: &[f64],
    layer: u32,
    timing: &DeviceTiming,
    t_sync: f64,
) -> LayerLatency {
    let gpu = layer_time_gpu(gpu_active, timing.t_gpu(layer), t_sync);
    let (dimms, _) = layer_time_dimms(dimm_active, timing.t_dimm(layer));
    LayerLatency::new(gpu, dimms)
}

pub fn total_decode_latency(layers: &[LayerLatency]) -> f64 {
    layers.iter().map(|l| l.layer_total).sum()
}

/// KV-cache reads of one block, striped evenly over every DIMM.
pub fn attention_time(kv_bytes: u64, hw: &HardwareConfig) -> f64 {
    let aggregate = hw.dimm.internal_bandwidth_bytes_per_s as f64 * f64::from(hw.num_dimms());
    kv_bytes as f64 / aggregate
}

/// Dense GEMV of `bytes` weights on the GPU for a batch.
pub fn gpu_dense_time(bytes: u64, flops_per_token: u64, batch: u32, hw: &HardwareConfig) -> f64 {
    roofline(
        bytes as f64,
        flops_per_token as f64 * f64::from(batch),
        hw.gpu.mem_bandwidth_bytes_per_s as f64,
        hw.gpu.compute_flops as f64,
    )
}

/// Output projection of one block; dense, always on the GPU.
pub fn projection_time(shape: &ModelShape, batch: u32, hw: &HardwareConfig) -> f64 {
    gpu_dense_time(shape.projection_bytes(), shape.projection_flops(), batch, hw)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationCost {
    pub transfer_seconds: f64,
    /// Part of the transfer covered by the hiding budget.
    pub hidden_seconds: f64,
    /// Part that extends the layer.
    pub exposed_seconds: f64,
}

/// PCIe and DIMM-link transfers proceed in parallel, overlapped with a
/// `budget` of otherwise idle time.
pub fn migration_time(
    dimmlink_bytes: u64,
    pcie_bytes: u64,
    budget: f64,
    hw: &HardwareConfig,
) -> MigrationCost {
    let pcie = pcie_bytes as f64 / hw.pcie_bandwidth_bytes_per_s as f64;
    let link = dimmlink_bytes as f64 / hw.dimmlink_bandwidth_bytes_per_s as f64;
    let transfer = pcie.max(link);
    MigrationCost {
        transfer_seconds: transfer,
        hidden_seconds: transfer.min(budget),
        exposed_seconds: (transfer - budget).max(0.0),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeCost {
    pub sync_seconds: f64,
    pub transfer_seconds: f64,
}

impl MergeCost {
    pub fn total(&self) -> f64 {
        self.sync_seconds + self.transfer_seconds
    }
}

/// Reducing GPU and DIMM partial results at the end of a block: one
/// synchronization plus the FP16 hidden vector per batch entry through a
/// DIMM's internal bandwidth.
pub fn merge_time(shape: &ModelShape, batch: u32, hw: &HardwareConfig) -> MergeCost {
    let bytes = shape.hidden_dim * crate::model::BYTES_PER_ELEMENT * u64::from(batch);
    MergeCost {
        sync_seconds: hw.t_sync_seconds,
        transfer_seconds: bytes as f64 / hw.dimm.internal_bandwidth_bytes_per_s as f64,
    }
}

/// Largest prefix of transformer blocks that fits in GPU memory.
pub fn pinned_prefix(shape: &ModelShape, hw: &HardwareConfig) -> (u32, u64) {
    let mut used = 0u64;
    let mut blocks = 0;
    for b in 0..shape.transformer_layers {
        let need = shape.block_bytes(b);
        if used + need > hw.gpu.memory_bytes {
            break;
        }
        used += need;
        blocks += 1;
    }
    (blocks, used)
}

/// Prompt processing on the GPU under plain offloading: stream every
/// non-resident block over PCIe once, then run all blocks densely over the
/// whole prompt.
pub fn prefill_time(shape: &ModelShape, hw: &HardwareConfig, prompt: u32, batch: u32) -> PrefillCost {
    let (_, pinned) = pinned_prefix(shape, hw);
    let streamed = shape.total_model_bytes() - pinned;
    let pcie = streamed as f64 / hw.pcie_bandwidth_bytes_per_s as f64;
    let rows = prompt * batch;
    let compute: f64 = (0..shape.transformer_layers)
        .map(|b| gpu_dense_time(shape.block_bytes(b), shape.block_flops(b), rows, hw))
        .sum();
    PrefillCost { pcie_seconds: pcie, compute_seconds: compute }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefillCost {
    pub pcie_seconds: f64,
    pub compute_seconds: f64,
}

impl PrefillCost {
    pub fn total(&self) -> f64 {
        self.pcie_seconds + self.compute_seconds
    }
}

/// GPU-only offloading without NDP: weights that do not fit stream over
/// PCIe for every generated token, with no overlap between transfer and
/// compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub pinned_blocks: u32,
    pub pinned_bytes: u64,
    pub streamed_bytes_per_token: u64,
    pub prefill: PrefillCost,
    pub decode_pcie_seconds: f64,
    pub decode_compute_seconds: f64,
    pub decode_attention_seconds: f64,
    pub decode_seconds: f64,
    pub total_seconds: f64,
    /// PCIe fraction of decode time.
    pub pcie_share: f64,
    /// Generated tokens per second of decode time, one sequence.
    pub tokens_per_second: f64,
}

pub fn baseline_offload_latency(
    shape: &ModelShape,
    hw: &HardwareConfig,
    tokens: TokenCounts,
    batch: u32,
) -> BaselineReport {
    let (pinned_blocks, pinned_bytes) = pinned_prefix(shape, hw);
    let streamed = shape.total_model_bytes() - pinned_bytes;
    let prefill = prefill_time(shape, hw, tokens.prefill, batch);
    let per_token_pcie = streamed as f64 / hw.pcie_bandwidth_bytes_per_s as f64;
    let per_token_compute: f64 = (0..shape.transformer_layers)
        .map(|b| gpu_dense_time(shape.block_bytes(b), shape.block_flops(b), batch, hw))
        .sum();
    let gpu_bw = hw.gpu.mem_bandwidth_bytes_per_s as f64;
    let mut attention = 0.0;
    for t in 0..tokens.decode {
        let context = u64::from(tokens.prefill + t + 1);
        attention += shape.kv_bytes(context, batch) as f64 / gpu_bw * f64::from(shape.transformer_layers);
    }
    let n = f64::from(tokens.decode);
    let pcie = per_token_pcie * n;
    let compute = per_token_compute * n;
    let decode = pcie + compute + attention;
    BaselineReport {
        pinned_blocks,
        pinned_bytes,
        streamed_bytes_per_token: streamed,
        prefill,
        decode_pcie_seconds: pcie,
        decode_compute_seconds: compute,
        decode_attention_seconds: attention,
        decode_seconds: decode,
        total_seconds: prefill.total() + decode,
        pcie_share: if decode > 0.0 { pcie / decode } else { 0.0 },
        tokens_per_second: if decode > 0.0 {
            f64::from(tokens.decode) / decode
        } else {
            0.0
        },
    }
}
