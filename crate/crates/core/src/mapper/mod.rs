//! Offline neuron placement.
//!
//! Each neuron is computed either on the GPU (as a mirror, still owned by a
//! DIMM) or on its owning DIMM. The objective sums, over FC layers, the
//! slowest device's expected time, counting every neuron with weight f_i.

mod exact;
mod greedy;

pub use exact::{solve_exact, SolveLimits};
pub use greedy::solve_greedy;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costmodel::{layer_latency, DeviceTiming, LayerLatency};
use crate::error::{Error, Result};
use crate::model::{HardwareConfig, ModelShape, NeuronPlacement, NeuronRef};

#[derive(Clone, Debug)]
pub struct MappingProblem {
    pub shape: ModelShape,
    pub hw: HardwareConfig,
    pub timing: DeviceTiming,
    /// `freq[l][i]`: profiled activation frequency of neuron i in layer l.
    pub freq: Vec<Vec<f64>>,
}

impl MappingProblem {
    pub fn new(
        shape: ModelShape,
        hw: HardwareConfig,
        timing: DeviceTiming,
        freq: Vec<Vec<f64>>,
    ) -> Result<Self> {
        shape.validate()?;
        hw.validate()?;
        let sizes = shape.layer_sizes();
        if freq.len() != sizes.len()
            || freq.iter().zip(&sizes).any(|(f, &n)| f.len() != n as usize)
        {
            return Err(Error::config("one frequency per neuron is required"));
        }
        if timing.num_layers() != shape.num_layers() {
            return Err(Error::config("timing does not cover every layer"));
        }
        if let Some(f) = freq.iter().flatten().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::config(format!("frequency {f} outside [0, 1]")));
        }
        Ok(Self { shape, hw, timing, freq })
    }

    pub fn num_dimms(&self) -> u32 {
        self.hw.num_dimms()
    }

    pub fn gpu_capacity(&self) -> u64 {
        self.hw.gpu_neuron_capacity(&self.shape)
    }

    pub(crate) fn check_total_capacity(&self) -> Result<()> {
        let need = self.shape.total_neuron_bytes();
        let have = self.hw.total_dimm_bytes();
        if need > have {
            return Err(Error::Infeasible(format!(
                "neurons need {need} bytes, DIMMs hold {have}"
            )));
        }
        Ok(())
    }

    /// Expected latency of one layer given its mass on the GPU and on each
    /// DIMM.
    pub fn layer_cost(&self, layer: u32, gpu_mass: f64, dimm_mass: &[f64]) -> LayerLatency {
        layer_latency(gpu_mass, dimm_mass, layer, &self.timing, self.hw.t_sync_seconds)
    }
}

#[derive(Clone, Debug)]
pub struct MappingSolution {
    pub placement: NeuronPlacement,
    pub objective: f64,
    /// Proven optimal: the search ran to completion.
    pub optimal: bool,
    pub nodes: u64,
    pub solver: String,
}

/// Per-layer expected GPU and DIMM masses of a placement.
pub fn layer_masses(placement: &NeuronPlacement, p: &MappingProblem, layer: u32) -> (f64, Vec<f64>) {
    let mut gpu = 0.0;
    let mut dimm = vec![0.0; placement.num_dimms() as usize];
    let owners = placement.owners(layer);
    let flags = placement.gpu_flags(layer);
    for (i, &f) in p.freq[layer as usize].iter().enumerate() {
        if flags[i] {
            gpu += f;
        } else {
            dimm[owners[i] as usize] += f;
        }
    }
    (gpu, dimm)
}

/// Σ over layers of the slowest device's expected time.
pub fn objective_of(placement: &NeuronPlacement, p: &MappingProblem) -> f64 {
    per_layer_objective(placement, p).iter().map(|l| l.layer_total).sum()
}

pub fn per_layer_objective(placement: &NeuronPlacement, p: &MappingProblem) -> Vec<LayerLatency> {
    (0..p.shape.num_layers())
        .map(|l| {
            let (g, d) = layer_masses(placement, p, l);
            p.layer_cost(l, g, &d)
        })
        .collect()
}

/// Owners drawn uniformly among DIMMs with room, and a GPU set filled with
/// randomly chosen neurons.
pub fn random_placement(p: &MappingProblem, seed: u64) -> Result<NeuronPlacement> {
    p.check_total_capacity()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = p.num_dimms();
    let mut placement = NeuronPlacement::for_shape(&p.shape, j);
    let mut used = vec![0u64; j as usize];
    let mut all: Vec<NeuronRef> = (0..p.shape.num_layers())
        .flat_map(|l| (0..p.shape.neurons_in_layer(l)).map(move |i| NeuronRef::new(l, i)))
        .collect();
    all.shuffle(&mut rng);
    for &n in &all {
        let b = p.shape.neuron_bytes(n.layer);
        let open: Vec<u32> = (0..j)
            .filter(|&d| used[d as usize] + b <= p.hw.dimm_capacity(d))
            .collect();
        if open.is_empty() {
            return Err(Error::Infeasible(format!("no DIMM has room for {n}")));
        }
        let d = open[rng.gen_range(0..open.len())];
        used[d as usize] += b;
        placement.set_owner(n, d);
    }
    all.shuffle(&mut rng);
    let cap = p.gpu_capacity();
    let mut gpu = 0u64;
    for &n in &all {
        let b = p.shape.neuron_bytes(n.layer);
        if gpu + b <= cap {
            gpu += b;
            placement.set_gpu(n, true);
        }
    }
    Ok(placement)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::model::presets;

    /// A uniform-size instance of `blocks` transformer blocks (two FC
    /// layers each) where the GPU holds `gpu_slots` neurons and every DIMM
    /// `dimm_slots`.
    pub fn instance(
        blocks: u32,
        per_layer: u32,
        dimms: u32,
        gpu_slots: u64,
        dimm_slots: u64,
        seed: u64,
    ) -> MappingProblem {
        let shape = ModelShape::uniform("t", blocks, 8, per_layer, per_layer);
        let bytes = shape.neuron_bytes(0);
        let mut hw = presets::hardware("rtx4090").unwrap();
        hw.dimm.count = dimms;
        hw.dimm.memory_bytes = dimm_slots * bytes;
        hw.gpu.memory_bytes = shape.dense_bytes() + gpu_slots * bytes;
        hw.t_sync_seconds = 1e-7;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.num_layers() as usize;
        let timing = DeviceTiming {
            batch: 1,
            gpu: (0..n).map(|_| rng.gen_range(1e-8..5e-8)).collect(),
            dimm: (0..n).map(|_| rng.gen_range(1e-7..1e-6)).collect(),
        };
        let freq = (0..n)
            .map(|_| (0..per_layer).map(|_| rng.gen::<f64>().powi(2)).collect())
            .collect();
        MappingProblem::new(shape, hw, timing, freq).unwrap()
    }
}
