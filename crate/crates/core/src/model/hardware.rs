use serde::{Deserialize, Serialize};

use super::ModelShape;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpuConfig {
    pub name: String,
    pub memory_bytes: u64,
    pub mem_bandwidth_bytes_per_s: u64,
    pub compute_flops: u64,
}

/// One NDP-DIMM model; every DIMM in a system is identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimmConfig {
    pub count: u32,
    pub memory_bytes: u64,
    pub internal_bandwidth_bytes_per_s: u64,
    pub multipliers_per_gemv_unit: u32,
    /// FP16 lanes each multiplier works on at once.
    #[serde(default = "default_lanes")]
    pub lanes_per_multiplier: u32,
    /// Cycles one bit-serial multiply occupies a multiplier.
    #[serde(default = "default_cycles")]
    pub cycles_per_multiply: u32,
    pub frequency_hz: u64,
}

fn default_lanes() -> u32 {
    8
}

fn default_cycles() -> u32 {
    16
}

impl DimmConfig {
    /// Peak GEMV throughput of one DIMM.
    pub fn compute_flops(&self) -> f64 {
        let macs_per_cycle = f64::from(self.multipliers_per_gemv_unit)
            * f64::from(self.lanes_per_multiplier)
            / f64::from(self.cycles_per_multiply);
        2.0 * macs_per_cycle * self.frequency_hz as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub gpu: GpuConfig,
    pub dimm: DimmConfig,
    pub pcie_bandwidth_bytes_per_s: u64,
    pub dimmlink_bandwidth_bytes_per_s: u64,
    pub t_sync_seconds: f64,
}

impl HardwareConfig {
    pub fn num_dimms(&self) -> u32 {
        self.dimm.count
    }

    pub fn dimm_capacity(&self, _dimm: u32) -> u64 {
        self.dimm.memory_bytes
    }

    pub fn total_dimm_bytes(&self) -> u64 {
        self.dimm.memory_bytes * u64::from(self.dimm.count)
    }

    /// GPU memory left for mirrored neurons once the dense projections are
    /// resident (S_GPU in the placement constraints).
    pub fn gpu_neuron_capacity(&self, shape: &ModelShape) -> u64 {
        self.gpu.memory_bytes.saturating_sub(shape.dense_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gpu.memory_bytes", self.gpu.memory_bytes),
            ("gpu.mem_bandwidth_bytes_per_s", self.gpu.mem_bandwidth_bytes_per_s),
            ("gpu.compute_flops", self.gpu.compute_flops),
            ("dimm.memory_bytes", self.dimm.memory_bytes),
            (
                "dimm.internal_bandwidth_bytes_per_s",
                self.dimm.internal_bandwidth_bytes_per_s,
            ),
            (
                "dimm.multipliers_per_gemv_unit",
                u64::from(self.dimm.multipliers_per_gemv_unit),
            ),
            ("dimm.lanes_per_multiplier", u64::from(self.dimm.lanes_per_multiplier)),
            ("dimm.cycles_per_multiply", u64::from(self.dimm.cycles_per_multiply)),
            ("dimm.frequency_hz", self.dimm.frequency_hz),
            ("pcie_bandwidth_bytes_per_s", self.pcie_bandwidth_bytes_per_s),
            ("dimmlink_bandwidth_bytes_per_s", self.dimmlink_bandwidth_bytes_per_s),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{what} must be positive")));
            }
        }
        if !(self.t_sync_seconds.is_finite() && self.t_sync_seconds >= 0.0) {
            return Err(Error::config("t_sync_seconds must be a non-negative number"));
        }
        let j = self.dimm.count;
        if j < 2 || !j.is_multiple_of(2) {
            return Err(Error::config(format!(
                "DIMM count must be even and at least 2, got {j}"
            )));
        }
        if j > u32::from(u16::MAX) {
            return Err(Error::config("too many DIMMs"));
        }
        Ok(())
    }

    /// Hardware checks plus: all weights must fit on the DIMMs.
    pub fn validate_for(&self, shape: &ModelShape) -> Result<()> {
        self.validate()?;
        let need = shape.total_neuron_bytes();
        if self.total_dimm_bytes() < need {
            return Err(Error::Infeasible(format!(
                "model needs {need} bytes but {} DIMMs hold only {}",
                self.dimm.count,
                self.total_dimm_bytes()
            )));
        }
        Ok(())
    }
}
