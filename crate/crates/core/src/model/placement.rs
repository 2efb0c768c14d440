use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HardwareConfig, ModelShape, NeuronRef};
use crate::error::{Error, Result};

/// Where every neuron lives.
///
/// Every neuron has exactly one owning DIMM that stores its weights. A
/// GPU-resident neuron is a mirror of the DIMM copy: it is computed on the
/// GPU, but dropping it from the GPU loses nothing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronPlacement {
    num_dimms: u32,
    owner: Vec<Vec<u16>>,
    gpu: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "snake_case")]
pub enum Violation {
    /// Mirrored neurons exceed S_GPU.
    GpuCapacity { used: u64, capacity: u64 },
    /// Neurons owned by a DIMM exceed its S_j.
    DimmCapacity { dimm: u32, used: u64, capacity: u64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::GpuCapacity { used, capacity } => {
                write!(f, "GPU capacity: {used} bytes mirrored > {capacity}")
            }
            Violation::DimmCapacity { dimm, used, capacity } => {
                write!(f, "DIMM-{dimm} capacity: {used} bytes owned > {capacity}")
            }
        }
    }
}

impl NeuronPlacement {
    /// Everything owned by DIMM 0, nothing on the GPU.
    pub fn new(layer_sizes: &[u32], num_dimms: u32) -> Self {
        Self {
            num_dimms,
            owner: layer_sizes.iter().map(|&n| vec![0; n as usize]).collect(),
            gpu: layer_sizes.iter().map(|&n| vec![false; n as usize]).collect(),
        }
    }

    pub fn for_shape(shape: &ModelShape, num_dimms: u32) -> Self {
        Self::new(&shape.layer_sizes(), num_dimms)
    }

    pub fn num_dimms(&self) -> u32 {
        self.num_dimms
    }

    pub fn num_layers(&self) -> u32 {
        self.owner.len() as u32
    }

    pub fn layer_len(&self, layer: u32) -> u32 {
        self.owner[layer as usize].len() as u32
    }

    pub fn layer_sizes(&self) -> Vec<u32> {
        self.owner.iter().map(|l| l.len() as u32).collect()
    }

    pub fn dimm_of(&self, n: NeuronRef) -> u32 {
        u32::from(self.owner[n.layer as usize][n.index as usize])
    }

    pub fn is_gpu_resident(&self, n: NeuronRef) -> bool {
        self.gpu[n.layer as usize][n.index as usize]
    }

    pub fn set_owner(&mut self, n: NeuronRef, dimm: u32) {
        self.owner[n.layer as usize][n.index as usize] = dimm as u16;
    }

    pub fn set_gpu(&mut self, n: NeuronRef, resident: bool) {
        self.gpu[n.layer as usize][n.index as usize] = resident;
    }

    pub fn owners(&self, layer: u32) -> &[u16] {
        &self.owner[layer as usize]
    }

    pub fn gpu_flags(&self, layer: u32) -> &[bool] {
        &self.gpu[layer as usize]
    }

    pub fn gpu_resident(&self) -> impl Iterator<Item = NeuronRef> + '_ {
        self.gpu.iter().enumerate().flat_map(|(l, flags)| {
            flags
                .iter()
                .enumerate()
                .filter(|(_, &g)| g)
                .map(move |(i, _)| NeuronRef::new(l as u32, i as u32))
        })
    }

    pub fn gpu_count(&self, layer: u32) -> usize {
        self.gpu[layer as usize].iter().filter(|&&g| g).count()
    }

    pub fn gpu_bytes(&self, shape: &ModelShape) -> u64 {
        (0..self.num_layers())
            .map(|l| self.gpu_count(l) as u64 * shape.neuron_bytes(l))
            .sum()
    }

    pub fn dimm_bytes(&self, shape: &ModelShape) -> Vec<u64> {
        let mut used = vec![0u64; self.num_dimms as usize];
        for (l, owners) in self.owner.iter().enumerate() {
            let b = shape.neuron_bytes(l as u32);
            for &o in owners {
                if let Some(u) = used.get_mut(o as usize) {
                    *u += b;
                }
            }
        }
        used
    }

    pub fn write_to(&self, path: &Path, shape: &ModelShape, meta: &PlacementMeta) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = PlacementHeader {
            format: PLACEMENT_FORMAT.to_string(),
            fingerprint: shape.fingerprint(),
            num_dimms: self.num_dimms,
            meta: meta.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(io_err)?;
        w.write_all(b"\n")?;
        for (l, owners) in self.owner.iter().enumerate() {
            for (i, &dimm) in owners.iter().enumerate() {
                let line = PlacementLine {
                    layer: l as u32,
                    index: i as u32,
                    dimm: u32::from(dimm),
                    gpu: self.gpu[l][i],
                };
                serde_json::to_writer(&mut w, &line).map_err(io_err)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a placement file, checking that it covers `shape` exactly once.
    pub fn read_from(path: &Path, shape: &ModelShape) -> Result<(Self, PlacementMeta)> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty placement file".into(),
        })??;
        let header: PlacementHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.format != PLACEMENT_FORMAT {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported format {:?}", header.format),
            });
        }
        if header.fingerprint != shape.fingerprint() {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "placement is for model {} but shape is {}",
                    header.fingerprint,
                    shape.fingerprint()
                ),
            });
        }
        let mut placement = Self::for_shape(shape, header.num_dimms);
        let mut seen: Vec<Vec<bool>> = shape
            .layer_sizes()
            .iter()
            .map(|&n| vec![false; n as usize])
            .collect();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: PlacementLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            let n = NeuronRef::new(rec.layer, rec.index);
            if !shape.contains(n) {
                return Err(Error::structural(format!(
                    "line {lineno}: neuron {n} is not part of the model"
                )));
            }
            if rec.dimm >= header.num_dimms {
                return Err(Error::structural(format!(
                    "line {lineno}: DIMM {} out of range for {} DIMMs",
                    rec.dimm, header.num_dimms
                )));
            }
            let s = &mut seen[n.layer as usize][n.index as usize];
            if *s {
                return Err(Error::structural(format!(
                    "line {lineno}: neuron {n} listed twice"
                )));
            }
            *s = true;
            placement.set_owner(n, rec.dimm);
            placement.set_gpu(n, rec.gpu);
        }
        for (l, flags) in seen.iter().enumerate() {
            if let Some(i) = flags.iter().position(|&f| !f) {
                return Err(Error::structural(format!(
                    "neuron L{l}:{i} has no owning DIMM"
                )));
            }
        }
        Ok((placement, header.meta))
    }
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

const PLACEMENT_FORMAT: &str = "ndpsim-placement/1";

/// Solver provenance stored in a placement file header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlacementMeta {
    pub solver: String,
    pub objective_seconds: f64,
    pub optimal: bool,
}

#[derive(Serialize, Deserialize)]
struct PlacementHeader {
    format: String,
    fingerprint: String,
    num_dimms: u32,
    #[serde(flatten)]
    meta: PlacementMeta,
}

#[derive(Serialize, Deserialize)]
struct PlacementLine {
    layer: u32,
    index: u32,
    dimm: u32,
    gpu: bool,
}

/// Capacity violations of a placement.
///
/// Returns an error, not a violation, when the placement does not describe
/// `shape` (wrong layer count or sizes, DIMM ids beyond the hardware).
pub fn validate_placement(
    placement: &NeuronPlacement,
    shape: &ModelShape,
    hw: &HardwareConfig,
) -> Result<Vec<Violation>> {
    if placement.layer_sizes() != shape.layer_sizes() {
        return Err(Error::structural(format!(
            "placement covers layers {:?}, model has {:?}",
            placement.layer_sizes(),
            shape.layer_sizes()
        )));
    }
    let j = hw.num_dimms();
    if placement.num_dimms() != j {
        return Err(Error::structural(format!(
            "placement uses {} DIMMs, hardware has {j}",
            placement.num_dimms()
        )));
    }
    for l in 0..placement.num_layers() {
        if let Some(i) = placement.owners(l).iter().position(|&o| u32::from(o) >= j) {
            return Err(Error::structural(format!(
                "neuron L{l}:{i} owned by nonexistent DIMM {}",
                placement.owners(l)[i]
            )));
        }
    }

    let mut out = Vec::new();
    let gpu_used = placement.gpu_bytes(shape);
    let gpu_cap = hw.gpu_neuron_capacity(shape);
    if gpu_used > gpu_cap {
        out.push(Violation::GpuCapacity {
            used: gpu_used,
            capacity: gpu_cap,
        });
    }
    for (d, used) in placement.dimm_bytes(shape).into_iter().enumerate() {
        let cap = hw.dimm_capacity(d as u32);
        if used > cap {
            out.push(Violation::DimmCapacity {
                dimm: d as u32,
                used,
                capacity: cap,
            });
        }
    }
    Ok(out)
}
