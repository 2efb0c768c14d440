//! Sensitivity sweeps over hardware and batch size.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use ndpsim_core::engine::{simulate, Mode, SimReport};
use ndpsim_core::model::presets;
use ndpsim_core::trace::ActivationTrace;

use crate::commands::{trace_for, workload};
use crate::config::{ExperimentConfig, SweepSpec};
use crate::error::{CliError, CliResult};
use crate::output::OutDir;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub gpu: String,
    pub dimms: u32,
    pub multipliers: u32,
    pub batch: u32,
    pub mode: Mode,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        format!("{}_d{}_m{}_b{}_{}", self.gpu, self.dimms, self.multipliers, self.batch, self.mode)
    }

    /// Subdirectory of the point at grid position `index`.
    pub fn name(&self, index: usize) -> String {
        format!("{index:03}_{}", self.label())
    }
}

#[derive(Serialize)]
struct SweepRow {
    index: usize,
    gpu: String,
    dimms: u32,
    multipliers: u32,
    batch: u32,
    mode: Mode,
    tokens_per_second: f64,
    decode_seconds: f64,
    baseline_tokens_per_second: f64,
    speedup_vs_baseline: f64,
    recall: f64,
    mean_step_imbalance: f64,
}

/// Grid points in a fixed order: GPU, DIMM count, multipliers, batch, mode.
pub fn grid(cfg: &ExperimentConfig, spec: &SweepSpec) -> CliResult<Vec<SweepPoint>> {
    if spec.is_empty() {
        return Err(CliError::Config("sweep spec has no axes".into()));
    }
    let or = |v: &[u32], base: u32| if v.is_empty() { vec![base] } else { v.to_vec() };
    let gpus = if spec.gpus.is_empty() { vec![cfg.hardware.gpu.name.clone()] } else { spec.gpus.clone() };
    let dimms = or(&spec.dimm_counts, cfg.hardware.dimm.count);
    let mults = or(&spec.multipliers, cfg.hardware.dimm.multipliers_per_gemv_unit);
    let batches = or(&spec.batches, cfg.batches[0]);
    let modes = if spec.modes.is_empty() { vec![Mode::Full] } else { spec.modes.clone() };
    let mut points = Vec::new();
    for g in &gpus {
        for &d in &dimms {
            for &m in &mults {
                for &b in &batches {
                    for &mode in &modes {
                        points.push(SweepPoint { gpu: g.clone(), dimms: d, multipliers: m, batch: b, mode });
                    }
                }
            }
        }
    }
    Ok(points)
}

fn run_point(cfg: &ExperimentConfig, trace: &ActivationTrace, pt: &SweepPoint) -> CliResult<SimReport> {
    let mut c = cfg.clone();
    if pt.gpu != c.hardware.gpu.name {
        c.hardware.gpu = presets::hardware(&pt.gpu)?.gpu;
    }
    c.hardware.dimm.count = pt.dimms;
    c.hardware.dimm.multipliers_per_gemv_unit = pt.multipliers;
    c.hardware.validate_for(&c.model)?;
    let w = workload(&c, trace.clone(), pt.batch);
    let p = w.mapping_problem()?;
    let placement = w.placement_for(pt.mode, &p)?;
    let mut sim = pt.mode.configure(&w.sim);
    sim.label = pt.label();
    Ok(simulate(&w.shape, &w.hw, &w.trace, &placement, &sim)?.report)
}

/// Run every grid point on a pool of `jobs` threads; results keep grid
/// order.
pub fn sweep(cfg: &ExperimentConfig, jobs: usize, out: &Path) -> CliResult<()> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("no sweep section in the config".into()))?;
    let points = grid(cfg, spec)?;
    let dir = OutDir::create(out)?;
    dir.json("effective_config.json", cfg)?;
    let trace = trace_for(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let reports: Vec<CliResult<SimReport>> =
        pool.install(|| points.par_iter().map(|pt| run_point(cfg, &trace, pt)).collect());

    let mut rows = Vec::with_capacity(points.len());
    for (i, (pt, r)) in points.iter().zip(reports).enumerate() {
        let r = r?;
        let sub = dir.sub(&pt.name(i))?;
        sub.json("point.json", pt)?;
        sub.json("report.json", &r)?;
        rows.push(SweepRow {
            index: i,
            gpu: pt.gpu.clone(),
            dimms: pt.dimms,
            multipliers: pt.multipliers,
            batch: pt.batch,
            mode: pt.mode,
            tokens_per_second: r.tokens_per_second,
            decode_seconds: r.decode_seconds,
            baseline_tokens_per_second: r.baseline.baseline.tokens_per_second,
            speedup_vs_baseline: r.baseline.speedup,
            recall: r.predictor.report.recall,
            mean_step_imbalance: r.mean_step_imbalance,
        });
    }
    dir.csv("summary.csv", &rows)
}
