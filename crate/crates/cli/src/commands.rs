use std::path::Path;

use serde::Serialize;

use ndpsim_core::engine::{run_ablation, simulate, Mode, SimReport, Workload};
use ndpsim_core::model::PlacementMeta;
use ndpsim_core::trace::{generate_trace, load_trace, save_trace, ActivationTrace};
use ndpsim_core::{validate_placement, Error, NeuronPlacement};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::output::OutDir;

pub fn trace_for(cfg: &ExperimentConfig) -> CliResult<ActivationTrace> {
    let t = match &cfg.trace.path {
        Some(p) => load_trace(p, Some(&cfg.model))?,
        None => generate_trace(&cfg.trace.generate, &cfg.model, cfg.trace.tokens)?,
    };
    Ok(t)
}

pub fn workload(cfg: &ExperimentConfig, trace: ActivationTrace, batch: u32) -> Workload {
    Workload {
        shape: cfg.model.clone(),
        hw: cfg.hardware.clone(),
        trace,
        sim: cfg.sim_for(batch),
        mapper: cfg.mapper,
        seed: cfg.seed,
    }
}

fn start(cfg: &ExperimentConfig, out: &Path) -> CliResult<OutDir> {
    let dir = OutDir::create(out)?;
    dir.json("effective_config.json", cfg)?;
    Ok(dir)
}

pub fn gen_trace(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let dir = start(cfg, out)?;
    let trace = trace_for(cfg)?;
    save_trace(&trace, &dir.path("trace.jsonl"))?;
    Ok(())
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    solver: &'a str,
    objective_seconds: f64,
    optimal: bool,
    nodes: u64,
    gpu_neurons: usize,
    gpu_bytes: u64,
    dimm_bytes: Vec<u64>,
}

pub fn solve_map(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let dir = start(cfg, out)?;
    let w = workload(cfg, trace_for(cfg)?, cfg.batches[0]);
    let p = w.mapping_problem()?;
    let sol = w.solve(&p)?;
    check_feasible(&sol.placement, &w)?;
    let meta = PlacementMeta {
        solver: sol.solver.clone(),
        objective_seconds: sol.objective,
        optimal: sol.optimal,
    };
    sol.placement.write_to(&dir.path("placement.jsonl"), &w.shape, &meta)?;
    dir.json(
        "solve.json",
        &SolveSummary {
            solver: &sol.solver,
            objective_seconds: sol.objective,
            optimal: sol.optimal,
            nodes: sol.nodes,
            gpu_neurons: sol.placement.gpu_resident().count(),
            gpu_bytes: sol.placement.gpu_bytes(&w.shape),
            dimm_bytes: sol.placement.dimm_bytes(&w.shape),
        },
    )
}

fn check_feasible(placement: &NeuronPlacement, w: &Workload) -> CliResult<()> {
    let v = validate_placement(placement, &w.shape, &w.hw)?;
    match v.first() {
        Some(v) => Err(Error::Infeasible(format!("placement violates capacity: {v}")).into()),
        None => Ok(()),
    }
}

pub fn simulate_cmd(cfg: &ExperimentConfig, mode: Mode, placement: Option<&Path>, out: &Path) -> CliResult<()> {
    let dir = start(cfg, out)?;
    let w = workload(cfg, trace_for(cfg)?, cfg.batches[0]);
    let placement = match placement {
        Some(path) => NeuronPlacement::read_from(path, &w.shape)?.0,
        None => {
            let p = w.mapping_problem()?;
            w.placement_for(mode, &p)?
        }
    };
    let run = simulate(&w.shape, &w.hw, &w.trace, &placement, &mode.configure(&w.sim))?;
    dir.json("report.json", &run.report)?;
    dir.steps(&run.steps)?;
    dir.migrations(&run.migrations)?;
    dir.json("predictor_state.json", &run.states.dump())?;
    Ok(())
}

/// One row of a comparison table.
#[derive(Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub batch: u32,
    pub tokens_per_second: f64,
    pub decode_seconds: f64,
    pub total_seconds: f64,
    pub baseline_tokens_per_second: f64,
    pub speedup_vs_baseline: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub mean_step_imbalance: f64,
    pub gpu_swaps: u64,
    pub dimm_moves: u64,
    pub exposed_migration_seconds: f64,
    pub expected_fc_seconds: f64,
    pub realized_fc_seconds: f64,
}

impl From<&SimReport> for SummaryRow {
    fn from(r: &SimReport) -> Self {
        Self {
            label: r.label.clone(),
            batch: r.batch,
            tokens_per_second: r.tokens_per_second,
            decode_seconds: r.decode_seconds,
            total_seconds: r.total_seconds,
            baseline_tokens_per_second: r.baseline.baseline.tokens_per_second,
            speedup_vs_baseline: r.baseline.speedup,
            recall: r.predictor.report.recall,
            accuracy: r.predictor.report.accuracy,
            mean_step_imbalance: r.mean_step_imbalance,
            gpu_swaps: r.migration.gpu_swaps,
            dimm_moves: r.migration.dimm_moves,
            exposed_migration_seconds: r.breakdown.exposed_migration,
            expected_fc_seconds: r.fc_objective.expected_seconds,
            realized_fc_seconds: r.fc_objective.realized_seconds,
        }
    }
}

/// Every configured mode on one trace, for every configured batch size.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let dir = start(cfg, out)?;
    let trace = trace_for(cfg)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &batch in &cfg.batches {
        let w = workload(cfg, trace.clone(), batch);
        for (_, r) in run_ablation(&w, &cfg.modes)? {
            rows.push(SummaryRow::from(&r));
            reports.push(r);
        }
    }
    dir.csv("ablation.csv", &rows)?;
    dir.json("ablation.json", &reports)
}
