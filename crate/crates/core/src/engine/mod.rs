//! Token-by-token decode simulation.
//!
//! Each transformer block runs: QKV FC layer split between the GPU and the
//! DIMMs, attention on the DIMMs, the dense projection on the GPU (with
//! migrations hidden behind it while the DIMMs idle), the MLP FC layer split
//! like QKV, then a merge of the partial results. Predictor states follow
//! the trace's ground truth after every layer.

mod ablation;
mod report;

pub use ablation::{
    default_trace_config, default_workload, run_ablation, MapperChoice, Mode, Workload,
};
pub use report::{
    BaselineComparison, FcObjective, ImbalanceSample, MigrationEvent, MigrationTotals, PhaseBreakdown,
    PredictorMetrics, SimReport, StepRecord,
};

use serde::{Deserialize, Serialize};

use crate::costmodel::{
    attention_time, baseline_offload_latency, layer_latency, merge_time, migration_time,
    prefill_time, projection_time, DeviceTiming, PrefillCost,
};
use crate::error::{Error, Result};
use crate::model::{validate_placement, HardwareConfig, ModelShape, NeuronPlacement};
use crate::predictor::{
    build_correlation_table, predict_layer, CorrelationTable, NeuronStateTable, PredictionCounts,
    PredictorConfig,
};
use crate::scheduler::{
    adjust_layer, dimm_activity, guidance_scores, imbalance, rebalance_window, ActivityScope,
    Guidance, MigrationPlan, SchedulerConfig, WindowActivity,
};
use crate::trace::{measure_stats, ActivationTrace};

/// What happens to neurons that fire without having been predicted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatePenalty {
    /// Computed on their owning DIMMs after the main pass.
    #[default]
    OwnerDimm,
    /// Not charged; for sensitivity studies.
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub label: String,
    pub batch: u32,
    pub predictor: PredictorConfig,
    pub scheduler: SchedulerConfig,
    /// Online hot/cold adjustment and the signal guiding it; none disables
    /// it.
    pub adjustment: Option<Guidance>,
    pub rebalancing: bool,
    pub late_penalty: LatePenalty,
    /// Limit GPU copies per projection to what its budget hides.
    pub hide_swaps: bool,
    /// Check that every activated neuron is computed exactly once.
    pub audit: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            label: "full".into(),
            batch: 1,
            predictor: PredictorConfig::default(),
            scheduler: SchedulerConfig::default(),
            adjustment: Some(Guidance::Combined),
            rebalancing: true,
            late_penalty: LatePenalty::OwnerDimm,
            hide_swaps: true,
            audit: cfg!(debug_assertions),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        self.predictor.validate()?;
        self.scheduler.validate()
    }
}

/// A finished run: the report plus the per-step and migration logs and the
/// final online state.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub report: SimReport,
    pub steps: Vec<StepRecord>,
    pub migrations: Vec<MigrationEvent>,
    pub states: NeuronStateTable,
    pub placement: NeuronPlacement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefillResult {
    pub cost: PrefillCost,
    /// Per-neuron activation frequencies over the trace's prompt tokens.
    pub freq: Vec<Vec<f64>>,
}

/// Prompt processing cost and the activation profile it records.
pub fn simulate_prefill(
    shape: &ModelShape,
    hw: &HardwareConfig,
    trace: &ActivationTrace,
    batch: u32,
) -> Result<PrefillResult> {
    trace.check_shape(shape)?;
    let stats = measure_stats(trace, trace.prefill_range())?;
    Ok(PrefillResult {
        cost: prefill_time(shape, hw, trace.tokens().prefill, batch),
        freq: stats.freq,
    })
}

/// Predictor state after prefill: states from prompt frequencies and the
/// parent table from prompt co-activations.
pub fn initial_predictor(
    trace: &ActivationTrace,
    cfg: &PredictorConfig,
) -> Result<(NeuronStateTable, CorrelationTable)> {
    let stats = measure_stats(trace, trace.prefill_range())?;
    Ok((NeuronStateTable::init_states(&stats.freq), build_correlation_table(&stats, cfg)))
}

pub fn simulate(
    shape: &ModelShape,
    hw: &HardwareConfig,
    trace: &ActivationTrace,
    placement: &NeuronPlacement,
    cfg: &SimConfig,
) -> Result<SimOutput> {
    cfg.validate()?;
    hw.validate_for(shape)?;
    trace.check_shape(shape)?;
    let violations = validate_placement(placement, shape, hw)?;
    if let Some(v) = violations.first() {
        return Err(Error::Infeasible(format!("placement violates capacity: {v}")));
    }

    let batch = cfg.batch;
    let pcfg = &cfg.predictor;
    let timing = DeviceTiming::derive(shape, hw, batch);
    let sync = hw.t_sync_seconds;
    let j = hw.num_dimms() as usize;
    let tokens = trace.tokens();
    let layers = shape.num_layers();
    let blocks = shape.transformer_layers;

    let prefill = simulate_prefill(shape, hw, trace, batch)?;
    let fc_objective = fc_objective(placement, &prefill.freq, trace, &timing, sync);
    let (mut states, corr) = initial_predictor(trace, pcfg)?;
    let mut placement = placement.clone();
    let mut gpu_free = hw
        .gpu_neuron_capacity(shape)
        .saturating_sub(placement.gpu_bytes(shape));

    let proj = projection_time(shape, batch, hw);
    let merge = merge_time(shape, batch, hw);
    let scopes: Vec<Vec<u32>> = (0..blocks)
        .map(|b| match cfg.scheduler.activity_scope {
            ActivityScope::PerLayer => Vec::new(),
            ActivityScope::Aggregate => vec![2 * b, 2 * b + 1],
        })
        .collect();

    let mut bd = PhaseBreakdown { prefill: prefill.cost.total(), ..Default::default() };
    let mut late_total = 0.0;
    let mut counts = PredictionCounts::default();
    let mut steps = Vec::with_capacity((tokens.decode * layers) as usize);
    let mut migrations = Vec::new();
    let mut totals = MigrationTotals::default();
    let mut token_seconds = Vec::with_capacity(tokens.decode as usize);
    let mut samples = Vec::new();
    let mut step_imbalance_sum = 0.0;
    let mut window = WindowActivity::new(&shape.layer_sizes(), cfg.scheduler.window);
    let mut audited = 0u64;
    let mut ledger: Vec<u8> = Vec::new();

    for t in 0..tokens.decode {
        let tt = tokens.prefill + t;
        let snapshot = if window.is_complete() {
            let w = window.clone();
            window.reset();
            Some(w)
        } else {
            None
        };
        let mut sample = snapshot.as_ref().map(|_| (0.0, 0.0, 0u32));
        let mut token_time = 0.0;
        let context = u64::from(tt) + 1;
        let attention = attention_time(shape.kv_bytes(context, batch), hw);

        for b in 0..blocks {
            for l in [2 * b, 2 * b + 1] {
                if l == 2 * b + 1 {
                    // between the two FC layers: attention, projection, migration
                    bd.attention += attention;
                    bd.projection += proj;
                    token_time += attention + proj;
                    let mut plan = MigrationPlan::default();
                    if let Some(g) = cfg.adjustment {
                        let mut pcie_left = if cfg.hide_swaps {
                            (proj * hw.pcie_bandwidth_bytes_per_s as f64) as u64
                        } else {
                            u64::MAX
                        };
                        for (al, parent) in [(2 * b + 1, 2 * b), (2 * b, 2 * b.max(1) - 1)] {
                            let parents: &[u32] = if al == 0 { &[] } else { trace.active(tt, parent) };
                            let (scores, hot) = guidance_scores(g, &states, &corr, parents, al, pcfg);
                            let bytes = shape.neuron_bytes(al);
                            let cap = (pcie_left / bytes).min(u64::from(cfg.scheduler.max_swaps_per_layer));
                            let p = adjust_layer(
                                &placement,
                                al,
                                &scores,
                                hot,
                                &mut gpu_free,
                                bytes,
                                cap as u32,
                                cfg.scheduler.swap_scope,
                                cfg.scheduler.swap_margin,
                            );
                            pcie_left -= p.pcie_bytes;
                            p.apply(&mut placement);
                            plan.extend(p);
                        }
                    }
                    if let (Some(w), Some(s)) = (&snapshot, sample.as_mut()) {
                        let block_scopes: Vec<Vec<u32>> = if scopes[b as usize].is_empty() {
                            vec![vec![2 * b], vec![2 * b + 1]]
                        } else {
                            vec![scopes[b as usize].clone()]
                        };
                        for scope in block_scopes {
                            if cfg.rebalancing {
                                let out = rebalance_window(&placement, w, &scope, shape, hw, &cfg.scheduler);
                                out.plan.apply(&mut placement);
                                s.0 += out.imbalance_before;
                                s.1 += out.imbalance_after;
                                plan.extend(out.plan);
                            } else {
                                let z = imbalance(&dimm_activity(&placement, w, &scope));
                                s.0 += z;
                                s.1 += z;
                            }
                            s.2 += 1;
                        }
                    }
                    if !plan.is_empty() {
                        let link = plan.dimmlink_critical_bytes(hw.num_dimms());
                        let cost = migration_time(link, plan.pcie_bytes, proj, hw);
                        bd.exposed_migration += cost.exposed_seconds;
                        token_time += cost.exposed_seconds;
                        totals.add(&plan, &cost);
                        migrations.push(MigrationEvent { token: t, block: b, plan, cost });
                    }
                }

                let prev: &[u32] = if l == 0 { &[] } else { trace.active(tt, l - 1) };
                let predicted = predict_layer(&states, &corr, prev, l, pcfg);
                let actual = trace.active(tt, l);
                let owners = placement.owners(l);
                let flags = placement.gpu_flags(l);
                let mut gpu_n = 0u32;
                let mut dimm_n = vec![0u32; j];
                let mut late_n = vec![0u32; j];
                let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
                if cfg.audit {
                    ledger.clear();
                    ledger.resize(shape.neurons_in_layer(l) as usize, 0);
                }
                let (mut pi, mut ai) = (0, 0);
                while pi < predicted.len() || ai < actual.len() {
                    let p = predicted.get(pi).copied().unwrap_or(u32::MAX);
                    let a = actual.get(ai).copied().unwrap_or(u32::MAX);
                    let i = p.min(a) as usize;
                    if p <= a {
                        if flags[i] {
                            gpu_n += 1;
                        } else {
                            dimm_n[owners[i] as usize] += 1;
                        }
                        if p == a {
                            tp += 1;
                            ai += 1;
                        } else {
                            fp += 1;
                        }
                        pi += 1;
                    } else {
                        late_n[owners[i] as usize] += 1;
                        fn_ += 1;
                        ai += 1;
                    }
                    if cfg.audit {
                        ledger[i] += 1;
                    }
                }
                if cfg.audit {
                    for &i in actual {
                        if ledger[i as usize] != 1 {
                            return Err(Error::structural(format!(
                                "audit: neuron {i} of layer {l} computed {} times at token {t}",
                                ledger[i as usize]
                            )));
                        }
                    }
                    audited += actual.len() as u64;
                }
                counts.record(&predicted, actual, shape.neurons_in_layer(l));

                let dimm_f: Vec<f64> = dimm_n.iter().map(|&n| f64::from(n)).collect();
                let main = layer_latency(f64::from(gpu_n), &dimm_f, l, &timing, sync);
                let max_dimm = main.max_dimm();
                let late = match cfg.late_penalty {
                    LatePenalty::OwnerDimm => {
                        f64::from(late_n.iter().copied().max().unwrap_or(0)) * timing.t_dimm(l)
                    }
                    LatePenalty::Free => 0.0,
                };
                let layer_seconds = main.layer_total + late;
                let sync_part = if gpu_n > 0 && main.gpu_seconds >= max_dimm { 2.0 * sync } else { 0.0 };
                bd.sync += sync_part;
                if l % 2 == 0 {
                    bd.qkv += layer_seconds - sync_part;
                } else {
                    bd.mlp += layer_seconds - sync_part;
                }
                late_total += late;
                token_time += layer_seconds;

                let computed: Vec<u64> = dimm_n.iter().zip(&late_n).map(|(&a, &b)| u64::from(a + b)).collect();
                let imb = imbalance(&computed);
                step_imbalance_sum += imb;
                steps.push(StepRecord {
                    token: t,
                    layer: l,
                    kind: shape.layer_kind(l),
                    predicted: predicted.len() as u32,
                    actual: actual.len() as u32,
                    true_positive: tp,
                    false_positive: fp,
                    false_negative: fn_,
                    gpu_neurons: gpu_n,
                    max_dimm_neurons: dimm_n.iter().copied().max().unwrap_or(0),
                    gpu_seconds: main.gpu_seconds,
                    dimm_seconds: max_dimm,
                    late_seconds: late,
                    layer_seconds,
                    imbalance: imb,
                });

                states.update_layer(l, actual, pcfg);
                window.record(l, actual);
            }
            bd.merge += merge.transfer_seconds;
            bd.sync += merge.sync_seconds;
            token_time += merge.total();
        }
        window.end_token();
        token_seconds.push(token_time);
        if let Some((before, after, n)) = sample {
            if n > 0 {
                samples.push(ImbalanceSample {
                    token: t,
                    before: before / f64::from(n),
                    after: after / f64::from(n),
                });
            }
        }
    }

    let decode_seconds: f64 = token_seconds.iter().sum();
    let total_seconds = bd.total();
    let tokens_per_second = if decode_seconds > 0.0 {
        f64::from(tokens.decode) / decode_seconds
    } else {
        0.0
    };
    let baseline = baseline_offload_latency(shape, hw, tokens, batch);
    let speedup = if baseline.tokens_per_second > 0.0 {
        tokens_per_second / baseline.tokens_per_second
    } else {
        0.0
    };
    let report = SimReport {
        label: cfg.label.clone(),
        batch,
        tokens,
        tokens_per_second,
        total_seconds,
        decode_seconds,
        breakdown: bd,
        late_seconds: late_total,
        token_seconds,
        predictor: PredictorMetrics { counts, report: counts.report() },
        mean_step_imbalance: if steps.is_empty() {
            1.0
        } else {
            step_imbalance_sum / steps.len() as f64
        },
        imbalance: samples,
        migration: totals,
        baseline: BaselineComparison { baseline, speedup },
        fc_objective,
        audited_activations: cfg.audit.then_some(audited),
    };
    Ok(SimOutput { report, steps, migrations, states, placement })
}

fn fc_objective(
    placement: &NeuronPlacement,
    freq: &[Vec<f64>],
    trace: &ActivationTrace,
    timing: &DeviceTiming,
    sync: f64,
) -> FcObjective {
    let j = placement.num_dimms() as usize;
    let layer = |l: u32, weight: &mut dyn FnMut(&mut f64, &mut [f64])| {
        let (mut gpu, mut dimm) = (0.0, vec![0.0; j]);
        weight(&mut gpu, &mut dimm);
        layer_latency(gpu, &dimm, l, timing, sync).layer_total
    };
    let mut expected = 0.0;
    for l in 0..placement.num_layers() {
        let (owners, flags) = (placement.owners(l), placement.gpu_flags(l));
        expected += layer(l, &mut |g, d| {
            for (i, &f) in freq[l as usize].iter().enumerate() {
                if flags[i] {
                    *g += f;
                } else {
                    d[owners[i] as usize] += f;
                }
            }
        });
    }
    let mut realized = 0.0;
    for t in trace.decode_range() {
        for l in 0..placement.num_layers() {
            let (owners, flags) = (placement.owners(l), placement.gpu_flags(l));
            realized += layer(l, &mut |g, d| {
                for &i in trace.active(t, l) {
                    if flags[i as usize] {
                        *g += 1.0;
                    } else {
                        d[owners[i as usize] as usize] += 1.0;
                    }
                }
            });
        }
    }
    let n = trace.decode_range().len().max(1) as f64;
    FcObjective { expected_seconds: expected, realized_seconds: realized / n }
}
