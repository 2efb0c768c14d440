use ndpsim_core::costmodel::roofline;
use ndpsim_core::engine::{
    default_workload, run_ablation, simulate, simulate_prefill, LatePenalty, MapperChoice, Mode,
    SimConfig, Workload,
};
use ndpsim_core::model::presets;
use ndpsim_core::trace::{generate_trace, ActivationTrace, TraceGenConfig};
use ndpsim_core::{Error, HardwareConfig, ModelShape, NeuronPlacement, NeuronRef, TokenCounts};

fn small_workload(tokens: TokenCounts, drift: f64) -> Workload {
    let shape = ModelShape::uniform("small", 2, 256, 256, 1024);
    let mut hw = presets::hardware("desk").unwrap();
    hw.gpu.memory_bytes = shape.dense_bytes() + shape.total_neuron_bytes() / 8;
    hw.dimm.count = 4;
    let cfg = TraceGenConfig { decode_drift: drift, rng_seed: 11, ..Default::default() };
    let trace = generate_trace(&cfg, &shape, tokens).unwrap();
    Workload {
        shape,
        hw,
        trace,
        sim: SimConfig { audit: true, ..Default::default() },
        mapper: MapperChoice::Greedy,
        seed: 5,
    }
}

fn solved(w: &Workload) -> NeuronPlacement {
    let p = w.mapping_problem().unwrap();
    w.solve(&p).unwrap().placement
}

fn dense_trace(shape: &ModelShape, tokens: TokenCounts) -> ActivationTrace {
    let sizes = shape.layer_sizes();
    let token: Vec<Vec<u32>> = sizes.iter().map(|&n| (0..n).collect()).collect();
    ActivationTrace::new(sizes, tokens, 0.0, vec![token; tokens.total() as usize]).unwrap()
}

fn round_robin(shape: &ModelShape, dimms: u32) -> NeuronPlacement {
    let mut p = NeuronPlacement::for_shape(shape, dimms);
    for l in 0..shape.num_layers() {
        for i in 0..shape.neurons_in_layer(l) {
            p.set_owner(NeuronRef::new(l, i), i % dimms);
        }
    }
    p
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[test]
fn one_block_all_on_gpu_composes_by_hand() {
    let shape = ModelShape::uniform("hand", 1, 64, 16, 32);
    let mut hw = presets::hardware("rtx4090").unwrap();
    hw.dimm.count = 2;
    let tokens = TokenCounts::new(3, 1);
    let trace = dense_trace(&shape, tokens);
    let mut placement = round_robin(&shape, 2);
    for l in 0..2 {
        for i in 0..shape.neurons_in_layer(l) {
            placement.set_gpu(NeuronRef::new(l, i), true);
        }
    }
    // saturated states fire without parent support
    let mut cfg = SimConfig { adjustment: None, rebalancing: false, audit: true, ..Default::default() };
    cfg.predictor.threshold = 14;
    let out = simulate(&shape, &hw, &trace, &placement, &cfg).unwrap();

    let bw = hw.gpu.mem_bandwidth_bytes_per_s as f64;
    let flops = hw.gpu.compute_flops as f64;
    let elem = 2.0;
    let h = 64.0;
    let neuron = |bytes: f64| (bytes / bw).max(2.0 * bytes / elem / flops);
    let qkv = 16.0 * neuron(h * elem) + 2.0 * hw.t_sync_seconds;
    let mlp = 32.0 * neuron(h * elem) + 2.0 * hw.t_sync_seconds;
    // K and V of 4 positions, read across both DIMMs
    let kv = 2.0 * h * elem * 4.0;
    let attention = kv / (2.0 * hw.dimm.internal_bandwidth_bytes_per_s as f64);
    let proj_bytes = h * h * elem;
    let projection = (proj_bytes / bw).max(2.0 * h * h / flops);
    let merge = hw.t_sync_seconds + h * elem / hw.dimm.internal_bandwidth_bytes_per_s as f64;
    let want = qkv + attention + projection + mlp + merge;

    let r = &out.report;
    assert!(rel(r.decode_seconds, want) < 1e-12, "{} vs {want}", r.decode_seconds);
    assert_eq!(r.predictor.counts.false_negative, 0);
    assert_eq!(r.late_seconds, 0.0);
    assert_eq!(r.migration.gpu_swaps + r.migration.dimm_moves, 0);
}

#[test]
fn dense_activation_is_at_least_three_times_slower_than_sparse() {
    let shape = presets::model("desk").unwrap();
    let hw = presets::hardware("desk").unwrap();
    let tokens = TokenCounts::new(16, 16);
    let placement = round_robin(&shape, hw.num_dimms());
    let cfg = SimConfig { adjustment: None, rebalancing: false, audit: false, ..Default::default() };
    let dense = simulate(&shape, &hw, &dense_trace(&shape, tokens), &placement, &cfg).unwrap();
    let sparse_trace = generate_trace(&TraceGenConfig::default(), &shape, tokens).unwrap();
    let sparse = simulate(&shape, &hw, &sparse_trace, &placement, &cfg).unwrap();
    let ratio = dense.report.decode_seconds / sparse.report.decode_seconds;
    assert!(ratio >= 3.0, "dense/sparse decode time {ratio}");
}

#[test]
fn full_pipeline_beats_random_placement() {
    let w = default_workload().unwrap();
    let runs = run_ablation(&w, &[Mode::Random, Mode::Full]).unwrap();
    let speedup = runs[1].1.tokens_per_second / runs[0].1.tokens_per_second;
    assert!(speedup >= 1.2, "full/random {speedup}");
}

#[test]
fn breakdown_adds_up_and_defines_throughput() {
    let w = small_workload(TokenCounts::new(24, 40), 0.2);
    let placement = solved(&w);
    for mode in Mode::ALL {
        for late in [LatePenalty::OwnerDimm, LatePenalty::Free] {
            let mut cfg = mode.configure(&w.sim);
            cfg.late_penalty = late;
            let r = simulate(&w.shape, &w.hw, &w.trace, &placement, &cfg).unwrap().report;
            assert!(rel(r.breakdown.total(), r.total_seconds) < 1e-9, "{mode}");
            assert!(rel(r.breakdown.decode(), r.decode_seconds) < 1e-9, "{mode}");
            let summed: f64 = r.token_seconds.iter().sum();
            assert!(rel(summed, r.decode_seconds) < 1e-9, "{mode}");
            assert!(rel(r.tokens_per_second, 40.0 / r.decode_seconds) < 1e-12, "{mode}");
        }
    }
}

#[test]
fn free_recovery_is_never_slower() {
    let w = small_workload(TokenCounts::new(24, 24), 0.0);
    let placement = solved(&w);
    let base = SimConfig { adjustment: None, rebalancing: false, ..w.sim.clone() };
    let owner = simulate(&w.shape, &w.hw, &w.trace, &placement, &base).unwrap().report;
    let free = simulate(
        &w.shape,
        &w.hw,
        &w.trace,
        &placement,
        &SimConfig { late_penalty: LatePenalty::Free, ..base },
    )
    .unwrap()
    .report;
    assert!(free.decode_seconds <= owner.decode_seconds);
    assert!(owner.late_seconds > 0.0);
    assert_eq!(free.late_seconds, 0.0);
}

#[test]
fn same_inputs_give_identical_reports() {
    let w = small_workload(TokenCounts::new(16, 32), 0.2);
    let placement = solved(&w);
    let a = simulate(&w.shape, &w.hw, &w.trace, &placement, &w.sim).unwrap();
    let b = simulate(&w.shape, &w.hw, &w.trace, &placement, &w.sim).unwrap();
    assert_eq!(serde_json::to_vec(&a.report).unwrap(), serde_json::to_vec(&b.report).unwrap());
    assert_eq!(serde_json::to_vec(&a.steps).unwrap(), serde_json::to_vec(&b.steps).unwrap());
    assert_eq!(a.placement, b.placement);

    let twice = run_ablation(&w, &[Mode::Full, Mode::Full]).unwrap();
    assert_eq!(twice[0].1, twice[1].1);
}

#[test]
fn audit_covers_every_decode_activation() {
    let w = small_workload(TokenCounts::new(16, 20), 0.2);
    let placement = solved(&w);
    let out = simulate(&w.shape, &w.hw, &w.trace, &placement, &w.sim).unwrap();
    let want: u64 = w
        .trace
        .decode_range()
        .flat_map(|t| (0..w.shape.num_layers()).map(move |l| (t, l)))
        .map(|(t, l)| w.trace.active(t, l).len() as u64)
        .sum();
    assert_eq!(out.report.audited_activations, Some(want));
    let c = out.report.predictor.counts;
    assert_eq!(c.true_positive + c.false_negative, want);
    for s in &out.steps {
        assert_eq!(s.true_positive + s.false_negative, s.actual);
        assert_eq!(s.true_positive + s.false_positive, s.predicted);
    }
}

#[test]
fn migration_is_exposed_only_past_the_budget() {
    let w = small_workload(TokenCounts::new(16, 40), 0.3);
    let placement = solved(&w);
    let budget = ndpsim_core::costmodel::projection_time(&w.shape, 1, &w.hw);
    for hide in [true, false] {
        let cfg = SimConfig { hide_swaps: hide, ..w.sim.clone() };
        let out = simulate(&w.shape, &w.hw, &w.trace, &placement, &cfg).unwrap();
        assert!(!out.migrations.is_empty());
        for m in &out.migrations {
            let c = m.cost;
            assert_eq!(c.exposed_seconds > 0.0, c.transfer_seconds > budget);
            assert!(rel(c.hidden_seconds + c.exposed_seconds, c.transfer_seconds) < 1e-12);
        }
        let exposed: f64 = out.migrations.iter().map(|m| m.cost.exposed_seconds).sum();
        assert!(rel(exposed, out.report.breakdown.exposed_migration) < 1e-9 || exposed == 0.0);
        if hide {
            // swap-ins alone are capped at what the projection hides
            for m in &out.migrations {
                let pcie = m.plan.pcie_bytes as f64 / w.hw.pcie_bandwidth_bytes_per_s as f64;
                assert!(pcie <= budget * (1.0 + 1e-12));
            }
        }
    }
}

#[test]
fn prefill_records_prompt_frequencies() {
    let w = small_workload(TokenCounts::new(10, 4), 0.0);
    let pre = simulate_prefill(&w.shape, &w.hw, &w.trace, 1).unwrap();
    for l in 0..w.shape.num_layers() {
        let mut want = vec![0.0; w.shape.neurons_in_layer(l) as usize];
        for t in 0..10 {
            for &i in w.trace.active(t, l) {
                want[i as usize] += 0.1;
            }
        }
        for (a, b) in pre.freq[l as usize].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(pre.cost.pcie_seconds > 0.0);

    let mut roomy: HardwareConfig = w.hw.clone();
    roomy.gpu.memory_bytes = w.shape.total_model_bytes();
    let fits = simulate_prefill(&w.shape, &roomy, &w.trace, 1).unwrap();
    assert_eq!(fits.cost.pcie_seconds, 0.0);
    assert_eq!(fits.cost.compute_seconds, pre.cost.compute_seconds);
}

#[test]
fn prefill_of_a_spreadsheet_case() {
    let shape = ModelShape::uniform("calc", 2, 100, 10, 20);
    let mut hw = presets::hardware("rtx4090").unwrap();
    // one block fits: block bytes = (10 + 20) * 200 + 100 * 100 * 2 = 26_000
    hw.gpu.memory_bytes = 30_000;
    let trace = dense_trace(&shape, TokenCounts::new(4, 1));
    let pre = simulate_prefill(&shape, &hw, &trace, 2).unwrap();
    assert!(rel(pre.cost.pcie_seconds, 26_000.0 / 64e9) < 1e-12);
    let block = roofline(26_000.0, 2.0 * 13_000.0 * 8.0, 936e9, 330e12);
    assert!(rel(pre.cost.compute_seconds, 2.0 * block) < 1e-12);
}

#[test]
fn bad_inputs_fail_before_stepping() {
    let w = small_workload(TokenCounts::new(8, 4), 0.0);
    let placement = solved(&w);
    let other = ModelShape::uniform("other", 2, 256, 128, 1024);
    assert!(matches!(
        simulate(&other, &w.hw, &w.trace, &placement, &w.sim),
        Err(Error::Config(_))
    ));

    let mut crowded = placement.clone();
    for l in 0..w.shape.num_layers() {
        for i in 0..w.shape.neurons_in_layer(l) {
            crowded.set_gpu(NeuronRef::new(l, i), true);
        }
    }
    assert!(matches!(
        simulate(&w.shape, &w.hw, &w.trace, &crowded, &w.sim),
        Err(Error::Infeasible(_))
    ));

    assert!(simulate(&w.shape, &w.hw, &w.trace, &placement, &SimConfig { batch: 0, ..w.sim.clone() }).is_err());
}

#[test]
fn online_placement_stays_feasible() {
    let w = small_workload(TokenCounts::new(16, 40), 0.3);
    let placement = solved(&w);
    let out = simulate(&w.shape, &w.hw, &w.trace, &placement, &w.sim).unwrap();
    let v = ndpsim_core::validate_placement(&out.placement, &w.shape, &w.hw).unwrap();
    assert!(v.is_empty(), "{v:?}");
    assert!(out.report.migration.gpu_swaps > 0);
    assert!(out.report.migration.dimm_moves > 0);
    assert!(!out.report.imbalance.is_empty());
}

#[test]
fn expected_objective_is_the_mappers() {
    let w = small_workload(TokenCounts::new(32, 16), 0.0);
    let p = w.mapping_problem().unwrap();
    let sol = w.solve(&p).unwrap();
    let r = simulate(&w.shape, &w.hw, &w.trace, &sol.placement, &w.sim).unwrap().report;
    assert!(rel(r.fc_objective.expected_seconds, ndpsim_core::mapper::objective_of(&sol.placement, &p)) < 1e-12);
    assert!(r.fc_objective.realized_seconds > 0.0);

    // a fully dense trace realizes every neuron on every token
    let trace = dense_trace(&w.shape, TokenCounts::new(2, 3));
    let r = simulate(&w.shape, &w.hw, &trace, &sol.placement, &w.sim).unwrap().report;
    assert!(rel(r.fc_objective.expected_seconds, r.fc_objective.realized_seconds) < 1e-12);
}
