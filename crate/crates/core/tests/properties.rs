use proptest::prelude::*;

use ndpsim_core::costmodel::{layer_latency, DeviceTiming};
use ndpsim_core::mapper::{random_placement, MappingProblem};
use ndpsim_core::model::presets;
use ndpsim_core::predictor::{NeuronStateTable, PredictorConfig, MAX_STATE};
use ndpsim_core::scheduler::{
    adjust_hot_cold, adjust_layer, dimm_activity, imbalance, rebalance_window, SchedulerConfig,
    SwapScope, WindowActivity,
};
use ndpsim_core::trace::{generate_trace, load_trace, save_trace, TraceGenConfig};
use ndpsim_core::{validate_placement, HardwareConfig, ModelShape, NeuronPlacement, NeuronRef, TokenCounts};

#[derive(Debug)]
struct Case {
    shape: ModelShape,
    hw: HardwareConfig,
    placement: NeuronPlacement,
}

/// A random feasible placement of a 2-block model whose attention and MLP
/// neurons differ in size.
fn case(dimms: u32, gpu_slots: u64, slack: f64, seed: u64) -> Case {
    let mut shape = ModelShape::uniform("prop", 2, 16, 12, 20);
    shape.mlp_neuron_bytes = Some(48);
    let mut hw = presets::hardware("rtx4090").unwrap();
    hw.dimm.count = dimms;
    let per_dimm = shape.total_neuron_bytes() as f64 / f64::from(dimms);
    hw.dimm.memory_bytes = (per_dimm * slack).ceil() as u64 + 48;
    hw.gpu.memory_bytes = shape.dense_bytes() + gpu_slots * 32;
    let timing = DeviceTiming::derive(&shape, &hw, 1);
    let freq = shape.layer_sizes().iter().map(|&n| vec![0.5; n as usize]).collect();
    let p = MappingProblem::new(shape.clone(), hw.clone(), timing, freq).unwrap();
    let placement = random_placement(&p, seed).unwrap();
    Case { shape, hw, placement }
}

fn states(shape: &ModelShape, values: &[u8]) -> NeuronStateTable {
    let mut t = NeuronStateTable::new(&shape.layer_sizes());
    let mut k = 0;
    for l in 0..shape.num_layers() {
        for i in 0..shape.neurons_in_layer(l) {
            t.set(NeuronRef::new(l, i), values[k % values.len()] % (MAX_STATE + 1));
            k += 1;
        }
    }
    t
}

fn activity(shape: &ModelShape, values: &[u8], window: u32) -> WindowActivity {
    let mut k = 0;
    let counts = shape
        .layer_sizes()
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    k += 1;
                    values[k % values.len()] % (window as u8 + 1)
                })
                .collect()
        })
        .collect();
    WindowActivity::from_counts(counts, window).unwrap()
}

fn feasible(c: &Case, p: &NeuronPlacement) -> bool {
    validate_placement(p, &c.shape, &c.hw).unwrap().is_empty()
}

prop_compose! {
    fn arb_case()(dimms in prop::sample::select(vec![2u32, 4, 6]),
                  gpu in 0u64..40,
                  slack in 1.05f64..2.0,
                  seed in any::<u64>()) -> Case {
        case(dimms, gpu, slack, seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn plans_preserve_feasibility(
        c in arb_case(),
        s in prop::collection::vec(any::<u8>(), 1..200),
        a in prop::collection::vec(any::<u8>(), 1..200),
        window in 1u32..10,
    ) {
        let cfg = PredictorConfig::default();
        let table = states(&c.shape, &s);
        let plan = adjust_hot_cold(&c.placement, &table, &cfg, &c.shape, &c.hw);
        let mut p = c.placement.clone();
        plan.apply(&mut p);
        prop_assert!(feasible(&c, &p));

        let w = activity(&c.shape, &a, window);
        let layers: Vec<u32> = (0..c.shape.num_layers()).collect();
        let out = rebalance_window(&p, &w, &layers, &c.shape, &c.hw, &SchedulerConfig::default());
        out.plan.apply(&mut p);
        prop_assert!(feasible(&c, &p));
        prop_assert_eq!(dimm_activity(&p, &w, &layers), out.z_after);
    }

    #[test]
    fn owner_scoped_swaps_keep_feasibility_and_dimm_shares(
        c in arb_case(),
        s in prop::collection::vec(0u32..40, 1..64),
        hot in 0u32..30,
        cap in 0u32..20,
    ) {
        let mut p = c.placement.clone();
        let mut free = c.hw.gpu_neuron_capacity(&c.shape).saturating_sub(p.gpu_bytes(&c.shape));
        let had_free = free >= 32;
        for l in 0..c.shape.num_layers() {
            let scores: Vec<u32> = (0..c.shape.neurons_in_layer(l) as usize).map(|i| s[i % s.len()]).collect();
            let before: Vec<usize> = (0..c.hw.num_dimms()).map(|d| {
                (0..scores.len()).filter(|&i| p.owners(l)[i] as u32 == d && p.gpu_flags(l)[i]).count()
            }).collect();
            let plan = adjust_layer(&p, l, &scores, hot, &mut free, c.shape.neuron_bytes(l), cap, SwapScope::OwnerDimm, 0);
            prop_assert!(plan.gpu_swaps.len() <= cap as usize);
            for sw in &plan.gpu_swaps {
                prop_assert!(scores[sw.incoming.index as usize] > hot);
                if let Some(out) = sw.outgoing {
                    prop_assert_eq!(p.dimm_of(out), p.dimm_of(sw.incoming));
                    prop_assert!(scores[out.index as usize] < scores[sw.incoming.index as usize]);
                }
            }
            plan.apply(&mut p);
            prop_assert!(feasible(&c, &p));
            if !had_free {
                let after: Vec<usize> = (0..c.hw.num_dimms()).map(|d| {
                    (0..scores.len()).filter(|&i| p.owners(l)[i] as u32 == d && p.gpu_flags(l)[i]).count()
                }).collect();
                prop_assert_eq!(before, after);
            }
        }
    }

    #[test]
    fn rebalance_never_widens_a_pair(
        c in arb_case(),
        a in prop::collection::vec(any::<u8>(), 1..200),
        window in 1u32..10,
    ) {
        let w = activity(&c.shape, &a, window);
        for layers in [vec![0u32], vec![1], vec![2, 3], vec![0, 1, 2, 3]] {
            let out = rebalance_window(&c.placement, &w, &layers, &c.shape, &c.hw, &SchedulerConfig::default());
            for pair in &out.pairs {
                prop_assert!(pair.gap_after <= pair.gap_before, "{:?}", pair);
            }
            prop_assert!(out.imbalance_after <= out.imbalance_before + 1e-12);
            prop_assert_eq!(out.z_after.iter().sum::<u64>(), out.z_before.iter().sum::<u64>());
        }
    }

    #[test]
    fn iterated_rebalance_reaches_a_fixed_point(
        c in arb_case(),
        a in prop::collection::vec(any::<u8>(), 1..200),
        window in 1u32..10,
    ) {
        let w = activity(&c.shape, &a, window);
        let layers: Vec<u32> = (0..c.shape.num_layers()).collect();
        let n = c.shape.total_neurons() as usize;
        let mut p = c.placement.clone();
        let mut moves = 0;
        let mut squares = u128::MAX;
        loop {
            let out = rebalance_window(&p, &w, &layers, &c.shape, &c.hw, &SchedulerConfig::default());
            if out.plan.is_empty() {
                break;
            }
            let sq: u128 = out.z_after.iter().map(|&z| u128::from(z) * u128::from(z)).sum();
            prop_assert!(sq < squares);
            squares = sq;
            moves += out.plan.dimm_moves.len();
            prop_assert!(moves <= n, "{moves} moves for {n} neurons");
            out.plan.apply(&mut p);
        }
    }

    #[test]
    fn plan_bytes_match_moved_neurons(
        c in arb_case(),
        s in prop::collection::vec(any::<u8>(), 1..200),
        a in prop::collection::vec(any::<u8>(), 1..200),
    ) {
        let table = states(&c.shape, &s);
        let mut plan = adjust_hot_cold(&c.placement, &table, &PredictorConfig::default(), &c.shape, &c.hw);
        let w = activity(&c.shape, &a, 5);
        let layers: Vec<u32> = (0..c.shape.num_layers()).collect();
        plan.extend(rebalance_window(&c.placement, &w, &layers, &c.shape, &c.hw, &SchedulerConfig::default()).plan);
        let pcie: u64 = plan.gpu_swaps.iter().map(|s| c.shape.neuron_bytes(s.incoming.layer)).sum();
        let link: u64 = plan.dimm_moves.iter().map(|m| c.shape.neuron_bytes(m.neuron.layer)).sum();
        prop_assert_eq!(plan.pcie_bytes, pcie);
        prop_assert_eq!(plan.dimmlink_bytes, link);
        prop_assert!(plan.dimmlink_critical_bytes(c.hw.num_dimms()) <= 2 * link);
        prop_assert!(plan.dimmlink_critical_bytes(c.hw.num_dimms()) >= link.div_ceil(u64::from(c.hw.num_dimms())));
    }

    #[test]
    fn imbalance_matches_definition(z in prop::collection::vec(0u64..1_000_000, 1..16)) {
        let total: u64 = z.iter().sum();
        let got = imbalance(&z);
        if total == 0 {
            prop_assert_eq!(got, 1.0);
        } else {
            let mean = total as f64 / z.len() as f64;
            let want = *z.iter().max().unwrap() as f64 / mean;
            prop_assert!((got - want).abs() <= 1e-12 * want);
            prop_assert!(got >= 1.0 - 1e-12 && got <= z.len() as f64 + 1e-12);
        }
    }

    #[test]
    fn layer_latency_is_monotone_in_load(
        gpu in 0.0f64..1000.0,
        dimms in prop::collection::vec(0.0f64..1000.0, 1..8),
        k in 0usize..8,
        extra in 0.0f64..100.0,
        tg in 1e-9f64..1e-6,
        td in 1e-9f64..1e-5,
        sync in 0.0f64..1e-5,
    ) {
        let timing = DeviceTiming { batch: 1, gpu: vec![tg], dimm: vec![td] };
        let base = layer_latency(gpu, &dimms, 0, &timing, sync).layer_total;
        let more_gpu = layer_latency(gpu + extra, &dimms, 0, &timing, sync).layer_total;
        let mut d = dimms.clone();
        let k = k % d.len();
        d[k] += extra;
        let more_dimm = layer_latency(gpu, &d, 0, &timing, sync).layer_total;
        prop_assert!(more_gpu >= base);
        prop_assert!(more_dimm >= base);
        let slower = DeviceTiming { batch: 1, gpu: vec![tg * 2.0], dimm: vec![td * 2.0] };
        prop_assert!(layer_latency(gpu, &dimms, 0, &slower, sync).layer_total >= base);
    }

    #[test]
    fn state_updates_stay_in_range(
        start in prop::collection::vec(0u8..=15, 1..40),
        steps in prop::collection::vec(any::<bool>(), 1..200),
        increment in 1u8..=15,
    ) {
        let sizes = [start.len() as u32];
        let mut t = NeuronStateTable::new(&sizes);
        for (i, &s) in start.iter().enumerate() {
            t.set(NeuronRef::new(0, i as u32), s);
        }
        let cfg = PredictorConfig { increment, ..Default::default() };
        let mut mirror: Vec<u8> = start.clone();
        for (k, &fire_even) in steps.iter().enumerate() {
            let active: Vec<u32> = (0..start.len() as u32).filter(|i| (i % 2 == 0) == fire_even || k % 7 == 0).collect();
            t.update_layer(0, &active, &cfg);
            for (i, m) in mirror.iter_mut().enumerate() {
                *m = if active.contains(&(i as u32)) { (*m + increment).min(15) } else { m.saturating_sub(1) };
            }
            prop_assert_eq!(t.layer_states(0), mirror.clone());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_traces_hold_their_invariants(
        sparsity in 0.5f64..0.95,
        retention in 0.0f64..1.0,
        drift in 0.0f64..1.0,
        seed in any::<u64>(),
        prefill in 1u32..8,
        decode in 1u32..8,
    ) {
        let shape = ModelShape::uniform("gen", 2, 8, 30, 50);
        let cfg = TraceGenConfig {
            sparsity,
            adjacency_retention: retention,
            decode_drift: drift,
            rng_seed: seed,
            ..Default::default()
        };
        let tokens = TokenCounts::new(prefill, decode);
        let trace = generate_trace(&cfg, &shape, tokens).unwrap();
        prop_assert!(trace.check_shape(&shape).is_ok());
        prop_assert_eq!(trace.num_tokens(), prefill + decode);
        for t in 0..trace.num_tokens() {
            for l in 0..shape.num_layers() {
                let set = trace.active(t, l);
                prop_assert_eq!(set.len() as u32, cfg.quota(shape.neurons_in_layer(l)));
                prop_assert!(set.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(set.iter().all(|&i| i < shape.neurons_in_layer(l)));
            }
        }
        prop_assert_eq!(&generate_trace(&cfg, &shape, tokens).unwrap(), &trace);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        save_trace(&trace, &path).unwrap();
        prop_assert_eq!(load_trace(&path, Some(&shape)).unwrap(), trace);
    }
}
