use super::{layer_masses, objective_of, MappingProblem, MappingSolution};
use crate::costmodel::layer_time_gpu;
use crate::error::{Error, Result};
use crate::model::{NeuronPlacement, NeuronRef};

/// Layers at most this large get a move/swap improvement pass.
const LOCAL_SEARCH_MAX_LAYER: u32 = 64;
const LOCAL_SEARCH_MAX_PASSES: usize = 200;

/// Gain-ordered GPU fill followed by longest-processing-time balancing of
/// the rest over the DIMMs.
pub fn solve_greedy(p: &MappingProblem) -> Result<MappingSolution> {
    p.check_total_capacity()?;
    let shape = &p.shape;
    let j = p.num_dimms() as usize;
    let layers = shape.num_layers();
    let sync = p.hw.t_sync_seconds;
    let mut placement = NeuronPlacement::for_shape(shape, j as u32);

    // GPU fill. Per layer, the DIMM side is approximated as perfectly
    // balanced: (remaining mass) · t_dimm / J.
    let mut order: Vec<(f64, NeuronRef)> = Vec::new();
    for l in 0..layers {
        let gain = p.timing.t_dimm(l) - p.timing.t_gpu(l);
        for (i, &f) in p.freq[l as usize].iter().enumerate() {
            if f > 0.0 && gain > 0.0 {
                order.push((f * gain, NeuronRef::new(l, i as u32)));
            }
        }
    }
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut gpu_mass = vec![0.0; layers as usize];
    let mut rest: Vec<f64> = p.freq.iter().map(|f| f.iter().sum()).collect();
    let approx = |l: u32, g: f64, r: f64| {
        layer_time_gpu(g, p.timing.t_gpu(l), sync).max(r * p.timing.t_dimm(l) / j as f64)
    };
    let cap = p.gpu_capacity();
    let mut gpu_used = 0u64;
    for &(_, n) in &order {
        let b = shape.neuron_bytes(n.layer);
        if gpu_used + b > cap {
            continue;
        }
        let l = n.layer;
        let f = p.freq[l as usize][n.index as usize];
        let (g, r) = (gpu_mass[l as usize], rest[l as usize]);
        let (g2, r2) = (g + f, r - f);
        let improves = approx(l, g2, r2) < approx(l, g, r);
        let gpu_not_bottleneck =
            layer_time_gpu(g2, p.timing.t_gpu(l), sync) <= r2 * p.timing.t_dimm(l) / j as f64;
        if improves || gpu_not_bottleneck {
            placement.set_gpu(n, true);
            gpu_used += b;
            gpu_mass[l as usize] = g2;
            rest[l as usize] = r2;
        }
    }
    for l in 0..layers {
        let all = gpu_mass[l as usize] + rest[l as usize];
        if approx(l, gpu_mass[l as usize], rest[l as usize]) >= approx(l, 0.0, all)
            && gpu_mass[l as usize] > 0.0
        {
            for i in 0..shape.neurons_in_layer(l) {
                placement.set_gpu(NeuronRef::new(l, i), false);
            }
        }
    }

    // Owners. Computed-on-DIMM neurons first, heaviest first onto the least
    // loaded DIMM with room; then mirrors and never-active neurons onto
    // whichever DIMM has the most free bytes.
    let mut used = vec![0u64; j];
    let mut deferred: Vec<NeuronRef> = Vec::new();
    for l in 0..layers {
        let b = shape.neuron_bytes(l);
        let mut items: Vec<(f64, u32)> = Vec::new();
        for (i, &f) in p.freq[l as usize].iter().enumerate() {
            let n = NeuronRef::new(l, i as u32);
            if placement.is_gpu_resident(n) || f == 0.0 {
                deferred.push(n);
            } else {
                items.push((f, i as u32));
            }
        }
        items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut load = vec![0.0f64; j];
        for (f, i) in items {
            let d = (0..j)
                .filter(|&d| used[d] + b <= p.hw.dimm_capacity(d as u32))
                .min_by(|&x, &y| {
                    load[x]
                        .total_cmp(&load[y])
                        .then(used[y].cmp(&used[x]))
                        .then(x.cmp(&y))
                })
                .ok_or_else(|| no_room(NeuronRef::new(l, i)))?;
            load[d] += f;
            used[d] += b;
            placement.set_owner(NeuronRef::new(l, i), d as u32);
        }
    }
    deferred.sort_by(|a, b| {
        shape
            .neuron_bytes(b.layer)
            .cmp(&shape.neuron_bytes(a.layer))
            .then(a.cmp(b))
    });
    for n in deferred {
        let d = most_free(p, &used, shape.neuron_bytes(n.layer)).ok_or_else(|| no_room(n))?;
        used[d] += shape.neuron_bytes(n.layer);
        placement.set_owner(n, d as u32);
    }

    let mut gpu_free = cap - placement.gpu_bytes(shape);
    for l in 0..layers {
        if shape.neurons_in_layer(l) <= LOCAL_SEARCH_MAX_LAYER {
            improve_layer(p, &mut placement, l, &mut used, &mut gpu_free);
        }
    }

    let objective = objective_of(&placement, p);
    Ok(MappingSolution {
        placement,
        objective,
        optimal: false,
        nodes: 0,
        solver: "greedy".into(),
    })
}

fn no_room(n: NeuronRef) -> Error {
    Error::Infeasible(format!("greedy packing found no DIMM with room for {n}"))
}

pub(super) fn most_free(p: &MappingProblem, used: &[u64], bytes: u64) -> Option<usize> {
    (0..used.len())
        .filter(|&d| used[d] + bytes <= p.hw.dimm_capacity(d as u32))
        .max_by(|&x, &y| {
            let fx = p.hw.dimm_capacity(x as u32) - used[x];
            let fy = p.hw.dimm_capacity(y as u32) - used[y];
            fx.cmp(&fy).then(y.cmp(&x))
        })
}

/// First-improvement descent over single-neuron moves (owner change, GPU
/// toggle) and pairwise owner swaps within one layer.
fn improve_layer(
    p: &MappingProblem,
    pl: &mut NeuronPlacement,
    l: u32,
    used: &mut [u64],
    gpu_free: &mut u64,
) {
    let n = p.shape.neurons_in_layer(l);
    let b = p.shape.neuron_bytes(l);
    let j = p.num_dimms();
    let cost = |pl: &NeuronPlacement| {
        let (g, d) = layer_masses(pl, p, l);
        p.layer_cost(l, g, &d).layer_total
    };
    let better = |new: f64, old: f64| new < old * (1.0 - 1e-12);
    let mut current = cost(pl);
    for _ in 0..LOCAL_SEARCH_MAX_PASSES {
        let mut moved = false;
        for i in 0..n {
            let x = NeuronRef::new(l, i);
            if p.freq[l as usize][i as usize] == 0.0 {
                continue;
            }
            // GPU toggle
            let on_gpu = pl.is_gpu_resident(x);
            if on_gpu || *gpu_free >= b {
                pl.set_gpu(x, !on_gpu);
                let c = cost(pl);
                if better(c, current) {
                    current = c;
                    if on_gpu {
                        *gpu_free += b;
                    } else {
                        *gpu_free -= b;
                    }
                    moved = true;
                    continue;
                }
                pl.set_gpu(x, on_gpu);
            }
            if on_gpu {
                continue;
            }
            // owner change
            let from = pl.dimm_of(x);
            for to in (0..j).filter(|&d| d != from) {
                if used[to as usize] + b > p.hw.dimm_capacity(to) {
                    continue;
                }
                pl.set_owner(x, to);
                let c = cost(pl);
                if better(c, current) {
                    current = c;
                    used[from as usize] -= b;
                    used[to as usize] += b;
                    moved = true;
                    break;
                }
                pl.set_owner(x, from);
            }
            if pl.dimm_of(x) != from {
                continue;
            }
            // swap with a neuron on another DIMM; byte usage is unchanged
            for k in (i + 1)..n {
                let y = NeuronRef::new(l, k);
                let other = pl.dimm_of(y);
                if pl.is_gpu_resident(y) || other == from {
                    continue;
                }
                pl.set_owner(x, other);
                pl.set_owner(y, from);
                let c = cost(pl);
                if better(c, current) {
                    current = c;
                    moved = true;
                    break;
                }
                pl.set_owner(x, from);
                pl.set_owner(y, other);
            }
        }
        if !moved {
            break;
        }
    }
}
