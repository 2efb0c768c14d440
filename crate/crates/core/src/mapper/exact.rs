//! Branch-and-bound over compute locations.
//!
//! Every neuron with nonzero frequency branches on where it is computed:
//! the GPU or one of the DIMMs. A neuron computed on DIMM j is owned by j.
//! GPU mirrors and never-active neurons do not affect the objective; they
//! receive owners at each leaf by largest-first packing onto the DIMM with
//! the most free bytes, which is exact when sizes are uniform.
//!
//! Bound: the max in each layer's cost is linearized with an auxiliary
//! variable z_l ≥ T_gpu, z_l ≥ T_dimm_j. Relaxing the unassigned neurons of
//! a layer to fractional mass, the smallest feasible z_l is found by
//! water-filling the remaining mass over the devices' spare time up to z_l.
//! Layers not yet reached use the same bound from an empty start.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::greedy::{most_free, solve_greedy};
use super::{objective_of, MappingProblem, MappingSolution};
use crate::costmodel::layer_time_gpu;
use crate::error::{Error, Result};
use crate::model::{NeuronPlacement, NeuronRef};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveLimits {
    pub max_nodes: u64,
    /// Wall-clock cap. Results under a time cap can depend on machine speed.
    pub time_limit: Option<Duration>,
}

impl Default for SolveLimits {
    fn default() -> Self {
        Self { max_nodes: 50_000_000, time_limit: None }
    }
}

struct Item {
    layer: u32,
    index: u32,
    f: f64,
    bytes: u64,
}

struct Search<'a> {
    p: &'a MappingProblem,
    items: Vec<Item>,
    /// First item index of each layer, plus a final sentinel.
    layer_start: Vec<usize>,
    /// remaining[k]: mass of items k.. within the same layer.
    remaining: Vec<f64>,
    /// future[l]: Σ of empty-start bounds of layers l.. .
    future: Vec<f64>,
    gpu_cap: u64,
    dimm_cap: Vec<u64>,
    j: usize,

    loc: Vec<u32>,
    gpu_used: u64,
    dimm_used: Vec<u64>,
    gpu_mass: f64,
    dimm_mass: Vec<f64>,
    done_cost: f64,

    best: f64,
    best_loc: Option<Vec<u32>>,
    nodes: u64,
    limit_hit: bool,
    limits: SolveLimits,
    started: Instant,
}

/// Location code for the GPU; DIMMs are 0..J.
const GPU: u32 = u32::MAX;

pub fn solve_exact(p: &MappingProblem, limits: SolveLimits) -> Result<MappingSolution> {
    p.check_total_capacity()?;
    let j = p.num_dimms() as usize;
    let layers = p.shape.num_layers();

    let mut items = Vec::new();
    let mut layer_start = Vec::new();
    for l in 0..layers {
        layer_start.push(items.len());
        let mut layer: Vec<Item> = p.freq[l as usize]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f > 0.0)
            .map(|(i, &f)| Item { layer: l, index: i as u32, f, bytes: p.shape.neuron_bytes(l) })
            .collect();
        layer.sort_by(|a, b| b.f.total_cmp(&a.f).then(a.index.cmp(&b.index)));
        items.extend(layer);
    }
    layer_start.push(items.len());

    let mut remaining = vec![0.0; items.len() + 1];
    for l in 0..layers as usize {
        for k in (layer_start[l]..layer_start[l + 1]).rev() {
            remaining[k] = remaining[k + 1] + items[k].f;
        }
    }

    let gpu_cap = p.gpu_capacity();
    let dimm_cap: Vec<u64> = (0..j as u32).map(|d| p.hw.dimm_capacity(d)).collect();
    let mut future = vec![0.0; layers as usize + 1];
    for l in (0..layers as usize).rev() {
        let mass: f64 = p.freq[l].iter().sum();
        let gpu_open = gpu_cap >= p.shape.neuron_bytes(l as u32);
        let z = water_fill(p, l as u32, 0.0, &vec![0.0; j], mass, gpu_open);
        future[l] = future[l + 1] + z;
    }

    let mut s = Search {
        p,
        items,
        layer_start,
        remaining,
        future,
        gpu_cap,
        dimm_cap,
        j,
        loc: Vec::new(),
        gpu_used: 0,
        dimm_used: vec![0; j],
        gpu_mass: 0.0,
        dimm_mass: vec![0.0; j],
        done_cost: 0.0,
        best: f64::INFINITY,
        best_loc: None,
        nodes: 0,
        limit_hit: false,
        limits,
        started: Instant::now(),
    };
    s.loc = vec![0; s.items.len()];

    // the greedy solution seeds the incumbent
    let greedy = solve_greedy(p).ok();
    if let Some(g) = &greedy {
        s.best = g.objective;
    }

    s.descend(0, 0);

    let placement = match s.best_loc.take() {
        Some(loc) => s.build(&loc).expect("incumbent leaves are packable"),
        None => match greedy {
            Some(g) => g.placement,
            None => {
                return Err(Error::Infeasible(
                    "no placement satisfies the capacity constraints".into(),
                ))
            }
        },
    };
    let objective = objective_of(&placement, p);
    Ok(MappingSolution {
        placement,
        objective,
        optimal: !s.limit_hit,
        nodes: s.nodes,
        solver: "exact".into(),
    })
}

impl Search<'_> {
    fn current_layer_time(&self, l: u32) -> f64 {
        let g = layer_time_gpu(self.gpu_mass, self.p.timing.t_gpu(l), self.p.hw.t_sync_seconds);
        let d = self.dimm_mass.iter().copied().fold(0.0, f64::max) * self.p.timing.t_dimm(l);
        g.max(d)
    }

    fn bound(&self, k: usize, l: usize) -> f64 {
        let gpu_open = self.gpu_used + self.p.shape.neuron_bytes(l as u32) <= self.gpu_cap;
        let rem = self.remaining[k];
        let z = water_fill(self.p, l as u32, self.gpu_mass, &self.dimm_mass, rem, gpu_open);
        self.done_cost + z + self.future[l + 1]
    }

    fn out_of_budget(&mut self) -> bool {
        if self.nodes >= self.limits.max_nodes {
            self.limit_hit = true;
        }
        if let Some(t) = self.limits.time_limit {
            if self.nodes.is_multiple_of(4096) && self.started.elapsed() > t {
                self.limit_hit = true;
            }
        }
        self.limit_hit
    }

    /// Decide item `k` of layer `l`, or close layer `l` once its items
    /// are exhausted.
    fn descend(&mut self, k: usize, l: usize) {
        if k == self.layer_start[l + 1] {
            let t = self.current_layer_time(l as u32);
            let saved_gpu = self.gpu_mass;
            let saved_dimm = self.dimm_mass.clone();
            let saved_cost = self.done_cost;
            self.done_cost += t;
            self.gpu_mass = 0.0;
            self.dimm_mass.iter_mut().for_each(|m| *m = 0.0);
            if l + 1 == self.p.shape.num_layers() as usize {
                self.leaf();
            } else {
                self.descend(k, l + 1);
            }
            self.done_cost = saved_cost;
            self.gpu_mass = saved_gpu;
            self.dimm_mass = saved_dimm;
            return;
        }
        self.branch(k, l);
    }

    fn leaf(&mut self) {
        if self.done_cost < self.best
            && self.build(&self.loc).is_some() {
                self.best = self.done_cost;
                self.best_loc = Some(self.loc.clone());
            }
    }

    fn branch(&mut self, k: usize, l: usize) {
        self.nodes += 1;
        if self.out_of_budget() {
            return;
        }
        if self.bound(k, l) >= self.best {
            return;
        }

        let item_bytes = self.items[k].bytes;
        let f = self.items[k].f;
        let lu = l as u32;
        let t_g = self.p.timing.t_gpu(lu);
        let t_d = self.p.timing.t_dimm(lu);
        let sync = self.p.hw.t_sync_seconds;

        // children, cheapest resulting partial layer time first
        let mut children: Vec<(f64, u32)> = Vec::with_capacity(self.j + 1);
        let dmax = self.dimm_mass.iter().copied().fold(0.0, f64::max) * t_d;
        if self.gpu_used + item_bytes <= self.gpu_cap {
            let g = layer_time_gpu(self.gpu_mass + f, t_g, sync);
            children.push((g.max(dmax), GPU));
        }
        let gnow = layer_time_gpu(self.gpu_mass, t_g, sync);
        for d in 0..self.j {
            if self.dimm_used[d] + item_bytes > self.dimm_cap[d] {
                continue;
            }
            // identical DIMM states lead to mirror-image subtrees
            let twin = (0..d).any(|e| {
                self.dimm_mass[e] == self.dimm_mass[d] && self.dimm_used[e] == self.dimm_used[d]
            });
            if twin {
                continue;
            }
            let t = ((self.dimm_mass[d] + f) * t_d).max(dmax).max(gnow);
            children.push((t, d as u32));
        }
        children.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        for (_, c) in children {
            self.loc[k] = c;
            let saved_mass = if c == GPU { self.gpu_mass } else { self.dimm_mass[c as usize] };
            if c == GPU {
                self.gpu_used += item_bytes;
                self.gpu_mass += f;
            } else {
                self.dimm_used[c as usize] += item_bytes;
                self.dimm_mass[c as usize] += f;
            }
            self.descend(k + 1, l);
            if c == GPU {
                self.gpu_used -= item_bytes;
                self.gpu_mass = saved_mass;
            } else {
                self.dimm_used[c as usize] -= item_bytes;
                self.dimm_mass[c as usize] = saved_mass;
            }
            if self.limit_hit {
                return;
            }
        }
    }

    /// Turn a complete location vector into a placement, packing owners of
    /// mirrors and inactive neurons. None if packing fails.
    fn build(&self, loc: &[u32]) -> Option<NeuronPlacement> {
        let p = self.p;
        let mut pl = NeuronPlacement::for_shape(&p.shape, self.j as u32);
        let mut used = vec![0u64; self.j];
        let mut pending: Vec<NeuronRef> = Vec::new();
        let mut branched: Vec<Vec<bool>> =
            p.shape.layer_sizes().iter().map(|&n| vec![false; n as usize]).collect();
        for (it, &c) in self.items.iter().zip(loc) {
            let n = NeuronRef::new(it.layer, it.index);
            branched[it.layer as usize][it.index as usize] = true;
            if c == GPU {
                pl.set_gpu(n, true);
                pending.push(n);
            } else {
                pl.set_owner(n, c);
                used[c as usize] += it.bytes;
            }
        }
        for (l, row) in branched.iter().enumerate() {
            for (i, &b) in row.iter().enumerate() {
                if !b {
                    pending.push(NeuronRef::new(l as u32, i as u32));
                }
            }
        }
        pending.sort_by(|a, b| {
            p.shape
                .neuron_bytes(b.layer)
                .cmp(&p.shape.neuron_bytes(a.layer))
                .then(a.cmp(b))
        });
        for n in pending {
            let b = p.shape.neuron_bytes(n.layer);
            let d = most_free(p, &used, b)?;
            used[d] += b;
            pl.set_owner(n, d as u32);
        }
        Some(pl)
    }
}

/// Smallest z ≥ the layer's current time such that the devices' spare time
/// up to z absorbs `mass` of fractional work.
fn water_fill(
    p: &MappingProblem,
    l: u32,
    gpu_mass: f64,
    dimm_mass: &[f64],
    mass: f64,
    gpu_open: bool,
) -> f64 {
    let t_g = p.timing.t_gpu(l);
    let t_d = p.timing.t_dimm(l);
    let sync = p.hw.t_sync_seconds;
    let g_now = layer_time_gpu(gpu_mass, t_g, sync);
    let current = dimm_mass.iter().map(|&m| m * t_d).fold(g_now, f64::max);
    if mass <= 0.0 {
        return current;
    }
    // (breakpoint, rate): device absorbs (z - breakpoint) * rate once z
    // passes its breakpoint. An idle GPU is credited without its sync cost.
    let mut segs: Vec<(f64, f64)> = dimm_mass.iter().map(|&m| (m * t_d, 1.0 / t_d)).collect();
    if gpu_open {
        segs.push((g_now, 1.0 / t_g));
    }
    segs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut rate, mut offset) = (0.0, 0.0);
    let mut z = f64::INFINITY;
    for k in 0..segs.len() {
        rate += segs[k].1;
        offset += segs[k].0 * segs[k].1;
        let cand = (mass + offset) / rate;
        let next = segs.get(k + 1).map_or(f64::INFINITY, |s| s.0);
        if cand <= next {
            z = cand;
            break;
        }
    }
    z.max(current)
}

#[cfg(test)]
mod tests {
    use super::super::testing::instance;
    use super::*;
    use crate::costmodel::DeviceTiming;
    use crate::model::{presets, validate_placement, ModelShape};

    #[test]
    fn hot_neuron_goes_to_gpu() {
        let shape = ModelShape::uniform("t", 1, 8, 2, 2);
        let mut hw = presets::hardware("rtx4090").unwrap();
        hw.dimm.count = 2;
        hw.gpu.memory_bytes = shape.dense_bytes() + shape.neuron_bytes(0);
        hw.t_sync_seconds = 1e-7;
        let timing = DeviceTiming { batch: 1, gpu: vec![1e-9; 2], dimm: vec![1e-5; 2] };
        let freq = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let p = MappingProblem::new(shape, hw, timing, freq).unwrap();
        let s = solve_exact(&p, SolveLimits::default()).unwrap();
        assert!(s.optimal);
        assert!(s.placement.is_gpu_resident(NeuronRef::new(0, 0)));
        assert!(!s.placement.is_gpu_resident(NeuronRef::new(0, 1)));
    }

    #[test]
    fn never_worse_than_greedy_and_feasible() {
        for seed in 0..6 {
            let p = instance(1, 6, 2, 3, 7, seed);
            let e = solve_exact(&p, SolveLimits::default()).unwrap();
            let g = solve_greedy(&p).unwrap();
            assert!(e.optimal);
            assert!(e.objective <= g.objective * (1.0 + 1e-12));
            assert!(validate_placement(&e.placement, &p.shape, &p.hw).unwrap().is_empty());
            assert_eq!(e.placement, solve_exact(&p, SolveLimits::default()).unwrap().placement);
        }
    }

    #[test]
    fn node_limit_flags_non_optimal() {
        let p = instance(1, 8, 2, 4, 10, 1);
        let s = solve_exact(&p, SolveLimits { max_nodes: 5, time_limit: None }).unwrap();
        assert!(!s.optimal);
        assert!(validate_placement(&s.placement, &p.shape, &p.hw).unwrap().is_empty());
    }

    #[test]
    fn too_small_dimms_infeasible() {
        let p = instance(1, 10, 2, 2, 9, 1);
        assert!(matches!(solve_exact(&p, SolveLimits::default()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn water_fill_matches_hand_value() {
        // two DIMMs at 1 s/unit idle, GPU at 0.5 s/unit idle, no sync:
        // rates 1 + 1 + 2 = 4 units/s, so 2 units finish at z = 0.5
        let shape = ModelShape::uniform("t", 1, 8, 1, 1);
        let mut hw = presets::hardware("rtx4090").unwrap();
        hw.dimm.count = 2;
        hw.t_sync_seconds = 0.0;
        let timing = DeviceTiming { batch: 1, gpu: vec![0.5; 2], dimm: vec![1.0; 2] };
        let p = MappingProblem::new(shape, hw, timing, vec![vec![1.0], vec![1.0]]).unwrap();
        assert!((water_fill(&p, 0, 0.0, &[0.0, 0.0], 2.0, true) - 0.5).abs() < 1e-15);
        // one DIMM already busy until 1.0: others absorb 1.5 units by z=0.5
        assert!((water_fill(&p, 0, 0.0, &[1.0, 0.0], 1.5, true) - 1.0).abs() < 1e-15);
        assert!((water_fill(&p, 0, 0.0, &[1.0, 0.0], 5.0, true) - 1.5).abs() < 1e-15);
    }
}
