//! Online placement maintenance: hot/cold swaps between the GPU and the
//! DIMMs, and window-based rebalancing of DIMM-computed neurons.
//!
//! Both operations only read the placement and return a [`MigrationPlan`];
//! [`MigrationPlan::apply`] commits it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HardwareConfig, ModelShape, NeuronPlacement, NeuronRef};
use crate::predictor::{CorrelationTable, NeuronStateTable, PredictorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityScope {
    /// Balance each FC layer on its own.
    PerLayer,
    /// Balance the summed activity of every layer in the scope passed in.
    Aggregate,
}

/// Which predictor signal ranks neurons for GPU residency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// `s1 + λ·s2`; a neuron qualifies once it would be predicted to fire.
    Combined,
    /// `s1` alone against the hot threshold.
    TokenOnly,
    /// `λ·s2` alone against the hot threshold.
    LayerOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Decode tokens per rebalancing window.
    pub window: u32,
    pub max_moves_per_pair: u32,
    /// Re-pairing passes per window.
    pub max_rounds: u32,
    /// Cap on GPU copies per layer per adjustment.
    pub max_swaps_per_layer: u32,
    pub swap_scope: SwapScope,
    /// An incoming neuron must outscore its victim by more than this.
    pub swap_margin: u32,
    pub activity_scope: ActivityScope,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            window: 5,
            max_moves_per_pair: 64,
            max_rounds: 8,
            max_swaps_per_layer: 32,
            swap_scope: SwapScope::OwnerDimm,
            swap_margin: 0,
            activity_scope: ActivityScope::PerLayer,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window > u32::from(u8::MAX) {
            return Err(Error::config("scheduler window must be in 1..=255 tokens"));
        }
        if self.max_rounds == 0 {
            return Err(Error::config("max_rounds must be positive"));
        }
        Ok(())
    }
}

/// Per-neuron activation counts over the current window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowActivity {
    pub window: u32,
    tokens: u32,
    counts: Vec<Vec<u8>>,
}

impl WindowActivity {
    pub fn new(layer_sizes: &[u32], window: u32) -> Self {
        Self {
            window,
            tokens: 0,
            counts: layer_sizes.iter().map(|&n| vec![0; n as usize]).collect(),
        }
    }

    /// From explicit counts, for tests and tools.
    pub fn from_counts(counts: Vec<Vec<u8>>, window: u32) -> Result<Self> {
        if let Some(c) = counts.iter().flatten().find(|&&c| u32::from(c) > window) {
            return Err(Error::config(format!("activity {c} exceeds window {window}")));
        }
        Ok(Self { window, tokens: window, counts })
    }

    pub fn record(&mut self, layer: u32, active: &[u32]) {
        let c = &mut self.counts[layer as usize];
        for &i in active {
            c[i as usize] = c[i as usize].saturating_add(1);
        }
    }

    /// Marks one token as fully recorded.
    pub fn end_token(&mut self) {
        self.tokens += 1;
    }

    pub fn tokens(&self) -> u32 {
        self.tokens
    }

    pub fn is_complete(&self) -> bool {
        self.tokens >= self.window
    }

    pub fn reset(&mut self) {
        self.tokens = 0;
        self.counts.iter_mut().for_each(|c| c.fill(0));
    }

    pub fn get(&self, n: NeuronRef) -> u8 {
        self.counts[n.layer as usize][n.index as usize]
    }

    pub fn layer(&self, layer: u32) -> &[u8] {
        &self.counts[layer as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuSwap {
    #[serde(rename = "in")]
    pub incoming: NeuronRef,
    /// Mirror dropped to make room; none when the GPU had free space.
    #[serde(rename = "out")]
    pub outgoing: Option<NeuronRef>,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimmMove {
    pub neuron: NeuronRef,
    pub from: u32,
    pub to: u32,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub gpu_swaps: Vec<GpuSwap>,
    pub dimm_moves: Vec<DimmMove>,
    pub pcie_bytes: u64,
    pub dimmlink_bytes: u64,
}

impl MigrationPlan {
    pub fn is_empty(&self) -> bool {
        self.gpu_swaps.is_empty() && self.dimm_moves.is_empty()
    }

    pub fn extend(&mut self, other: MigrationPlan) {
        self.gpu_swaps.extend(other.gpu_swaps);
        self.dimm_moves.extend(other.dimm_moves);
        self.pcie_bytes += other.pcie_bytes;
        self.dimmlink_bytes += other.dimmlink_bytes;
    }

    /// Bytes crossing the busiest DIMM's link. Links are point to point, so
    /// moves between disjoint DIMM pairs proceed in parallel.
    pub fn dimmlink_critical_bytes(&self, num_dimms: u32) -> u64 {
        let mut through = vec![0u64; num_dimms as usize];
        for m in &self.dimm_moves {
            through[m.from as usize] += m.bytes;
            through[m.to as usize] += m.bytes;
        }
        through.into_iter().max().unwrap_or(0)
    }

    pub fn apply(&self, placement: &mut NeuronPlacement) {
        for s in &self.gpu_swaps {
            if let Some(out) = s.outgoing {
                placement.set_gpu(out, false);
            }
            placement.set_gpu(s.incoming, true);
        }
        for m in &self.dimm_moves {
            placement.set_owner(m.neuron, m.to);
        }
    }
}

/// Guidance scores of one layer and the threshold a neuron must exceed to
/// be brought onto the GPU.
///
/// `parent_active` is the latest realized activation of `layer - 1`; it is
/// ignored for layer 0 and for [`Guidance::TokenOnly`].
pub fn guidance_scores(
    guidance: Guidance,
    table: &NeuronStateTable,
    corr: &CorrelationTable,
    parent_active: &[u32],
    layer: u32,
    cfg: &PredictorConfig,
) -> (Vec<u32>, u32) {
    let s1 = table.layer_states(layer);
    let mut s2 = Vec::new();
    if layer > 0 && guidance != Guidance::TokenOnly {
        corr.active_parents(layer, parent_active, table.layer_len(layer - 1), &mut s2);
    }
    let s2_of = |i: usize| u32::from(s2.get(i).copied().unwrap_or(0));
    let lambda = u32::from(cfg.lambda);
    match guidance {
        Guidance::Combined => (
            (0..s1.len()).map(|i| u32::from(s1[i]) + lambda * s2_of(i)).collect(),
            u32::from(cfg.threshold),
        ),
        Guidance::TokenOnly => (
            s1.iter().map(|&s| u32::from(s)).collect(),
            u32::from(cfg.hot_threshold),
        ),
        Guidance::LayerOnly => (
            (0..s1.len()).map(|i| lambda * s2_of(i)).collect(),
            u32::from(cfg.hot_threshold),
        ),
    }
}

/// Which GPU mirrors an incoming neuron may displace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapScope {
    /// The lowest-scoring mirror of the layer, preferring the incoming
    /// neuron's DIMM on ties.
    Layer,
    /// The lowest-scoring mirror owned by the incoming neuron's DIMM, so a
    /// swap leaves every DIMM's share of the layer unchanged.
    #[default]
    OwnerDimm,
}

/// Swap plan for one layer.
///
/// Qualifying neurons (score above `hot`) that are not mirrored on the GPU
/// are taken best first. Each one uses free GPU space if there is any, and
/// otherwise replaces the lowest-scoring mirror within `scope`, but only
/// when it scores strictly higher; remaining ties go to the lowest index.
/// Dropping a mirror moves no data since the DIMM copy stays; each incoming
/// neuron is charged to PCIe.
#[allow(clippy::too_many_arguments)]
pub fn adjust_layer(
    placement: &NeuronPlacement,
    layer: u32,
    scores: &[u32],
    hot: u32,
    gpu_free: &mut u64,
    bytes: u64,
    max_swaps: u32,
    scope: SwapScope,
    margin: u32,
) -> MigrationPlan {
    let flags = placement.gpu_flags(layer);
    let owners = placement.owners(layer);
    let mut incoming: Vec<u32> = (0..flags.len() as u32)
        .filter(|&i| !flags[i as usize] && scores[i as usize] > hot)
        .collect();
    incoming.sort_by(|&a, &b| scores[b as usize].cmp(&scores[a as usize]).then(a.cmp(&b)));

    // per owner: score -> mirrors, highest index first so pop() yields the lowest
    let j = placement.num_dimms() as usize;
    let mut victims: Vec<BTreeMap<u32, Vec<u32>>> = vec![BTreeMap::new(); j];
    for i in (0..flags.len()).rev().filter(|&i| flags[i]) {
        victims[owners[i] as usize].entry(scores[i]).or_default().push(i as u32);
    }
    let lowest = |v: &[BTreeMap<u32, Vec<u32>>], d: usize| {
        v[d].first_key_value().map(|(&s, l)| (s, l[l.len() - 1]))
    };

    let mut plan = MigrationPlan::default();
    for i in incoming {
        if plan.gpu_swaps.len() as u32 >= max_swaps {
            break;
        }
        let score = scores[i as usize];
        let outgoing = if *gpu_free >= bytes {
            *gpu_free -= bytes;
            None
        } else {
            let own = owners[i as usize] as usize;
            let from = match scope {
                SwapScope::OwnerDimm => Some(own),
                SwapScope::Layer => (0..j)
                    .filter_map(|d| lowest(&victims, d).map(|(s, v)| (s, d != own, v, d)))
                    .min()
                    .map(|(_, _, _, d)| d),
            };
            match from.and_then(|d| lowest(&victims, d).map(|(s, _)| (s, d))) {
                Some((s, d)) if s + margin < score => {
                    let mut e = victims[d].first_entry().expect("non-empty");
                    let v = e.get_mut().pop().expect("non-empty");
                    if e.get().is_empty() {
                        e.remove();
                    }
                    Some(NeuronRef::new(layer, v))
                }
                // candidates only get worse and, layer-wide, victims only better
                _ if scope == SwapScope::Layer => break,
                _ => continue,
            }
        };
        plan.gpu_swaps.push(GpuSwap { incoming: NeuronRef::new(layer, i), outgoing, bytes });
        plan.pcie_bytes += bytes;
    }
    plan
}

/// Hot/cold adjustment of every layer by state alone: neurons whose state
/// exceeds the hot threshold displace lower-state mirrors.
pub fn adjust_hot_cold(
    placement: &NeuronPlacement,
    table: &NeuronStateTable,
    cfg: &PredictorConfig,
    shape: &ModelShape,
    hw: &HardwareConfig,
) -> MigrationPlan {
    let mut gpu_free = hw
        .gpu_neuron_capacity(shape)
        .saturating_sub(placement.gpu_bytes(shape));
    let mut plan = MigrationPlan::default();
    for l in 0..shape.num_layers() {
        let scores: Vec<u32> = table.layer_states(l).into_iter().map(u32::from).collect();
        plan.extend(adjust_layer(
            placement,
            l,
            &scores,
            u32::from(cfg.hot_threshold),
            &mut gpu_free,
            shape.neuron_bytes(l),
            u32::MAX,
            SwapScope::Layer,
            0,
        ));
    }
    plan
}

/// max_j Z_j / mean_j Z_j; 1 when there is no load at all.
pub fn imbalance(z: &[u64]) -> f64 {
    let total: u64 = z.iter().sum();
    if z.is_empty() || total == 0 {
        return 1.0;
    }
    let max = *z.iter().max().unwrap_or(&0) as f64;
    max * z.len() as f64 / total as f64
}

/// Per-DIMM window activity Z_j of the DIMM-computed neurons of `layers`.
pub fn dimm_activity(placement: &NeuronPlacement, activity: &WindowActivity, layers: &[u32]) -> Vec<u64> {
    let mut z = vec![0u64; placement.num_dimms() as usize];
    for &l in layers {
        let owners = placement.owners(l);
        let flags = placement.gpu_flags(l);
        for (i, &a) in activity.layer(l).iter().enumerate() {
            if !flags[i] {
                z[owners[i] as usize] += u64::from(a);
            }
        }
    }
    z
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub round: u32,
    pub heavy: u32,
    pub light: u32,
    pub gap_before: u64,
    pub gap_after: u64,
    pub moves: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RebalanceOutcome {
    pub plan: MigrationPlan,
    pub pairs: Vec<PairOutcome>,
    pub z_before: Vec<u64>,
    pub z_after: Vec<u64>,
    pub imbalance_before: f64,
    pub imbalance_after: f64,
}

/// Window-based rebalancing over the neurons of `layers`, balanced jointly.
///
/// Each round orders the DIMMs by descending activity and pairs rank r with
/// rank J-1-r. Within a pair, DIMM-computed neurons of the heavier side are
/// tried most-activated first and moved to the lighter side whenever the
/// move strictly narrows the gap (0 < A < gap) and the lighter DIMM has
/// room. Rounds repeat until one makes no move or `max_rounds` is reached.
/// A neuron moves at most once per call.
pub fn rebalance_window(
    placement: &NeuronPlacement,
    activity: &WindowActivity,
    layers: &[u32],
    shape: &ModelShape,
    hw: &HardwareConfig,
    cfg: &SchedulerConfig,
) -> RebalanceOutcome {
    let j = placement.num_dimms() as usize;
    let mut z = dimm_activity(placement, activity, layers);
    let z_before = z.clone();
    let mut used = placement.dimm_bytes(shape);

    // Candidates bucketed by current owner, most activated first.
    let mut on: Vec<Vec<(u8, NeuronRef)>> = vec![Vec::new(); j];
    for &l in layers {
        let owners = placement.owners(l);
        let flags = placement.gpu_flags(l);
        for (i, &a) in activity.layer(l).iter().enumerate() {
            if a > 0 && !flags[i] {
                on[owners[i] as usize].push((a, NeuronRef::new(l, i as u32)));
            }
        }
    }
    for list in &mut on {
        list.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    }

    let mut plan = MigrationPlan::default();
    let mut pairs = Vec::new();
    for round in 0..cfg.max_rounds {
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by(|&a, &b| z[b].cmp(&z[a]).then(a.cmp(&b)));
        let mut moved_any = false;
        for r in 0..j / 2 {
            let (h, lt) = (order[r], order[j - 1 - r]);
            let gap_before = z[h] - z[lt];
            let mut moves = 0u32;
            let mut keep = Vec::with_capacity(on[h].len());
            for (a, n) in std::mem::take(&mut on[h]) {
                let gap = z[h].saturating_sub(z[lt]);
                let bytes = shape.neuron_bytes(n.layer);
                if moves < cfg.max_moves_per_pair
                    && u64::from(a) < gap
                    && used[lt] + bytes <= hw.dimm_capacity(lt as u32)
                {
                    z[h] -= u64::from(a);
                    z[lt] += u64::from(a);
                    used[h] -= bytes;
                    used[lt] += bytes;
                    plan.dimm_moves.push(DimmMove { neuron: n, from: h as u32, to: lt as u32, bytes });
                    plan.dimmlink_bytes += bytes;
                    moves += 1;
                } else {
                    keep.push((a, n));
                }
            }
            on[h] = keep;
            if moves > 0 {
                moved_any = true;
                pairs.push(PairOutcome {
                    round,
                    heavy: h as u32,
                    light: lt as u32,
                    gap_before,
                    gap_after: z[h].abs_diff(z[lt]),
                    moves,
                });
            }
        }
        if !moved_any {
            break;
        }
    }
    RebalanceOutcome {
        plan,
        pairs,
        imbalance_before: imbalance(&z_before),
        imbalance_after: imbalance(&z),
        z_before,
        z_after: z,
    }
}
