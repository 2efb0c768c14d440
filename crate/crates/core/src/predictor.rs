//! Activation predictor: a 4-bit saturating state per neuron, a top-2
//! parent table linking each layer to the one before it, and the combined
//! decision rule `s1 + λ·s2 > T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NeuronRef;
use crate::trace::ActivationStats;

pub const MAX_STATE: u8 = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Added to the state of a neuron that fired.
    pub increment: u8,
    /// Weight λ of the active-parent count.
    pub lambda: u8,
    /// Activation threshold T.
    pub threshold: u8,
    /// Hot threshold T_h.
    pub hot_threshold: u8,
    /// Fewest co-activations a parent needs.
    pub min_support: u32,
    /// A parent must co-fire with at least this fraction of the child's
    /// activations. Zero ranks on P(child | parent) alone.
    pub min_parent_coverage: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            increment: 4,
            lambda: 6,
            threshold: 15,
            hot_threshold: 10,
            min_support: 8,
            min_parent_coverage: 0.8,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.increment == 0 || self.increment > MAX_STATE {
            return Err(Error::config("predictor increment must be in 1..=15"));
        }
        if self.hot_threshold > MAX_STATE {
            return Err(Error::config("hot_threshold must be at most 15"));
        }
        if !(0.0..=1.0).contains(&self.min_parent_coverage) {
            return Err(Error::config("min_parent_coverage must be in [0, 1]"));
        }
        Ok(())
    }

    /// The combined rule for one neuron.
    pub fn fires(&self, s1: u8, s2: u8) -> bool {
        u32::from(s1) + u32::from(self.lambda) * u32::from(s2) > u32::from(self.threshold)
    }

    pub fn is_hot(&self, s1: u8) -> bool {
        s1 > self.hot_threshold
    }
}

/// Initial state for a profiled activation frequency.
///
/// Above 90% saturates at 15 and below 2% starts at 0; the 14 interior
/// states split [0.02, 0.90] evenly.
pub fn initial_state(f: f64) -> u8 {
    if f > 0.90 {
        MAX_STATE
    } else if f < 0.02 {
        0
    } else {
        let k = 1.0 + (14.0 * (f - 0.02) / (0.90 - 0.02)).floor();
        k.clamp(1.0, 14.0) as u8
    }
}

/// Packed 4-bit states, two neurons per byte, layers laid end to end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronStateTable {
    offsets: Vec<usize>,
    data: Vec<u8>,
}

impl NeuronStateTable {
    pub fn new(layer_sizes: &[u32]) -> Self {
        let mut offsets = Vec::with_capacity(layer_sizes.len() + 1);
        let mut total = 0usize;
        offsets.push(0);
        for &n in layer_sizes {
            total += n as usize;
            offsets.push(total);
        }
        Self {
            offsets,
            data: vec![0; total.div_ceil(2)],
        }
    }

    /// States from per-layer profiled frequencies.
    pub fn init_states(freq: &[Vec<f64>]) -> Self {
        let sizes: Vec<u32> = freq.iter().map(|f| f.len() as u32).collect();
        let mut t = Self::new(&sizes);
        for (l, layer) in freq.iter().enumerate() {
            for (i, &f) in layer.iter().enumerate() {
                t.set(NeuronRef::new(l as u32, i as u32), initial_state(f));
            }
        }
        t
    }

    pub fn byte_size(&self) -> usize {
        self.data.len()
    }

    pub fn num_layers(&self) -> u32 {
        (self.offsets.len() - 1) as u32
    }

    pub fn layer_len(&self, layer: u32) -> u32 {
        (self.offsets[layer as usize + 1] - self.offsets[layer as usize]) as u32
    }

    pub fn total_neurons(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn slot(&self, n: NeuronRef) -> usize {
        debug_assert!(n.index < self.layer_len(n.layer));
        self.offsets[n.layer as usize] + n.index as usize
    }

    pub fn get(&self, n: NeuronRef) -> u8 {
        self.get_slot(self.slot(n))
    }

    fn get_slot(&self, k: usize) -> u8 {
        let b = self.data[k / 2];
        if k.is_multiple_of(2) {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    pub fn set(&mut self, n: NeuronRef, v: u8) {
        let k = self.slot(n);
        self.set_slot(k, v);
    }

    fn set_slot(&mut self, k: usize, v: u8) {
        debug_assert!(v <= MAX_STATE);
        let b = &mut self.data[k / 2];
        if k.is_multiple_of(2) {
            *b = (*b & 0xf0) | v;
        } else {
            *b = (*b & 0x0f) | (v << 4);
        }
    }

    /// Saturating update of every neuron in `layer`: +increment if it is in
    /// `active` (sorted), -1 otherwise.
    pub fn update_layer(&mut self, layer: u32, active: &[u32], cfg: &PredictorConfig) {
        let base = self.offsets[layer as usize];
        let mut next = active.iter().peekable();
        for i in 0..self.layer_len(layer) {
            let fired = next.next_if_eq(&&i).is_some();
            let k = base + i as usize;
            let s = self.get_slot(k);
            let v = if fired {
                (s + cfg.increment).min(MAX_STATE)
            } else {
                s.saturating_sub(1)
            };
            self.set_slot(k, v);
        }
    }

    pub fn layer_states(&self, layer: u32) -> Vec<u8> {
        let base = self.offsets[layer as usize];
        (0..self.layer_len(layer) as usize).map(|i| self.get_slot(base + i)).collect()
    }

    /// Hot neurons of one layer, by index.
    pub fn hot_in_layer(&self, layer: u32, cfg: &PredictorConfig) -> Vec<u32> {
        let base = self.offsets[layer as usize];
        (0..self.layer_len(layer))
            .filter(|&i| cfg.is_hot(self.get_slot(base + i as usize)))
            .collect()
    }

    pub fn classify_hot(&self, cfg: &PredictorConfig) -> Vec<NeuronRef> {
        (0..self.num_layers())
            .flat_map(|l| {
                self.hot_in_layer(l, cfg)
                    .into_iter()
                    .map(move |i| NeuronRef::new(l, i))
            })
            .collect()
    }

    /// Debug dump: `layers[l][i]` is the state of neuron i in layer l.
    pub fn dump(&self) -> StateDump {
        StateDump {
            bytes: self.byte_size(),
            layers: (0..self.num_layers()).map(|l| self.layer_states(l)).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StateDump {
    pub bytes: usize,
    pub layers: Vec<Vec<u8>>,
}

/// `parents[l][i]`: neuron i's two correlated neurons in layer l - 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub parents: Vec<Vec<[u32; 2]>>,
}

impl CorrelationTable {
    pub fn parents_of(&self, n: NeuronRef) -> Option<[u32; 2]> {
        self.parents
            .get(n.layer as usize)
            .and_then(|l| l.get(n.index as usize))
            .copied()
    }

    /// Active-parent count s2 for every neuron of `layer`, given the realized
    /// activation of the layer before it.
    pub fn active_parents(&self, layer: u32, prev_active: &[u32], prev_size: u32, out: &mut Vec<u8>) {
        out.clear();
        let Some(parents) = self.parents.get(layer as usize).filter(|p| !p.is_empty()) else {
            return;
        };
        let mut mark = vec![false; prev_size as usize];
        for &p in prev_active {
            mark[p as usize] = true;
        }
        out.extend(
            parents
                .iter()
                .map(|&[a, b]| u8::from(mark[a as usize]) + u8::from(mark[b as usize])),
        );
    }
}

/// Pick the two previous-layer neurons that best predict each neuron.
///
/// A candidate parent p of neuron i must co-fire with it at least
/// `max(min_support, ⌈coverage·count_i⌉)` times; qualifying candidates rank
/// by P(i | p), then by p's own frequency, then by index. Slots left empty
/// go to the most frequent neurons of the previous layer. Without the
/// coverage floor, rarely firing neurons that happen to co-fire a handful of
/// times win on P(i | p) while saying little about most of i's activations.
pub fn build_correlation_table(stats: &ActivationStats, cfg: &PredictorConfig) -> CorrelationTable {
    let mut parents = Vec::with_capacity(stats.num_layers() as usize);
    if stats.num_layers() > 0 {
        parents.push(Vec::new());
    }
    for l in 1..stats.num_layers() {
        let prev_counts = &stats.counts[l as usize - 1];
        let child_counts = &stats.counts[l as usize];
        let mut by_freq: Vec<u32> = (0..prev_counts.len() as u32).collect();
        by_freq.sort_by(|&a, &b| prev_counts[b as usize].cmp(&prev_counts[a as usize]).then(a.cmp(&b)));
        let fallback = [by_freq[0], *by_freq.get(1).unwrap_or(&by_freq[0])];

        let co = stats.cooccurrence(l);
        let mut layer = Vec::with_capacity(co.rows);
        for i in 0..co.rows as u32 {
            let need = (cfg.min_parent_coverage * f64::from(child_counts[i as usize]))
                .ceil()
                .max(f64::from(cfg.min_support)) as u32;
            // (co-count, parent count, index); compare co/cp cross-multiplied
            let mut best: [Option<(u32, u32, u32)>; 2] = [None, None];
            for (p, &c) in co.row(i).iter().enumerate() {
                if c < need {
                    continue;
                }
                let cand = (c, prev_counts[p], p as u32);
                if better(cand, best[0]) {
                    best[1] = best[0];
                    best[0] = Some(cand);
                } else if better(cand, best[1]) {
                    best[1] = Some(cand);
                }
            }
            let pair = match best {
                [Some(a), Some(b)] => [a.2, b.2],
                [Some(a), None] => {
                    let f = if fallback[0] == a.2 { fallback[1] } else { fallback[0] };
                    [a.2, f]
                }
                _ => fallback,
            };
            layer.push(pair);
        }
        parents.push(layer);
    }
    CorrelationTable { parents }
}

fn better(a: (u32, u32, u32), b: Option<(u32, u32, u32)>) -> bool {
    let Some(b) = b else { return true };
    // a.0 / a.1 vs b.0 / b.1 exactly, in integers
    let lhs = u64::from(a.0) * u64::from(b.1);
    let rhs = u64::from(b.0) * u64::from(a.1);
    lhs.cmp(&rhs)
        .then(a.1.cmp(&b.1))
        .then(b.2.cmp(&a.2))
        .is_gt()
}

/// Neurons of `layer` predicted to fire, ascending.
///
/// `prev_active` is the realized activation of `layer - 1` for the current
/// token and is ignored for layer 0, where s2 is zero.
pub fn predict_layer(
    table: &NeuronStateTable,
    corr: &CorrelationTable,
    prev_active: &[u32],
    layer: u32,
    cfg: &PredictorConfig,
) -> Vec<u32> {
    let mut s2 = Vec::new();
    if layer > 0 {
        corr.active_parents(layer, prev_active, table.layer_len(layer - 1), &mut s2);
    }
    let states = table.layer_states(layer);
    states
        .iter()
        .enumerate()
        .filter(|&(i, &s1)| cfg.fires(s1, s2.get(i).copied().unwrap_or(0)))
        .map(|(i, _)| i as u32)
        .collect()
}

/// Confusion counts over per-neuron binary decisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
}

impl PredictionCounts {
    /// Tally one layer-step. Both sets are sorted.
    pub fn record(&mut self, predicted: &[u32], actual: &[u32], layer_size: u32) {
        let (mut i, mut j, mut both) = (0, 0, 0u64);
        while i < predicted.len() && j < actual.len() {
            match predicted[i].cmp(&actual[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    both += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        let p = predicted.len() as u64;
        let a = actual.len() as u64;
        self.true_positive += both;
        self.false_positive += p - both;
        self.false_negative += a - both;
        self.true_negative += u64::from(layer_size) + both - p - a;
    }

    pub fn merge(&mut self, o: &PredictionCounts) {
        self.true_positive += o.true_positive;
        self.false_positive += o.false_positive;
        self.false_negative += o.false_negative;
        self.true_negative += o.true_negative;
    }

    pub fn report(&self) -> AccuracyReport {
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let tp = self.true_positive;
        let total = tp + self.false_positive + self.false_negative + self.true_negative;
        AccuracyReport {
            recall: ratio(tp, tp + self.false_negative),
            precision: ratio(tp, tp + self.false_positive),
            accuracy: ratio(tp + self.true_negative, total),
        }
    }
}

/// Ratios with an empty denominator are reported as 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
}
