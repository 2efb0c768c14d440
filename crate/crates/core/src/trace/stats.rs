use std::ops::Range;

use serde::Serialize;

use super::ActivationTrace;
use crate::error::{Error, Result};

/// Longest token distance the similarity curves cover.
pub const MAX_DISTANCE: u32 = 25;

/// Distributional properties of a trace over a token window.
#[derive(Clone, Debug, Serialize)]
pub struct ActivationStats {
    pub window: (u32, u32),
    /// `counts[l][i]`: tokens in the window where neuron i of layer l fired.
    pub counts: Vec<Vec<u32>>,
    /// `freq[l][i] = counts[l][i] / tokens`.
    pub freq: Vec<Vec<f64>>,
    /// `similarity[d - 1]`: mean Jaccard index of activated sets `d` tokens
    /// apart, averaged over layers and token pairs.
    pub similarity: Vec<f64>,
    /// Same, with |A ∩ B| / min(|A|, |B|) in place of Jaccard.
    pub overlap: Vec<f64>,
    #[serde(skip)]
    records: Vec<Vec<Vec<u32>>>,
    #[serde(skip)]
    layer_sizes: Vec<u32>,
}

/// Co-activation counts between an FC layer and the one before it, over the
/// stats window.
#[derive(Clone, Debug)]
pub struct Cooccurrence {
    pub layer: u32,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`; entry (i, p) counts tokens where neuron i of
    /// `layer` and neuron p of `layer - 1` were both active.
    pub counts: Vec<u32>,
}

impl Cooccurrence {
    pub fn get(&self, i: u32, p: u32) -> u32 {
        self.counts[i as usize * self.cols + p as usize]
    }

    pub fn row(&self, i: u32) -> &[u32] {
        let s = i as usize * self.cols;
        &self.counts[s..s + self.cols]
    }
}

impl ActivationStats {
    pub fn tokens(&self) -> u32 {
        self.window.1 - self.window.0
    }

    pub fn num_layers(&self) -> u32 {
        self.layer_sizes.len() as u32
    }

    pub fn layer_size(&self, layer: u32) -> u32 {
        self.layer_sizes[layer as usize]
    }

    /// Similarity at distance `d`, if the window is long enough.
    pub fn similarity_at(&self, d: u32) -> Option<f64> {
        d.checked_sub(1).and_then(|k| self.similarity.get(k as usize).copied())
    }

    /// Fraction of all activations carried by the `share` most frequent
    /// neurons of each layer, pooled over layers.
    pub fn top_share(&self, share: f64) -> f64 {
        let mut top = 0u64;
        let mut all = 0u64;
        for c in &self.counts {
            let mut sorted = c.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            let m = (share * sorted.len() as f64).round() as usize;
            top += sorted[..m].iter().map(|&x| u64::from(x)).sum::<u64>();
            all += sorted.iter().map(|&x| u64::from(x)).sum::<u64>();
        }
        if all == 0 {
            0.0
        } else {
            top as f64 / all as f64
        }
    }

    /// Mean active fraction of each layer over the window.
    pub fn density(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|c| {
                let s: u64 = c.iter().map(|&x| u64::from(x)).sum();
                s as f64 / (c.len() as f64 * f64::from(self.tokens()))
            })
            .collect()
    }

    /// Co-activation counts of `layer` against `layer - 1`. Computed on
    /// demand since the full set of matrices is large.
    pub fn cooccurrence(&self, layer: u32) -> Cooccurrence {
        assert!(layer >= 1 && layer < self.num_layers(), "layer {layer} has no predecessor");
        let rows = self.layer_sizes[layer as usize] as usize;
        let cols = self.layer_sizes[layer as usize - 1] as usize;
        let mut counts = vec![0u32; rows * cols];
        for tok in &self.records {
            let prev = &tok[layer as usize - 1];
            for &i in &tok[layer as usize] {
                let row = &mut counts[i as usize * cols..(i as usize + 1) * cols];
                for &p in prev {
                    row[p as usize] += 1;
                }
            }
        }
        Cooccurrence { layer, rows, cols, counts }
    }

    /// P(i active | p active) over the window; 0 when p never fired.
    pub fn conditional(&self, co: &Cooccurrence, i: u32, p: u32) -> f64 {
        let cp = self.counts[co.layer as usize - 1][p as usize];
        if cp == 0 {
            0.0
        } else {
            f64::from(co.get(i, p)) / f64::from(cp)
        }
    }
}

pub fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersection(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn overlap_ratio(a: &[u32], b: &[u32]) -> f64 {
    let m = a.len().min(b.len());
    if m == 0 {
        1.0
    } else {
        intersection(a, b) as f64 / m as f64
    }
}

fn intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

pub fn measure_stats(trace: &ActivationTrace, window: Range<u32>) -> Result<ActivationStats> {
    if window.start >= window.end {
        return Err(Error::config("empty stats window"));
    }
    if window.end > trace.num_tokens() {
        return Err(Error::config(format!(
            "window {}..{} exceeds trace of {} tokens",
            window.start,
            window.end,
            trace.num_tokens()
        )));
    }
    let sizes = trace.header().layer_sizes.clone();
    let tokens = window.end - window.start;
    let records: Vec<Vec<Vec<u32>>> = window.clone().map(|t| trace.token(t).to_vec()).collect();

    let mut counts: Vec<Vec<u32>> = sizes.iter().map(|&n| vec![0; n as usize]).collect();
    for tok in &records {
        for (l, set) in tok.iter().enumerate() {
            for &i in set {
                counts[l][i as usize] += 1;
            }
        }
    }
    let freq = counts
        .iter()
        .map(|c| c.iter().map(|&x| f64::from(x) / f64::from(tokens)).collect())
        .collect();

    let max_d = MAX_DISTANCE.min(tokens - 1) as usize;
    let mut similarity = Vec::with_capacity(max_d);
    let mut overlap = Vec::with_capacity(max_d);
    for d in 1..=max_d {
        let (mut js, mut os, mut n) = (0.0, 0.0, 0usize);
        for t in 0..records.len() - d {
            for l in 0..sizes.len() {
                js += jaccard(&records[t][l], &records[t + d][l]);
                os += overlap_ratio(&records[t][l], &records[t + d][l]);
                n += 1;
            }
        }
        similarity.push(js / n as f64);
        overlap.push(os / n as f64);
    }

    Ok(ActivationStats {
        window: (window.start, window.end),
        counts,
        freq,
        similarity,
        overlap,
        records,
        layer_sizes: sizes,
    })
}
