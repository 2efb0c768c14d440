use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ActivationTrace;
use crate::error::{Error, Result};
use crate::model::{ModelShape, TokenCounts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceGenConfig {
    /// Target inactive fraction of every layer.
    pub sparsity: f64,
    /// Skew of the rank-frequency curve of base activation probabilities.
    pub zipf_exponent: f64,
    /// Chance that a neuron active for token t stays active for t + 1.
    pub adjacency_retention: f64,
    /// Activation odds multiplier per planted parent active in the previous
    /// layer of the same token.
    pub correlation_boost: f64,
    /// Fraction of each layer's neurons whose base probabilities are
    /// reshuffled among themselves when decoding starts, so the prompt's
    /// hot set is only partly the generation's.
    pub decode_drift: f64,
    pub rng_seed: u64,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.8,
            zipf_exponent: 12.0,
            adjacency_retention: 0.9,
            correlation_boost: 2.0,
            decode_drift: 0.0,
            rng_seed: 0x5eed,
        }
    }
}

impl TraceGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=0.95).contains(&self.sparsity) {
            return Err(Error::config(format!(
                "sparsity must be in [0.5, 0.95], got {}",
                self.sparsity
            )));
        }
        if !(0.0..=1.0).contains(&self.adjacency_retention) {
            return Err(Error::config(format!(
                "adjacency_retention must be in [0, 1], got {}",
                self.adjacency_retention
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::config("zipf_exponent must be a non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.decode_drift) {
            return Err(Error::config(format!(
                "decode_drift must be in [0, 1], got {}",
                self.decode_drift
            )));
        }
        if !(self.correlation_boost.is_finite() && self.correlation_boost > 0.0) {
            return Err(Error::config("correlation_boost must be positive"));
        }
        Ok(())
    }

    /// Active neurons per token in a layer of `n` neurons.
    pub fn quota(&self, n: u32) -> u32 {
        ((1.0 - self.sparsity) * f64::from(n)).round() as u32
    }
}

/// `parents[l][i]`: the two previous-layer neurons planted as neuron i's
/// correlated parents. Layer 0 is empty.
pub type PlantedParents = Vec<Vec<[u32; 2]>>;

pub fn generate_trace(
    cfg: &TraceGenConfig,
    shape: &ModelShape,
    tokens: TokenCounts,
) -> Result<ActivationTrace> {
    generate_trace_with_parents(cfg, shape, tokens).map(|(t, _)| t)
}

/// Generate a trace and also return the planted parent structure.
pub fn generate_trace_with_parents(
    cfg: &TraceGenConfig,
    shape: &ModelShape,
    tokens: TokenCounts,
) -> Result<(ActivationTrace, PlantedParents)> {
    cfg.validate()?;
    shape.validate()?;
    if tokens.prefill == 0 || tokens.decode == 0 {
        return Err(Error::config("need at least one prefill and one decode token"));
    }
    let sizes = shape.layer_sizes();
    let quotas: Vec<u32> = sizes.iter().map(|&n| cfg.quota(n)).collect();
    if let Some(l) = quotas.iter().position(|&k| k == 0) {
        return Err(Error::config(format!(
            "density {} leaves no active neuron in layer {l} of {} neurons",
            1.0 - cfg.sparsity,
            sizes[l]
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut base: Vec<Vec<f64>> = sizes
        .iter()
        .zip(&quotas)
        .map(|(&n, &k)| base_probabilities(n, k, cfg.zipf_exponent, &mut rng))
        .collect();
    let parents = plant_parents(&base, &mut rng);

    // boost^0, boost^1, boost^2
    let boost = [1.0, cfg.correlation_boost, cfg.correlation_boost * cfg.correlation_boost];
    let mut records: Vec<Vec<Vec<u32>>> = Vec::with_capacity(tokens.total() as usize);
    let mut keys: Vec<(f64, u32)> = Vec::new();
    let mut mark: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![false; n as usize]).collect();
    for t in 0..tokens.total() as usize {
        if t == tokens.prefill as usize && cfg.decode_drift > 0.0 {
            for layer in base.iter_mut() {
                drift(layer, cfg.decode_drift, &mut rng);
            }
        }
        let mut cur: Vec<Vec<u32>> = Vec::with_capacity(sizes.len());
        for l in 0..sizes.len() {
            let n = sizes[l] as usize;
            let k = quotas[l] as usize;

            let mut set: Vec<u32> = Vec::with_capacity(k);
            if t > 0 {
                for &i in &records[t - 1][l] {
                    if rng.gen::<f64>() < cfg.adjacency_retention {
                        set.push(i);
                    }
                }
            }
            let retained = &mut mark[l];
            for &i in &set {
                retained[i as usize] = true;
            }

            // Efraimidis-Spirakis: the `k - |set|` largest ln(u)/w keys form a
            // weighted sample without replacement.
            let prev_active = (l > 0).then(|| {
                let mut a = vec![false; sizes[l - 1] as usize];
                for &p in &cur[l - 1] {
                    a[p as usize] = true;
                }
                a
            });
            keys.clear();
            for i in 0..n {
                if retained[i] {
                    continue;
                }
                let mut w = base[l][i];
                if let Some(a) = &prev_active {
                    let [p, q] = parents[l][i];
                    let fired = usize::from(a[p as usize]) + usize::from(a[q as usize]);
                    w *= boost[fired];
                }
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
                keys.push((key, i as u32));
            }
            let need = k - set.len();
            if need > 0 {
                keys.select_nth_unstable_by(need - 1, |a, b| {
                    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
                });
                set.extend(keys[..need].iter().map(|&(_, i)| i));
            }
            for &i in &set {
                retained[i as usize] = false;
            }
            set.sort_unstable();
            cur.push(set);
        }
        records.push(cur);
    }

    let trace = ActivationTrace::new(sizes, tokens, cfg.sparsity, records)?;
    Ok((trace, parents))
}

/// Zipf-shaped per-neuron activation probabilities summing to `k`.
///
/// Rank r gets weight r^-a; the weights are scaled so they sum to `k`, and
/// any probability that would exceed 1 is pinned there with the excess
/// redistributed over the rest (water-filling). Ranks are then shuffled onto
/// neuron indices.
pub(crate) fn base_probabilities(n: u32, k: u32, a: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = n as usize;
    let weight: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-a)).collect();
    let mut p = vec![0.0; n];
    // Ranks are in descending weight order, so the pinned set is always a
    // prefix: grow it until the scaled remainder stays below 1.
    let mut suffix = vec![0.0; n + 1];
    for r in (0..n).rev() {
        suffix[r] = suffix[r + 1] + weight[r];
    }
    let mut pinned = 0usize;
    loop {
        let target = f64::from(k) - pinned as f64;
        let scale = target / suffix[pinned];
        if pinned == n || weight[pinned] * scale <= 1.0 {
            for r in pinned..n {
                p[r] = weight[r] * scale;
            }
            break;
        }
        p[pinned] = 1.0;
        pinned += 1;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut out = vec![0.0; n];
    for (rank, &idx) in perm.iter().enumerate() {
        out[idx] = p[rank];
    }
    out
}

/// Shuffle the probabilities of a random `share` of the neurons among
/// themselves.
fn drift(p: &mut [f64], share: f64, rng: &mut impl Rng) {
    let k = (share * p.len() as f64).round() as usize;
    let picked = rand::seq::index::sample(rng, p.len(), k).into_vec();
    let mut values: Vec<f64> = picked.iter().map(|&i| p[i]).collect();
    values.shuffle(rng);
    for (&i, v) in picked.iter().zip(values) {
        p[i] = v;
    }
}

/// Two distinct parents per neuron, drawn from the previous layer in
/// proportion to base probability.
fn plant_parents(base: &[Vec<f64>], rng: &mut impl Rng) -> PlantedParents {
    let mut out: PlantedParents = vec![Vec::new()];
    for l in 1..base.len() {
        let prev = &base[l - 1];
        let n = base[l].len();
        let dist = WeightedIndex::new(prev).ok();
        let mut layer = Vec::with_capacity(n);
        for _ in 0..n {
            let mut draw = || match &dist {
                Some(d) => d.sample(rng) as u32,
                None => rng.gen_range(0..prev.len() as u32),
            };
            let a = draw();
            let b = if prev.len() < 2 {
                a
            } else {
                loop {
                    let b = draw();
                    if b != a {
                        break b;
                    }
                }
            };
            layer.push([a, b]);
        }
        out.push(layer);
    }
    out
}
