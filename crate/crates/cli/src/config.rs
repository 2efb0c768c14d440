//! Experiment configuration: built-in defaults, deep-merged with a JSON file
//! and then with command-line flags.
//!
//! `model` and `hardware` accept either a preset name or an object; an
//! object may carry a `preset` key naming the base it overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use ndpsim_core::engine::{default_trace_config, MapperChoice, Mode, SimConfig};
use ndpsim_core::model::presets;
use ndpsim_core::trace::TraceGenConfig;
use ndpsim_core::{HardwareConfig, ModelShape, TokenCounts};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 0x5eed;
pub const DEFAULT_EXACT_NODES: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    /// Trace file to replay; when absent the trace is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub generate: TraceGenConfig,
    pub tokens: TokenCounts,
}

/// Axes of a sensitivity sweep. Empty axes keep the base value; the grid is
/// the cartesian product of the rest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub dimm_counts: Vec<u32>,
    /// Hardware presets whose GPU replaces the base GPU.
    pub gpus: Vec<String>,
    pub multipliers: Vec<u32>,
    pub batches: Vec<u32>,
    /// Modes run at every point; `full` when empty. Not an axis by itself.
    pub modes: Vec<Mode>,
}

impl SweepSpec {
    pub fn is_empty(&self) -> bool {
        self.dimm_counts.is_empty()
            && self.gpus.is_empty()
            && self.multipliers.is_empty()
            && self.batches.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelShape,
    pub hardware: HardwareConfig,
    pub trace: TraceSpec,
    pub sim: SimConfig,
    pub batches: Vec<u32>,
    pub max_batch: u32,
    /// Modes compared by `ablate`.
    pub modes: Vec<Mode>,
    pub mapper: MapperChoice,
    /// Seed of random placements.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: presets::model("desk").expect("desk preset"),
            hardware: presets::hardware("desk").expect("desk preset"),
            trace: TraceSpec {
                path: None,
                generate: default_trace_config(),
                tokens: TokenCounts::default(),
            },
            sim: SimConfig::default(),
            batches: vec![1],
            max_batch: 16,
            modes: Mode::ALL.to_vec(),
            mapper: MapperChoice::Greedy,
            seed: DEFAULT_SEED,
            sweep: None,
        }
    }
}

/// Command-line overrides, applied after the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub batch: Option<u32>,
    pub mode: Option<Mode>,
    pub mapper: Option<MapperChoice>,
    pub trace: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> CliResult<Self> {
        let user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Some((v, p.parent().map(Path::to_path_buf)))
            }
            None => None,
        };
        let mut cfg = match user {
            Some((v, dir)) => {
                let mut cfg = Self::from_value(v)?;
                if let (Some(t), Some(dir)) = (cfg.trace.path.as_mut(), dir) {
                    if t.is_relative() {
                        *t = dir.join(&*t);
                    }
                }
                cfg
            }
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults deep-merged with `user`.
    pub fn from_value(user: Value) -> CliResult<Self> {
        let Value::Object(mut user) = user else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let mut base = to_value(&Self::default())?;
        for (key, resolve) in [("model", model_base as Resolver), ("hardware", hardware_base)] {
            if let Some(v) = user.remove(key) {
                let (preset, rest) = split_preset(key, v)?;
                if let Some(name) = preset {
                    base[key] = resolve(&name)?;
                }
                merge(&mut base[key], rest);
            }
        }
        merge(&mut base, Value::Object(user));
        serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.trace.generate.rng_seed = s;
        }
        if let Some(b) = o.batch {
            self.batches = vec![b];
        }
        if let Some(m) = o.mode {
            self.modes = vec![m];
            if let Some(s) = self.sweep.as_mut() {
                s.modes = vec![m];
            }
        }
        if let Some(m) = o.mapper {
            self.mapper = m;
        }
        if let Some(t) = &o.trace {
            self.trace.path = Some(t.clone());
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.hardware.validate_for(&self.model)?;
        self.trace.generate.validate()?;
        self.sim.validate()?;
        if self.trace.path.is_none() && (self.trace.tokens.prefill == 0 || self.trace.tokens.decode == 0) {
            return Err(CliError::Config("trace needs at least one prompt and one generated token".into()));
        }
        if let Some(p) = &self.trace.path {
            if !p.is_file() {
                return Err(CliError::io(
                    format!("trace {}", p.display()),
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
        if self.batches.is_empty() {
            return Err(CliError::Config("batches must not be empty".into()));
        }
        if self.modes.is_empty() {
            return Err(CliError::Config("modes must not be empty".into()));
        }
        let mut all: Vec<u32> = self.batches.clone();
        if let Some(s) = &self.sweep {
            all.extend(&s.batches);
            if s.dimm_counts.contains(&0) || s.multipliers.contains(&0) {
                return Err(CliError::Config("sweep values must be positive".into()));
            }
            for g in &s.gpus {
                presets::hardware(g)?;
            }
        }
        if let Some(b) = all.iter().find(|&&b| b == 0 || b > self.max_batch) {
            return Err(CliError::Config(format!("batch {b} outside 1..={}", self.max_batch)));
        }
        Ok(())
    }

    /// Simulation settings for one batch size.
    pub fn sim_for(&self, batch: u32) -> SimConfig {
        SimConfig { batch, ..self.sim.clone() }
    }
}

type Resolver = fn(&str) -> CliResult<Value>;

fn model_base(name: &str) -> CliResult<Value> {
    to_value(&presets::model(name)?)
}

fn hardware_base(name: &str) -> CliResult<Value> {
    to_value(&presets::hardware(name)?)
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))
}

/// The preset a section names, and the overrides left after removing it.
fn split_preset(key: &str, v: Value) -> CliResult<(Option<String>, Value)> {
    match v {
        Value::String(name) => Ok((Some(name), Value::Object(Map::new()))),
        Value::Object(mut m) => match m.remove("preset") {
            None => Ok((None, Value::Object(m))),
            Some(Value::String(name)) => Ok((Some(name), Value::Object(m))),
            Some(_) => Err(CliError::Config(format!("{key}.preset must be a string"))),
        },
        _ => Err(CliError::Config(format!("{key} must be a preset name or an object"))),
    }
}

/// Objects merge key by key; anything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(ExperimentConfig::from_value(json!({})).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn presets_then_overrides() {
        let cfg = ExperimentConfig::from_value(json!({
            "model": "opt13b",
            "hardware": {"preset": "teslat4", "dimm": {"count": 16}},
            "sim": {"scheduler": {"window": 10}},
        }))
        .unwrap();
        assert_eq!(cfg.model, presets::model("opt13b").unwrap());
        assert_eq!(cfg.hardware.gpu.name, "teslat4");
        assert_eq!(cfg.hardware.dimm.count, 16);
        assert_eq!(cfg.hardware.dimm.memory_bytes, presets::hardware("teslat4").unwrap().dimm.memory_bytes);
        assert_eq!(cfg.sim.scheduler.window, 10);
        assert_eq!(cfg.sim.scheduler.max_rounds, SimConfig::default().scheduler.max_rounds);
    }

    #[test]
    fn unknown_keys_and_presets_are_rejected() {
        assert!(matches!(ExperimentConfig::from_value(json!({"modle": "desk"})), Err(CliError::Config(_))));
        assert!(ExperimentConfig::from_value(json!({"model": "gpt9"})).is_err());
        assert!(ExperimentConfig::from_value(json!({"model": 3})).is_err());
        assert!(ExperimentConfig::from_value(json!([1])).is_err());
    }

    #[test]
    fn batch_bounds() {
        let mut cfg = ExperimentConfig::default();
        cfg.batches = vec![17];
        assert!(cfg.validate().is_err());
        cfg.max_batch = 32;
        cfg.validate().unwrap();
        cfg.batches = vec![0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides { seed: Some(9), batch: Some(4), mode: Some(Mode::Random), ..Default::default() });
        assert_eq!((cfg.seed, cfg.trace.generate.rng_seed), (9, 9));
        assert_eq!(cfg.batches, vec![4]);
        assert_eq!(cfg.modes, vec![Mode::Random]);
    }

    #[test]
    fn merge_replaces_non_objects() {
        let mut a = json!({"x": {"y": 1, "z": [1, 2]}, "w": 1});
        merge(&mut a, json!({"x": {"z": [3]}, "w": {"k": 2}}));
        assert_eq!(a, json!({"x": {"y": 1, "z": [3]}, "w": {"k": 2}}));
    }
}
