use serde::{Deserialize, Serialize};

use super::{simulate, simulate_prefill, SimConfig, SimReport};
use crate::costmodel::DeviceTiming;
use crate::error::{Error, Result};
use crate::mapper::{random_placement, solve_exact, solve_greedy, MappingProblem, MappingSolution, SolveLimits};
use crate::model::{presets, HardwareConfig, ModelShape, NeuronPlacement, TokenCounts};
use crate::scheduler::Guidance;
use crate::trace::{generate_trace, ActivationTrace, TraceGenConfig};

/// System variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Random offline placement, no online scheduling.
    Random,
    /// Solved offline placement, no online scheduling.
    Partition,
    /// Partition plus hot/cold adjustment.
    Adjustment,
    /// Adjustment plus window rebalancing.
    Full,
    /// Partition plus adjustment guided by neuron states only.
    TokenOnly,
    /// Partition plus adjustment guided by the parent table only.
    LayerOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Random,
        Mode::Partition,
        Mode::Adjustment,
        Mode::Full,
        Mode::TokenOnly,
        Mode::LayerOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Random => "random",
            Mode::Partition => "partition",
            Mode::Adjustment => "adjustment",
            Mode::Full => "full",
            Mode::TokenOnly => "token-only",
            Mode::LayerOnly => "layer-only",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!("unknown mode {name:?} (known: {})", known.join(", ")))
            })
    }

    /// Adjustment guidance and whether rebalancing runs.
    pub fn online(self) -> (Option<Guidance>, bool) {
        match self {
            Mode::Random | Mode::Partition => (None, false),
            Mode::Adjustment => (Some(Guidance::Combined), false),
            Mode::Full => (Some(Guidance::Combined), true),
            Mode::TokenOnly => (Some(Guidance::TokenOnly), false),
            Mode::LayerOnly => (Some(Guidance::LayerOnly), false),
        }
    }

    /// `base` with this mode's online switches and label.
    pub fn configure(self, base: &SimConfig) -> SimConfig {
        let (adjustment, rebalancing) = self.online();
        SimConfig {
            label: self.name().into(),
            adjustment,
            rebalancing,
            ..base.clone()
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum MapperChoice {
    #[default]
    Greedy,
    /// Branch and bound from the greedy incumbent, within limits.
    Exact { max_nodes: u64, time_limit_seconds: Option<f64> },
}


/// Everything one experiment needs besides the mode.
#[derive(Clone, Debug)]
pub struct Workload {
    pub shape: ModelShape,
    pub hw: HardwareConfig,
    pub trace: ActivationTrace,
    pub sim: SimConfig,
    pub mapper: MapperChoice,
    /// Seed of the random placement.
    pub seed: u64,
}

impl Workload {
    /// The mapping problem profiled from the trace's prompt tokens.
    pub fn mapping_problem(&self) -> Result<MappingProblem> {
        let pre = simulate_prefill(&self.shape, &self.hw, &self.trace, self.sim.batch)?;
        let timing = DeviceTiming::derive(&self.shape, &self.hw, self.sim.batch);
        MappingProblem::new(self.shape.clone(), self.hw.clone(), timing, pre.freq)
    }

    pub fn solve(&self, p: &MappingProblem) -> Result<MappingSolution> {
        match self.mapper {
            MapperChoice::Greedy => solve_greedy(p),
            MapperChoice::Exact { max_nodes, time_limit_seconds } => solve_exact(
                p,
                SolveLimits {
                    max_nodes,
                    time_limit: time_limit_seconds.map(std::time::Duration::from_secs_f64),
                },
            ),
        }
    }

    pub fn placement_for(&self, mode: Mode, p: &MappingProblem) -> Result<NeuronPlacement> {
        match mode {
            Mode::Random => random_placement(p, self.seed),
            _ => Ok(self.solve(p)?.placement),
        }
    }
}

/// Trace settings of the default workload: generator defaults, plus a
/// fifth of each layer's activation profile changing between the prompt
/// and generation.
pub fn default_trace_config() -> TraceGenConfig {
    TraceGenConfig { decode_drift: 0.2, ..Default::default() }
}

/// Desk-scale default: the `desk` model on the `desk` GPU with eight DIMMs
/// and a 128 + 128 token trace from [`default_trace_config`].
pub fn default_workload() -> Result<Workload> {
    let shape = presets::model("desk")?;
    let hw = presets::hardware("desk")?;
    let trace = generate_trace(&default_trace_config(), &shape, TokenCounts::default())?;
    Ok(Workload {
        shape,
        hw,
        trace,
        sim: SimConfig::default(),
        mapper: MapperChoice::Greedy,
        seed: 0x5eed,
    })
}

/// One report per mode, all on the same trace and seeds. The solved
/// placement is computed once and shared.
pub fn run_ablation(w: &Workload, modes: &[Mode]) -> Result<Vec<(Mode, SimReport)>> {
    if modes.is_empty() {
        return Err(Error::config("no modes to run"));
    }
    let p = w.mapping_problem()?;
    let solved = if modes.iter().any(|&m| m != Mode::Random) {
        Some(w.solve(&p)?.placement)
    } else {
        None
    };
    let mut out = Vec::with_capacity(modes.len());
    for &m in modes {
        let placement = match (m, &solved) {
            (Mode::Random, _) => random_placement(&p, w.seed)?,
            (_, Some(s)) => s.clone(),
            (_, None) => unreachable!("solved placement exists for non-random modes"),
        };
        let run = simulate(&w.shape, &w.hw, &w.trace, &placement, &m.configure(&w.sim))?;
        out.push((m, run.report));
    }
    Ok(out)
}
