//! `ndpsim`: generate traces, solve placements, simulate, and sweep.
//!
//! Exit codes: 0 success, 2 configuration error, 3 infeasible, 4 I/O.

mod commands;
mod config;
mod error;
mod output;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ndpsim_core::engine::{MapperChoice, Mode};

use config::{ExperimentConfig, Overrides, DEFAULT_EXACT_NODES};
use error::CliResult;

#[derive(Parser)]
#[command(name = "ndpsim", version, about = "GPU + NDP-DIMM LLM decoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic activation trace.
    GenTrace(Common),
    /// Solve the offline neuron placement.
    SolveMap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mapper: MapperFlags,
        #[arg(long)]
        batch: Option<u32>,
    },
    /// Simulate decoding in one mode.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mapper: MapperFlags,
        #[arg(long)]
        batch: Option<u32>,
        #[arg(long, value_parser = parse_mode, default_value = "full")]
        mode: Mode,
        /// Placement file from `solve-map`; solved afresh when absent.
        #[arg(long)]
        placement: Option<PathBuf>,
    },
    /// Compare system variants on one trace.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mapper: MapperFlags,
        #[arg(long)]
        batch: Option<u32>,
        /// Run only this mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Run the config's sweep grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mapper: MapperFlags,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config, merged over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds trace generation and random placement.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "ndpsim-out")]
    out: PathBuf,
    /// Replay this trace file instead of generating one.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct MapperFlags {
    /// Branch and bound from the greedy solution.
    #[arg(long, conflicts_with = "greedy")]
    exact: bool,
    #[arg(long)]
    greedy: bool,
    /// Node limit of `--exact`.
    #[arg(long, requires = "exact")]
    max_nodes: Option<u64>,
}

impl MapperFlags {
    fn choice(&self) -> Option<MapperChoice> {
        if self.exact {
            Some(MapperChoice::Exact {
                max_nodes: self.max_nodes.unwrap_or(DEFAULT_EXACT_NODES),
                time_limit_seconds: None,
            })
        } else if self.greedy {
            Some(MapperChoice::Greedy)
        } else {
            None
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn load(common: &Common, mut o: Overrides) -> CliResult<ExperimentConfig> {
    o.seed = common.seed;
    o.trace = common.trace.clone();
    ExperimentConfig::load(common.config.as_deref(), &o)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenTrace(c) => {
            let cfg = load(&c, Overrides::default())?;
            commands::gen_trace(&cfg, &c.out)
        }
        Command::SolveMap { common, mapper, batch } => {
            let cfg = load(&common, Overrides { batch, mapper: mapper.choice(), ..Default::default() })?;
            commands::solve_map(&cfg, &common.out)
        }
        Command::Simulate { common, mapper, batch, mode, placement } => {
            let o = Overrides { batch, mapper: mapper.choice(), mode: Some(mode), ..Default::default() };
            let cfg = load(&common, o)?;
            commands::simulate_cmd(&cfg, mode, placement.as_deref(), &common.out)
        }
        Command::Ablate { common, mapper, batch, mode } => {
            let cfg = load(&common, Overrides { batch, mode, mapper: mapper.choice(), ..Default::default() })?;
            commands::ablate(&cfg, &common.out)
        }
        Command::Sweep { common, mapper, mode, jobs } => {
            let cfg = load(&common, Overrides { mode, mapper: mapper.choice(), ..Default::default() })?;
            sweep::sweep(&cfg, jobs, &common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ndpsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
