//! `rossviab`: config-driven robust viability kernel pipeline.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 compute error,
//! 4 assertion failure (a violated solver guarantee).

mod commands;
mod config;
mod lock;
mod svg;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::RunConfig;
use rossviab_core::{Mode, ScenarioMode};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Compute(String),
    Assertion(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Compute(m) => write!(f, "compute error: {m}"),
            CliError::Assertion(m) => write!(f, "assertion failed: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(_) => 3,
            CliError::Assertion(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "rossviab", version, about = "Robust viability kernels for a controlled Ross-Macdonald dengue model")]
struct Cli {
    /// JSON configuration file; omitted fields take the built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides io.out_dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// RNG seed (overrides the config seed)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Uncertainty enumeration mode: full | corners
    #[arg(long, global = true)]
    mode: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the robust viability kernel for one uncertainty set
    Kernel {
        /// Name of the uncertainty set declared in the config
        #[arg(default_value = "middle")]
        set: String,
    },
    /// Compute several kernels and check their inclusion ordering
    Compare {
        /// Two or more set names
        #[arg(required = true, num_args = 2..)]
        sets: Vec<String>,
    },
    /// Calibrate the model from a daily incidence CSV (`day,new_cases`)
    Fit {
        incidence_csv: PathBuf,
    },
    /// Monte Carlo closed-loop runs from a start state using a saved policy
    Simulate {
        /// Set whose kernel/policy artifacts to load
        set: String,
        /// Start state as `m,h`
        #[arg(long)]
        x0: String,
        /// Number of random scenarios
        #[arg(long, default_value_t = 1000)]
        scenarios: usize,
        /// Scenario sampling: uniform | extreme-switching
        #[arg(long, default_value = "extreme-switching")]
        scenario_mode: String,
        /// Cap on trajectory CSV files written
        #[arg(long, default_value_t = 20)]
        max_trajectories: usize,
    },
    /// Write a synthetic incidence CSV generated by the model
    GenerateSynthetic {
        /// Output path (default: <out>/synthetic_incidence.csv)
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = RunConfig::load(cli.config.as_deref())?;
    let mode = match cli.mode.as_deref() {
        Some(s) => Mode::from_str(s).map_err(|e| CliError::Config(e.to_string()))?,
        None => config.uncertainty.mode,
    };
    let ctx = Ctx {
        out_dir: cli.out.unwrap_or_else(|| PathBuf::from(&config.io.out_dir)),
        seed: cli.seed.unwrap_or(config.seed),
        mode,
        config,
    };
    match cli.command {
        Command::Kernel { set } => commands::cmd_kernel(&ctx, &set),
        Command::Compare { sets } => commands::cmd_compare(&ctx, &sets),
        Command::Fit { incidence_csv } => commands::cmd_fit(&ctx, &incidence_csv),
        Command::Simulate { set, x0, scenarios, scenario_mode, max_trajectories } => {
            let x0 = parse_state(&x0)?;
            let mode = ScenarioMode::from_str(&scenario_mode).map_err(|e| CliError::Config(e.to_string()))?;
            commands::cmd_simulate(&ctx, &set, x0, scenarios, mode, max_trajectories)
        }
        Command::GenerateSynthetic { output } => commands::cmd_generate_synthetic(&ctx, output.as_deref()),
    }
}

fn parse_state(s: &str) -> Result<(f64, f64), CliError> {
    let err = || CliError::Config(format!("--x0 expects 'm,h' with both in [0,1], got '{s}'"));
    let (m, h) = s.split_once(',').ok_or_else(err)?;
    let m: f64 = m.trim().parse().map_err(|_| err())?;
    let h: f64 = h.trim().parse().map_err(|_| err())?;
    if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&h) {
        return Err(err());
    }
    Ok((m, h))
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
