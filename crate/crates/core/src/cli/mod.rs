//! Command-line experiment runner.
//!
//! ```text
//! fraclogi <mode> --config <path> [--out <dir>] [--seed N] [--threads N]
//! fraclogi scenario <name> [--out <dir>] [--threads N]
//! ```
//!
//! Exit codes: 0 success, 1 I/O failure, 2 validation failure, 3 solver
//! failure, 4 inconclusive classification, 5 failed check.

pub mod config;
pub mod runner;
pub mod scenarios;
pub mod verify;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, Mode};
pub use runner::{build_problem, initial_datum, run, ExitStatus, RunOutcome};
pub use scenarios::{run_scenario, Scenario, ScenarioReport};

#[derive(Debug, Parser)]
#[command(
    name = "fraclogi",
    version,
    about = "Steady states, eigenvalues and trajectories of nonlocal logistic equations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: `output` from the configuration, else `out/<mode>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    pub name: Scenario,
    /// Parent directory; outputs go to `<out>/<name>`.
    #[arg(long, default_value = "out/scenarios")]
    pub out: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// First eigenpairs of Ω and Ω₀ and optional weighted problems.
    Eigen(RunArgs),
    /// One steady state.
    Steady(RunArgs),
    /// Steady states along a λ list.
    Sweep(RunArgs),
    /// A parabolic trajectory.
    Evolve(RunArgs),
    /// Potential-well class of an initial datum, or the fate of a trajectory file.
    Classify(RunArgs),
    /// The built-in invariant suite.
    Verify(RunArgs),
    /// A pre-configured experiment and its acceptance predicate.
    Scenario(ScenarioArgs),
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, String> {
    match threads {
        None => Ok(f()),
        Some(0) => Err("--threads: must be positive".into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| format!("--threads: {e}")),
    }
}

fn run_mode(mode: Mode, args: RunArgs) -> i32 {
    let mut cfg = match ExperimentConfig::from_path(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitStatus::Validation.code();
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(mode.name()));
    cfg.output = Some(out.clone());
    match with_threads(args.threads, || run(mode, &cfg, &out)) {
        Ok(outcome) => {
            match &outcome.error {
                Some(e) => eprintln!("error: {e}"),
                None => println!("{mode}: {:?}, outputs in {}", outcome.status, out.display()),
            }
            outcome.status.code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::Validation.code()
        }
    }
}

fn run_scenario_command(args: ScenarioArgs) -> i32 {
    match with_threads(args.threads, || run_scenario(args.name, &args.out)) {
        Ok(report) => {
            for c in &report.checks {
                println!(
                    "{} {}: {} (expected {})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.expected
                );
            }
            for r in report.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!("run {}: {}", r.name, r.error.as_deref().unwrap_or_default());
            }
            println!(
                "scenario {}: {} ({})",
                args.name.name(),
                if report.passed { "pass" } else { "fail" },
                args.out.join(args.name.name()).join("scenario.json").display()
            );
            report.status().code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::Validation.code()
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                ExitStatus::Validation.code()
            } else {
                0
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Eigen(a) => run_mode(Mode::Eigen, a),
        Command::Steady(a) => run_mode(Mode::Steady, a),
        Command::Sweep(a) => run_mode(Mode::Sweep, a),
        Command::Evolve(a) => run_mode(Mode::Evolve, a),
        Command::Classify(a) => run_mode(Mode::Classify, a),
        Command::Verify(a) => run_mode(Mode::Verify, a),
        Command::Scenario(a) => run_scenario_command(a),
    }
}
