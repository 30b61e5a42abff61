use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idw::commands;
use idw::config::{Mode, ToleranceProfile};
use idw::{CliError, CliResult, RunConfig};

/// Potential weights, implicit designs and remedied estimators for linear
/// regressions.
#[derive(Parser)]
#[command(name = "idw", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the implicit design and write the full report.
    Analyze(Common),
    /// Recalibrate the implicit design by binning and re-estimate by IPW.
    Patch(Common),
    /// IPW estimate under the implicit design.
    Estimate(Common),
    /// Monte Carlo consistency runs and assignment draws.
    Simulate(Common),
    /// Closed-form implicit design for a named specification.
    Catalog(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Long-format CSV data (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV of user IPW weights.
    #[arg(long)]
    unit_weights: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel Monte Carlo.
    #[arg(long, env = "IDW_THREADS")]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    tolerance_profile: Option<ToleranceProfile>,
    /// Gram source (overrides the config).
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

impl Common {
    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        if let Some(w) = &self.unit_weights {
            cfg.estimators.unit_weights = Some(w.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.tolerance_profile {
            cfg.tolerances.profile = p;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (common, f): (&Common, fn(&RunConfig) -> CliResult<()>) = match &cli.command {
        Command::Analyze(c) => (c, commands::cmd_analyze),
        Command::Patch(c) => (c, commands::cmd_patch),
        Command::Estimate(c) => (c, commands::cmd_estimate),
        Command::Simulate(c) => (c, commands::cmd_simulate),
        Command::Catalog(c) => (c, commands::cmd_catalog),
    };
    f(&common.config()?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("idw: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
