use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use frontstab::config::RunConfig;
use frontstab::pipeline;
use frontstab::report::AssumptionReport;
use frontstab::Error;

/// Stability checks and diagnostics for weighted traveling fronts.
#[derive(Parser)]
#[command(name = "frontstab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// TOML run configuration (defaults apply when absent).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run downstream stages even if `check` has not passed.
    #[arg(long, global = true)]
    force: bool,
    /// Seed for the randomized sample sweeps; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Verify the hypotheses and write check.csv and constants.csv.
    Check,
    /// Write the front profile.
    Profile,
    /// Write essential spectrum curves, spatial roots and the marginal data.
    Spectrum,
    /// Evans function winding on the region boundary.
    Evans,
    /// Contour-integral semigroup, kernel samples and envelope fits.
    Green,
    /// Nonlinear evolution runs with phase and decay monitors.
    Evolve,
    /// Merge stage outputs into summary.csv.
    Report,
}

fn exec(cli: &Cli) -> Result<AssumptionReport, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out));
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    if !matches!(cli.cmd, Cmd::Report) {
        std::fs::create_dir_all(&out)?;
    }
    match cli.cmd {
        Cmd::Check => pipeline::cmd_check(&cfg, &out),
        Cmd::Profile => pipeline::cmd_profile(&cfg, &out),
        Cmd::Spectrum => pipeline::cmd_spectrum(&cfg, &out),
        Cmd::Evans => pipeline::cmd_evans(&cfg, &out),
        Cmd::Green => pipeline::cmd_green(&cfg, &out, cli.force),
        Cmd::Evolve => pipeline::cmd_evolve(&cfg, &out, cli.force),
        Cmd::Report => pipeline::cmd_report(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(&cli) {
        Ok(rep) => {
            print!("{rep}");
            ExitCode::from(if rep.passed() { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Assumption(_)) { 1 } else { 2 })
        }
    }
}
