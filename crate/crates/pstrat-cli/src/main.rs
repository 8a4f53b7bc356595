//! `pstrat` — principal-stratification analysis of cluster-randomized
//! trials from the command line.
//!
//! Four subcommands cover the workflow end to end: `analyze` fits the model
//! to a trial dataset and writes estimates, convergence diagnostics, and
//! posterior draws; `simulate` generates a synthetic benchmark trial with
//! known ground truth; `replicate` measures frequentist operating
//! characteristics over repeated synthetic trials; `diagnose` recomputes
//! diagnostics from stored draws.
//!
//! All outputs are machine-readable files in the chosen output directory;
//! progress and human-readable summaries go to standard error. Every output
//! directory contains a `manifest.json` and `config.resolved.toml` that
//! reproduce the run exactly.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use pstrat::Error;

const EXIT_DATA: i32 = 65;
const EXIT_COMPUTE: i32 = 70;
const EXIT_CONFIG: i32 = 78;

#[derive(Parser)]
#[command(
    name = "pstrat",
    version,
    about = "Bayesian principal-stratification analysis of cluster-randomized \
             trials with partial treatment uptake",
    after_help = "Exit codes: 0 success, 65 invalid input data, \
                  70 numerical failure, 78 invalid configuration."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a trial dataset; write estimates, diagnostics, and
    /// posterior draws.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic benchmark trial with known ground truth.
    Simulate(SimulateArgs),
    /// Measure coverage, bias, and RMSE over repeated synthetic trials.
    Replicate(ReplicateArgs),
    /// Recompute convergence and calibration diagnostics from stored draws.
    Diagnose(DiagnoseArgs),
}

/// Flags shared by every subcommand. Command-line values override the
/// config file, which overrides built-in defaults.
#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

impl CommonArgs {
    /// Load the config file (or defaults) and fold in the shared flags.
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            cfg.jobs = jobs;
        }
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

/// MCMC length flags shared by `analyze` and `replicate`.
#[derive(Args)]
struct ChainFlags {
    /// Total sweeps per chain, burn-in included.
    #[arg(long)]
    iters: Option<usize>,
    /// Sweeps discarded before retention starts.
    #[arg(long)]
    burnin: Option<usize>,
    /// Keep every n-th post-burn-in sweep.
    #[arg(long)]
    thin: Option<usize>,
}

impl ChainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.iters {
            cfg.chain.n_iterations = v;
        }
        if let Some(v) = self.burnin {
            cfg.chain.burn_in = v;
        }
        if let Some(v) = self.thin {
            cfg.chain.thin = v;
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Cluster-level CSV (id, arm, covariates, compliance metrics).
    #[arg(long, value_name = "FILE")]
    clusters: PathBuf,
    /// Individual-level CSV (cluster id, covariates, uptake, outcome).
    #[arg(long, value_name = "FILE")]
    individuals: PathBuf,
    /// Number of chains.
    #[arg(long)]
    chains: Option<usize>,
    #[command(flatten)]
    chain_flags: ChainFlags,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Benchmark case (1–4).
    #[arg(long)]
    case: u8,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ReplicateArgs {
    /// Benchmark case (1–4).
    #[arg(long)]
    case: u8,
    /// Number of replicated trials.
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[command(flatten)]
    chain_flags: ChainFlags,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Directory holding draw tables (or chain_* subdirectories).
    #[arg(long, value_name = "DIR")]
    draws: PathBuf,
    /// Cluster-level CSV the draws were fit to.
    #[arg(long, value_name = "FILE")]
    clusters: PathBuf,
    /// Individual-level CSV the draws were fit to.
    #[arg(long, value_name = "FILE")]
    individuals: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Analyze(a) => {
            let mut cfg = a.common.resolve()?;
            if let Some(c) = a.chains {
                cfg.chain.n_chains = c;
            }
            a.chain_flags.apply(&mut cfg);
            commands::cmd_analyze(
                &cfg,
                &a.clusters,
                &a.individuals,
                &a.common.out_dir("analysis"),
            )
        }
        Command::Simulate(a) => {
            let cfg = a.common.resolve()?;
            commands::cmd_simulate(&cfg, a.case, &a.common.out_dir("simulated"))
        }
        Command::Replicate(a) => {
            let mut cfg = a.common.resolve()?;
            a.chain_flags.apply(&mut cfg);
            commands::cmd_replicate(&cfg, a.case, a.reps, &a.common.out_dir("replication"))
        }
        Command::Diagnose(a) => {
            let cfg = a.common.resolve()?;
            commands::cmd_diagnose(
                &cfg,
                &a.draws,
                &a.clusters,
                &a.individuals,
                &a.common.out_dir("diagnostics"),
            )
        }
    }
}

/// Exit-code contract: data problems, configuration problems, and numerical
/// failures are distinguishable by the caller.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Data { .. } | Error::Io(_) | Error::Csv(_) => EXIT_DATA,
        Error::Config(_) | Error::Domain(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_COMPUTE,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_distinguish_data_config_and_compute_failures() {
        assert_eq!(exit_code(&Error::data("bad row")), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::other("gone"))),
            EXIT_DATA
        );
        assert_eq!(exit_code(&Error::Config("bad key".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Domain("bad arg".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Numeric("singular".into())), EXIT_COMPUTE);
        let codes = [EXIT_DATA, EXIT_CONFIG, EXIT_COMPUTE];
        assert_eq!(
            codes.len(),
            codes.iter().collect::<std::collections::HashSet<_>>().len()
        );
    }

    #[test]
    fn cli_definition_is_internally_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_defaults() {
        let common = CommonArgs {
            config: None,
            seed: Some(99),
            out: None,
            jobs: Some(2),
        };
        let cfg = common.resolve().unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.jobs, 2);
        assert_eq!(common.out_dir("analysis"), PathBuf::from("analysis"));
    }
}
