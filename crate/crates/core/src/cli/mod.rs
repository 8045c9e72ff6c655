//! Command-line surface: `pretrain`, `adapt`, `verify`, `sweep`, `report`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing artifact,
//! 4 inconclusive verification, 1 anything else (including failed checks).

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    battery_tasks, cmd_adapt, cmd_pretrain, cmd_report, cmd_sweep, cmd_verify, run_battery, AdaptReport,
    BatteryReport, FppArtifact, InitSource, TaskReport,
};
pub use config::{RunConfig, SweepSpec};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "flatcal", version, about = "Flatness-aware prompt pretraining lab on a synthetic encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Comma-separated run seeds, replacing `seeds` from the config.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seed_list: Option<Vec<u64>>,
    /// Output directory, replacing `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "FLATCAL_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Pretrain prompts with FPP; writes the artifact and loss traces.
    Pretrain,
    /// Test-time adaptation over the task battery; writes metrics, logs and
    /// reliability tables.
    Adapt,
    /// Theorem-1, step-equivalence and curvature-link checks.
    Verify,
    /// Runs the battery for each value in the `[sweep]` table.
    Sweep,
    /// Summarizes the reports found in the output directory.
    Report,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Inconclusive { .. } => 4,
        _ => 1,
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seeds) = &cli.seed_list {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed invocation; returns what should be printed.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve(cli)?;
    let jobs = cli.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    pool.install(|| {
        let out = cfg.out_dir();
        match cli.command {
            Command::Pretrain => {
                let r = cmd_pretrain(&cfg)?;
                Ok(format!("pretrained {} prompt(s); artifact {}", r["runs"].as_array().map_or(0, Vec::len), r["metadata"]["artifact"]))
            }
            Command::Adapt => {
                let r = cmd_adapt(&cfg)?;
                let b = &r.battery;
                Ok(format!(
                    "{} task(s): acc {} ECE {} (percent); reports in {}",
                    b.n_tasks,
                    output::pct(b.acc.mean),
                    output::pct(b.ece.mean),
                    out.display()
                ))
            }
            Command::Verify => {
                cmd_verify(&cfg)?;
                Ok(format!("all checks passed; report in {}", out.join("verify.json").display()))
            }
            Command::Sweep => {
                let r = cmd_sweep(&cfg)?;
                Ok(format!("{} sweep row(s) in {}", r["rows"].as_array().map_or(0, Vec::len), out.join("sweep.csv").display()))
            }
            Command::Report => cmd_report(&out),
        }
    })
}

/// Parses arguments, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
