//! Experiment harness for stochastic dynamic mode decomposition.
//!
//! A run reads a JSON [`config::Config`], executes one command, writes result
//! CSVs plus an atomically written `report.json` into the output directory and
//! maps failures to exit codes (see [`error::LabError::exit_code`]).

pub mod config;
pub mod convergence;
pub mod error;
pub mod experiments;
pub mod invariants;
pub mod pipeline;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use config::{Config, Experiment};
use error::{LabError, Result};
use report::{blob_hash, Report};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "SDMD_LAB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Spectrum,
    Convergence,
    Compare,
    Neuralmass,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Spectrum => "spectrum",
            Command::Convergence => "convergence",
            Command::Compare => "compare",
            Command::Neuralmass => "neuralmass",
        }
    }

    fn check(self, config: &Config) -> Result<()> {
        let bad = |msg: &str| Err(LabError::Config(format!("{}: {msg}", self.name())));
        let e = config.experiment;
        match self {
            Command::Simulate => Ok(()),
            Command::Convergence if !e.is_convergence() => bad("needs a convergence-* experiment"),
            Command::Neuralmass if e != Experiment::NeuralMass => bad("needs the neural-mass experiment"),
            Command::Spectrum if e.is_convergence() || e == Experiment::NeuralMass => {
                bad("use the convergence or neuralmass command for this experiment")
            }
            Command::Spectrum if config.methods.len() != 1 => bad("takes exactly one method; use compare"),
            Command::Compare if e.is_convergence() => bad("use the convergence command for this experiment"),
            Command::Compare if config.methods.len() < 2 => bad("needs at least two methods"),
            _ => Ok(()),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Reads, resolves and runs a config file. The file's blob hash is recorded.
pub fn run_file(command: Command, path: &Path, overrides: &Overrides) -> Result<Report> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
    let config = Config::resolve(&text)?;
    let mut hashes = std::collections::BTreeMap::new();
    hashes.insert(path.display().to_string(), blob_hash(&bytes));
    run(command, config, overrides, hashes)
}

/// Runs a resolved config. The report is written before invariant failures
/// are turned into an error.
pub fn run(
    command: Command,
    mut config: Config,
    overrides: &Overrides,
    input_hashes: std::collections::BTreeMap<String, String>,
) -> Result<Report> {
    let start = Instant::now();
    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    config.validate()?;
    command.check(&config)?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    let config_echo = config.to_json()?;
    sdmd::io::write_atomic(&dir.join("config.resolved.json"), config_echo.as_bytes())
        .map_err(|source| LabError::Stage { stage: "write results", source })?;

    let mut report = Report::new(command.name(), &config);
    report.input_hashes = input_hashes;
    report.outputs.push("config.resolved.json".into());
    report.invariants.extend(invariants::preflight()?);
    if report.failed_invariants().is_empty() {
        match command {
            Command::Simulate => experiments::simulate(&config, &mut report, &dir)?,
            Command::Spectrum | Command::Compare if config.experiment == Experiment::NeuralMass => {
                experiments::neural_mass(&config, &mut report, &dir)?
            }
            Command::Spectrum | Command::Compare => {
                experiments::spectra(&config, &mut report, &dir)?;
            }
            Command::Convergence => convergence::run(&config, &mut report, &dir)?,
            Command::Neuralmass => experiments::neural_mass(&config, &mut report, &dir)?,
        }
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.write(&dir)?;
    let failed: Vec<String> = report.failed_invariants().iter().map(|o| o.name.clone()).collect();
    if !failed.is_empty() {
        return Err(LabError::Invariant(failed.join(", ")));
    }
    Ok(report)
}

/// Thread count from the flag, then the environment, else rayon's default.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| LabError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}
