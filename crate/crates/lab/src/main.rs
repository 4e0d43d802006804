use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use sdmd_lab::{run_file, thread_count, Command, Overrides};

/// Stochastic dynamic mode decomposition experiments.
#[derive(Debug, Parser)]
#[command(name = "sdmd-lab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default from SDMD_LAB_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = thread_count(cli.threads).and_then(|threads| {
        if let Some(n) = threads.filter(|n| *n > 0) {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| sdmd_lab::error::LabError::Other(e.to_string()))?;
        }
        run_file(
            cli.command,
            &cli.config,
            &Overrides {
                out: cli.out,
                seed: cli.seed,
            },
        )
    });
    match result {
        Ok(report) => {
            println!(
                "{} finished in {:.1} s; report at {}",
                report.command,
                report.wall_clock_seconds,
                report.config.output_dir.join("report.json").display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sdmd-lab: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
