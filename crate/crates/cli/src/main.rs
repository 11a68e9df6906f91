use clap::{Parser, Subcommand};
use pgvlab_cli::{load_config, run_experiment, RunOptions, EXIT_INVALID_CONFIG, EXIT_RUN_FAILED};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pgvlab", version, about = "Policy-gradient variance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; PGVLAB_THREADS caps this.
        #[arg(long)]
        workers: Option<usize>,
        /// Added to every listed seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Check a config file without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let path = match &cli.command {
        Command::Run { config, .. } | Command::Validate { config } => config,
    };
    let cfg = match load_config(path) {
        Ok(c) => c,
        Err(errs) => {
            eprintln!("{}: invalid config", path.display());
            for d in &errs.0 {
                eprintln!("  {d}");
            }
            return ExitCode::from(EXIT_INVALID_CONFIG as u8);
        }
    };
    match cli.command {
        Command::Validate { .. } => {
            println!("{}: ok ({} config, hash {})", path.display(), cfg.kind.as_str(), cfg.hash);
            ExitCode::SUCCESS
        }
        Command::Run { out, workers, seed_offset, .. } => {
            match run_experiment(&cfg, &RunOptions { out, workers, seed_offset }) {
                Ok(s) => {
                    println!(
                        "{} cells, {} rows -> {} ({} workers)",
                        s.cells,
                        s.rows,
                        s.data_file.display(),
                        s.workers
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    ExitCode::from(EXIT_RUN_FAILED as u8)
                }
            }
        }
    }
}
