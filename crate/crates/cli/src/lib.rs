//! Config-driven experiment runner for the policy-gradient variance lab.
//!
//! A TOML config names one experiment `kind` and its seeds; [`runner::run_experiment`]
//! expands it into independent cells and writes one versioned CSV plus a
//! `run_record.csv` with the config hash and timings.

pub mod config;
pub mod runner;
pub mod sink;

pub use config::{parse_config, ConfigErrors, Diagnostic, ExperimentConfig, Kind};
pub use runner::{run_experiment, RunError, RunOptions, RunSummary};

/// Exit code for configs that fail validation.
pub const EXIT_INVALID_CONFIG: i32 = 2;
/// Exit code for runs that started but did not finish cleanly.
pub const EXIT_RUN_FAILED: i32 = 1;

/// Read and validate a config file.
pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ConfigErrors(vec![Diagnostic { line: None, message: format!("cannot read {}: {e}", path.display()) }])
    })?;
    parse_config(&text)
}
