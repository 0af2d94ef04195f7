//! Configuration-driven experiments for diversity-controlled ensembles:
//! λ sweeps over ACE ensembles and stacked mixtures of classifiers, NCL
//! regression runs, and CSV/JSON reporting.

pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod report;

pub use config::{ExperimentConfig, Mode, ReportFormat};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, run_sweep, SeedResult, SweepReport, SweepRow};
pub use report::write_report;
