//! Batch front end: CSV ingestion, JSON analysis reports and simulation runs.

pub mod config;
pub mod error;
pub mod ingest;
pub mod report;
pub mod simulate;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use ingest::{export_csv, ingest_csv, ingest_reader};
pub use report::{analyze_dataset, run_analysis, Report};
