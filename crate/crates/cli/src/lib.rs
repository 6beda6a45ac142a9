//! Experiment harness: INI specs, IDX and PNM I/O, synthetic images,
//! subcommand drivers and CSV/JSON reports.

pub mod commands;
pub mod error;
pub mod idx;
pub mod pnm;
pub mod report;
pub mod spec;
pub mod synthetic;

pub use error::{HarnessError, Result};
pub use report::RunReport;
pub use spec::ExperimentSpec;
