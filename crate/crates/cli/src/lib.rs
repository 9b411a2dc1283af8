//! Experiment commands behind the `dbc` binary. Each command writes a
//! [`RunManifest`](manifest::RunManifest) plus CSV/JSON artifacts into its
//! output directory and returns a report the caller can gate on.

pub mod bias;
pub mod drift;
pub mod error;
pub mod manifest;
pub mod mdp;
pub mod props;

pub use error::{CliError, Result};
