//! Executable invariant suites with a JSON report.

use std::path::Path;

use dbc::props::{self, PropCheck, Suite};
use serde::Serialize;

use crate::error::Result;
use crate::manifest::{write_json, RunManifest, RunStatus};

#[derive(Clone, Debug, Serialize)]
pub struct SeedChecks {
    pub seed: u64,
    pub checks: Vec<PropCheck>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropsReport {
    pub suite: Option<Suite>,
    pub runs: Vec<SeedChecks>,
    pub failed: Vec<String>,
    pub passed: bool,
}

/// Runs `suite` (or every suite) once per seed and writes `props_report.json`.
pub fn run(suite: Option<Suite>, seeds: &[u64], out: &Path) -> Result<PropsReport> {
    let config = serde_json::json!({ "suite": suite.map(|s| s.name()) });
    let mut manifest = RunManifest::start("props", &config, seeds, out)?;
    let runs: Vec<SeedChecks> = seeds
        .iter()
        .map(|&seed| SeedChecks {
            seed,
            checks: props::run(suite, seed),
        })
        .collect();
    let failed: Vec<String> = runs
        .iter()
        .flat_map(|r| {
            r.checks
                .iter()
                .filter(|c| !c.passed)
                .map(move |c| format!("{}/{} (seed {}): {}", c.suite, c.name, r.seed, c.detail))
        })
        .collect();
    let report = PropsReport {
        suite,
        runs,
        passed: failed.is_empty(),
        failed,
    };
    write_json(&manifest.output("props_report.json"), &report)?;
    manifest.finish(if report.passed { RunStatus::Passed } else { RunStatus::Failed })?;
    Ok(report)
}
