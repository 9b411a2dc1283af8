use std::path::Path;

use dbc::bridge::{bias_table, BiasCell, EvalRule, BIAS_TABLE_TOLERANCE};
use serde::Serialize;

use crate::error::Result;
use crate::manifest::{write_csv, RunManifest, RunStatus};

#[derive(Serialize)]
struct Row {
    steps: usize,
    schedule: String,
    error_pct: f64,
    reference_pct: Option<f64>,
    deviation_pct: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BiasReport {
    pub rule: EvalRule,
    pub cells: Vec<BiasCell>,
    /// `None` when no comparison is made (left-endpoint rule).
    pub matched: Option<bool>,
    pub worst: BiasCell,
}

impl BiasReport {
    pub fn passed(&self) -> bool {
        self.matched != Some(false)
    }
}

/// Endpoint-error table for every schedule and step count. Only the
/// right-endpoint rule is compared against the published numbers.
pub fn run(rule: EvalRule, out: &Path) -> Result<BiasReport> {
    #[derive(Serialize)]
    struct Config {
        eval_rule: EvalRule,
        tolerance_pp: f64,
    }
    let config = Config {
        eval_rule: rule,
        tolerance_pp: BIAS_TABLE_TOLERANCE,
    };
    let mut manifest = RunManifest::start("bias-table", &config, &[], out)?;
    let cells = bias_table(rule);
    let compare = rule == EvalRule::Right;
    let rows: Vec<Row> = cells
        .iter()
        .map(|c| Row {
            steps: c.steps,
            schedule: c.schedule.to_string(),
            error_pct: c.error,
            reference_pct: compare.then_some(c.reference),
            deviation_pct: compare.then(|| c.deviation()),
        })
        .collect();
    write_csv(&manifest.output("bias_table.csv"), &rows)?;

    let worst = *cells
        .iter()
        .max_by(|a, b| a.deviation().total_cmp(&b.deviation()))
        .expect("table has cells");
    let matched = compare.then(|| worst.deviation() <= BIAS_TABLE_TOLERANCE);
    if !compare {
        manifest.note(
            "left-endpoint rule: no comparison against the published table, which was produced with right-endpoint sums",
        );
    }
    let report = BiasReport {
        rule,
        cells,
        matched,
        worst,
    };
    manifest.finish(if report.passed() { RunStatus::Passed } else { RunStatus::Failed })?;
    Ok(report)
}
