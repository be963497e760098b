//! One run per value of a numeric config key, in parallel, plus a summary CSV.

use std::path::Path;

use rayon::prelude::*;

use crate::artifacts::{write_atomic, Csv};
use crate::pipeline::{execute, Stage};
use crate::{CliError, RunConfig};

/// Summary row of one sweep entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub value: String,
    pub field_value: Option<f64>,
    pub oracle_value: Option<f64>,
    pub checks_passed: usize,
    pub checks_total: usize,
    /// `ok`, or the error that stopped the entry.
    pub status: String,
}

/// Runs `base` with `key` set to each of `values` under `out/<key>=<value>`.
/// Every value is validated before any compute; per-entry failures are
/// recorded in the summary and the sweep continues.
pub fn sweep(
    base: &RunConfig,
    key: &str,
    values: &[String],
    out: &Path,
    workers: usize,
    stage: Stage,
) -> Result<Vec<SweepEntry>, CliError> {
    if values.is_empty() {
        return Err(CliError::Validation("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.with_value(key, v)?;
            cfg.output_dir = out.join(format!("{key}={v}"));
            Ok(cfg)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Compute(e.to_string()))?;
    let entries: Vec<SweepEntry> = pool.install(|| {
        configs
            .par_iter()
            .zip(values)
            .map(|(cfg, v)| match execute(cfg, stage) {
                Ok(o) => SweepEntry {
                    value: v.clone(),
                    field_value: o.field_value,
                    oracle_value: o.oracle_value,
                    checks_passed: o.passed(),
                    checks_total: o.reports.len(),
                    status: "ok".into(),
                },
                Err(e) => SweepEntry {
                    value: v.clone(),
                    field_value: None,
                    oracle_value: None,
                    checks_passed: 0,
                    checks_total: 0,
                    status: e.to_string().replace([',', '\n'], ";"),
                },
            })
            .collect()
    });
    let mut csv = Csv::new(&["value", "field_value", "oracle_value", "checks_passed", "checks_total", "status"]);
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &entries {
        csv.text_row(&[
            e.value.clone(),
            opt(e.field_value),
            opt(e.oracle_value),
            e.checks_passed.to_string(),
            e.checks_total.to_string(),
            e.status.clone(),
        ]);
    }
    write_atomic(&out.join("sweep_summary.csv"), csv.as_str().as_bytes())?;
    Ok(entries)
}
