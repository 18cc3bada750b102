//! Report files. Everything except `meta.json` is a pure function of the resolved config.

use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use bsdeflow_core::Dims;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::run::{CliError, GateReport, Outcome, ProblemRecord};

#[derive(Serialize)]
pub struct Report<'a> {
    pub experiment: &'static str,
    pub pass: bool,
    pub config: &'a ExperimentConfig,
    pub problem: &'a ProblemRecord,
    pub dims: Dims,
    pub hypotheses: &'a GateReport,
    /// Set when the run went ahead despite failed hypothesis checks.
    pub forced: bool,
    pub warnings: Vec<String>,
    pub results: &'a serde_json::Value,
}

#[derive(Serialize)]
struct Meta {
    version: &'static str,
    experiment: &'static str,
    started_unix: f64,
    wall_seconds: f64,
}

fn write(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Writes `report.json`, `summary.txt`, `meta.json` and the optional CSV into `dir`.
pub fn write_reports(
    dir: &Path,
    report: &Report<'_>,
    outcome: &Outcome,
    started: SystemTime,
    wall: Duration,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let body = serde_json::to_string_pretty(report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dir.join("report.json"), &(body + "\n"))?;
    write(&dir.join("summary.txt"), &summary_text(report, outcome))?;
    if let Some((name, csv)) = &outcome.csv {
        write(&dir.join(name), csv)?;
    }
    let meta = Meta {
        version: env!("CARGO_PKG_VERSION"),
        experiment: report.experiment,
        started_unix: started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        wall_seconds: wall.as_secs_f64(),
    };
    let meta = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dir.join("meta.json"), &(meta + "\n"))
}

pub fn summary_text(report: &Report<'_>, outcome: &Outcome) -> String {
    let mut s = format!(
        "{} on {} (seed {}): {}\n",
        report.experiment,
        match report.problem {
            ProblemRecord::Builtin(n) => n.clone(),
            ProblemRecord::User(u) => u.name.clone(),
        },
        report.config.seed.unwrap_or_default(),
        if report.pass { "PASS" } else { "FAIL" }
    );
    for w in &report.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    for line in &outcome.summary {
        s.push_str(line);
        s.push('\n');
    }
    s
}
