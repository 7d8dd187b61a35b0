//! Report and artifact emission with a byte-stable layout.

use serde::Serialize;
use std::path::{Path, PathBuf};

use crate::commands::CliError;
use crate::config::ExperimentConfig;

/// Schema tag written into every report.
pub const SCHEMA: &str = "ivmqr-report/1";

/// Run verdict; maps onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    ConditionFailed,
    /// A negative control failed in exactly the advertised way.
    ExpectedFailure,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::ConditionFailed => 2,
            Status::Pass | Status::ExpectedFailure => 0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::ConditionFailed => "condition-failed",
            Status::ExpectedFailure => "expected-failure",
        }
    }
}

/// Everything a rerun needs: the verdict, the fully resolved config (defaults
/// included), the seed, the subcommand result, and the artifact list.
#[derive(Serialize)]
pub struct Report<'a> {
    pub schema: &'static str,
    pub subcommand: &'static str,
    pub status: Status,
    pub seed: u64,
    pub config: &'a ExperimentConfig,
    pub result: serde_json::Value,
    pub artifacts: Vec<String>,
}

pub fn write_report(dir: &Path, report: &Report) -> Result<PathBuf, CliError> {
    let path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Writes one CSV artifact and returns its name for the artifact list.
pub fn write_csv(
    dir: &Path,
    name: &str,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> Result<String, CliError> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(dir.join(name), text)?;
    Ok(name.to_string())
}
