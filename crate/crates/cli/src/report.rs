//! Report persistence: one JSON summary plus CSV tables per command, all
//! written by a single thread after the computation finished.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::{CliError, Command};

/// Result of a command before it is written to disk.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub statistics: Value,
    /// `(file name, contents)`.
    pub tables: Vec<(String, String)>,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    scenario: &'a str,
    pass: bool,
    statistics: &'a Value,
    config_echo: &'a ExperimentConfig,
    version: &'a str,
}

impl Outcome {
    pub fn summary_json(&self, command: Command, cfg: &ExperimentConfig) -> Result<String, CliError> {
        let s = Summary {
            command: command.name(),
            scenario: &cfg.scenario,
            pass: self.pass,
            statistics: &self.statistics,
            config_echo: cfg,
            version: env!("CARGO_PKG_VERSION"),
        };
        let mut text = serde_json::to_string_pretty(&s).map_err(|e| CliError::Runtime(format!("cannot encode report: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    /// Writes `<command>.json` and every table into `dir`.
    pub fn write(&self, dir: &Path, command: Command, cfg: &ExperimentConfig) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{}.json", command.name())), self.summary_json(command, cfg)?)?;
        for (name, body) in &self.tables {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

/// CSV text from a header and rows of already formatted cells.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Shortest round-tripping decimal form.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
