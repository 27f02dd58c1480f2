//! Helpers for the acceptance suite: in-process command runs, report
//! snapshots and resized copies of the shipped configurations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use measureflow::{Args, Command, ExperimentConfig, EXIT_FAIL, EXIT_PASS};
use serde_json::Value;

/// Directory of the shipped example configurations.
pub fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Runs `command` exactly as the binary would and returns the exit code with
/// the parsed JSON summary (`Null` when none was written).
pub fn run(command: Command, config: &Path, out: &Path, threads: Option<usize>) -> (i32, Value) {
    let args = Args {
        command,
        config: config.to_path_buf(),
        seed: None,
        out: Some(out.to_path_buf()),
        threads,
    };
    let code = match measureflow::execute(&args) {
        Ok(done) if done.pass => EXIT_PASS,
        Ok(_) => EXIT_FAIL,
        Err(e) => e.exit_code(),
    };
    let summary = fs::read(out.join(format!("{}.json", command.name())))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or(Value::Null);
    (code, summary)
}

/// Every file in `dir` by name.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return BTreeMap::new();
    };
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| Some((e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).ok()?)))
        .collect()
}

/// A shipped configuration with a different simulation size, written to `dir`.
pub fn resized(dir: &Path, file: &str, steps: usize, particles: usize, replications: u32) -> PathBuf {
    let mut cfg = ExperimentConfig::read(&configs().join(file)).expect("shipped configuration parses");
    cfg.grid.steps = steps;
    cfg.ensemble.particles = particles;
    cfg.ensemble.replications = replications;
    let path = dir.join(format!("resized_{file}"));
    fs::write(&path, cfg.to_toml().expect("configuration serializes")).expect("temporary directory is writable");
    path
}

/// `Δ^½ + N^-½` on the unit horizon.
pub fn error_scale(steps: usize, particles: usize) -> f64 {
    (1.0 / steps as f64).sqrt() + 1.0 / (particles as f64).sqrt()
}

/// Number at a JSON path, `NaN` when absent.
pub fn number(v: &Value, path: &[&str]) -> f64 {
    path.iter().fold(v, |v, k| &v[*k]).as_f64().unwrap_or(f64::NAN)
}
