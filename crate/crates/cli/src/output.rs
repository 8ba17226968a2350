//! Run reports and CSV tables. Output depends only on the inputs and the seed.

use crate::error::CliError;
use anyhow::Context;
use dsol::grid::Lattice;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Accumulates declared checks and results for one subcommand run.
pub struct Run {
    pub out: PathBuf,
    command: String,
    seed: u64,
    config: Value,
    grid: Option<Value>,
    checks: Vec<CheckLine>,
    results: serde_json::Map<String, Value>,
    artifacts: Vec<String>,
}

impl Run {
    pub fn new(out: PathBuf, command: &str, seed: u64, config: &impl Serialize) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            out,
            command: command.into(),
            seed,
            config: serde_json::to_value(config).map_err(anyhow::Error::from)?,
            grid: None,
            checks: Vec::new(),
            results: serde_json::Map::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn grid(&mut self, lattice: &Lattice) {
        self.grid = Some(json!({
            "dims": (0..lattice.dim()).map(|k| lattice.multi_index(lattice.len() - 1)[k] + 1).collect::<Vec<_>>(),
            "spacing": [lattice.min_spacing(), lattice.max_spacing()],
            "nodes": lattice.len(),
            "masked_in": (0..lattice.len()).filter(|&k| lattice.in_mask(k)).count(),
        }));
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(CheckLine { name: name.into(), pass, detail: detail.into() });
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) -> Result<(), CliError> {
        self.results.insert(key.into(), serde_json::to_value(value).map_err(anyhow::Error::from)?);
        Ok(())
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.into());
        self.out.join(name)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.path(name);
        write_csv(&path, header, rows)
    }

    /// Writes `report.json`; fails with the first failing check.
    pub fn finish(mut self) -> Result<(), CliError> {
        self.artifacts.sort();
        let pass = self.checks.iter().all(|c| c.pass);
        let report = json!({
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "grid": self.grid,
            "checks": self.checks,
            "pass": pass,
            "results": self.results,
            "artifacts": self.artifacts,
        });
        let path = self.out.join("report.json");
        let text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        match self.checks.iter().find(|c| !c.pass) {
            Some(c) => Err(CliError::CheckFailed(format!("{}: {}", c.name, c.detail))),
            None => Ok(()),
        }
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header).map_err(anyhow::Error::from)?;
    for r in rows {
        w.write_record(r).map_err(anyhow::Error::from)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

/// Shortest round-trip formatting; empty for missing values.
pub fn num(v: f64) -> String {
    // fold -0 into 0
    format!("{}", v + 0.0)
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &["a", "b"], &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n");
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(-0.0), "0");
        assert_eq!(opt(None), "");
    }
}
