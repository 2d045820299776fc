//! Report assembly and output files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::certificates::Check;
use crate::error::{Error, Result};

/// A sub-test that was not run, with a machine-readable reason code.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skip {
    pub name: String,
    pub reason: String,
    pub detail: String,
}

/// A construction or solve that failed inside an experiment that reports failures as entries.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub name: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub kind: String,
    pub schema_version: u32,
    pub input_hash: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub failures: Vec<Failure>,
    pub skipped: Vec<Skip>,
    pub results: Value,
    pub config: ExperimentConfig,
}

impl Report {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Collects checks, skips, failures and plot rows while an experiment runs.
#[derive(Debug, Default)]
pub struct Recorder {
    pub checks: Vec<Check>,
    pub failures: Vec<Failure>,
    pub skipped: Vec<Skip>,
    pub plot: Vec<(String, f64, f64)>,
}

impl Recorder {
    pub fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    /// A boolean condition as a check with value 1 (held) or 0.
    pub fn holds(&mut self, name: &str, ok: bool) {
        self.checks
            .push(Check::at_least(name, if ok { 1.0 } else { 0.0 }, 1.0));
    }

    pub fn skip(&mut self, name: &str, reason: &str, detail: impl Into<String>) {
        self.skipped.push(Skip {
            name: name.into(),
            reason: reason.into(),
            detail: detail.into(),
        });
    }

    pub fn fail(&mut self, name: &str, err: &Error) {
        self.failures.push(Failure {
            name: name.into(),
            message: err.to_string(),
        });
    }

    pub fn series(&mut self, name: &str, points: impl IntoIterator<Item = (f64, f64)>) {
        self.plot
            .extend(points.into_iter().map(|(x, y)| (name.to_string(), x, y)));
    }

    pub fn finish(
        self,
        kind: &str,
        cfg: &ExperimentConfig,
        input_hash: String,
        results: Value,
    ) -> (Report, Vec<(String, f64, f64)>) {
        let passed = self.failures.is_empty() && self.checks.iter().all(|c| c.passed);
        let report = Report {
            kind: kind.into(),
            schema_version: cfg.schema_version,
            input_hash,
            passed,
            checks: self.checks,
            failures: self.failures,
            skipped: self.skipped,
            results,
            config: cfg.clone(),
        };
        (report, self.plot)
    }
}

/// Git-style content hash: SHA-256 of `blob <len>\0<content>`.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the resolved config plus any level-set file it references.
pub fn input_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut bytes = cfg.to_toml()?.into_bytes();
    if let Some(path) = cfg.problem.domain.strip_prefix("implicit:") {
        let path = Path::new(path.trim());
        bytes.extend(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(content_hash(&bytes))
}

/// Output directory handle.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn write_rows(&self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let p = self.path(name);
        let io = |e: csv::Error| Error::io(&p, e.into());
        let mut w = csv::Writer::from_path(&p).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r.iter().map(|v| v.to_string()))
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }

    pub fn write_plot(&self, rows: &[(String, f64, f64)]) -> Result<()> {
        let p = self.path("plot.csv");
        let io = |e: csv::Error| Error::io(&p, e.into());
        let mut w = csv::Writer::from_path(&p).map_err(io)?;
        w.write_record(["series", "x", "y"]).map_err(io)?;
        for (s, x, y) in rows {
            w.write_record([s.clone(), x.to_string(), y.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }

    pub fn write_report(&self, report: &Report) -> Result<()> {
        self.write_text("report.json", &report.to_json()?)?;
        self.write_text("config.resolved.toml", &report.config.to_toml()?)
    }
}
