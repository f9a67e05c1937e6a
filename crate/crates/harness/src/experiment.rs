//! Experiment files: a model, a task, and a sweep over one task variable.
//!
//! ```toml
//! model = "toybiped"
//! task = "../tasks/squat.toml"   # relative to this file
//! output = "squat-depth.csv"     # optional, relative to this file
//! seed = 0
//!
//! [sweep]
//! variable = "squat.relative_elevation"
//! values = [0.86, 0.83, 0.8]
//! continuation = false
//! ```

use std::path::{Path, PathBuf};

use kinloop::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variable: String,
    pub values: Vec<f64>,
    /// Warm-start each point from the previous one and run them in order.
    #[serde(default)]
    pub continuation: bool,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Bundled model name or path.
    pub model: String,
    pub task: PathBuf,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Seed of randomized steps; sweeps themselves are deterministic.
    #[serde(default)]
    pub seed: u64,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Parse { line: 0, message: e.message().to_string() })?;
        c.validate()?;
        Ok(c)
    }

    /// Load a file; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse { line: 0, message: format!("{}: {e}", path.display()) })?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        c.task = resolve(&c.task);
        c.output = c.output.as_deref().map(resolve);
        let local_model = base.join(&c.model);
        if local_model.is_file() {
            c.model = local_model.to_string_lossy().into_owned();
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.values.is_empty() {
            return Err(Error::InvalidTask("empty sweep range".into()));
        }
        if let Some(v) = self.sweep.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidTask(format!("non-finite sweep value {v}")));
        }
        Ok(())
    }
}

/// Parse `variable=v1,v2,...`.
pub fn parse_sweep(spec: &str) -> Result<SweepConfig> {
    let bad = || Error::InvalidTask(format!("sweep `{spec}` is not of the form variable=v1,v2,..."));
    let (var, vals) = spec.split_once('=').ok_or_else(bad)?;
    let values: Vec<f64> = vals
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if var.trim().is_empty() || values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(SweepConfig { variable: var.trim().to_string(), values, continuation: false })
}

/// Parse `start:stop:count` into `count` evenly spaced values.
pub fn parse_range(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidTask(format!("range `{spec}` is not of the form start:stop:count"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
}
