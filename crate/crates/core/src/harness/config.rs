//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::methods::{Method, MethodSettings};
use crate::synthgen::{DgpKind, DEFAULT_LENGTH, DEFAULT_NOISE_SD};

pub const DEFAULT_RIDGE_GRID: [f64; 5] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3];

/// Share of failed runs per dataset above which an experiment aborts.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_ridge_grid")]
    pub ridge_grid: Vec<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    /// Worker threads; `None` uses every available core. `FORGECAST_THREADS` caps it.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub settings: MethodSettings,
    #[serde(default)]
    pub artifacts: ArtifactConfig,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub real: Option<RealSpec>,
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_ridge_grid() -> Vec<f64> {
    DEFAULT_RIDGE_GRID.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("forgecast-out")
}

fn default_alpha() -> f64 {
    0.05
}

/// Which per-run artifacts to write. Only runs with id below `max_runs` get them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactConfig {
    pub traces: bool,
    pub plotdata: bool,
    pub max_runs: u64,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        Self {
            traces: true,
            plotdata: true,
            max_runs: 5,
        }
    }
}

/// Monte Carlo experiment on generated series. Split boundaries are raw
/// series indices: samples whose label index is at most `train_end` train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kinds: Vec<DgpKind>,
    pub runs: u64,
    pub length: usize,
    pub noise_sd: f64,
    pub train_end: usize,
    pub valid_len: usize,
    pub test_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kinds: DgpKind::ALL.to_vec(),
            runs: 192,
            length: DEFAULT_LENGTH,
            noise_sd: DEFAULT_NOISE_SD,
            train_end: 2875,
            valid_len: 100,
            test_len: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealTask {
    /// Absolute returns on lagged absolute returns.
    LagVolatility,
    /// Raw values on lagged raw values.
    RawLags,
    /// Excess returns on an intercept and three factors.
    Factor,
}

impl RealTask {
    fn default_name(self) -> &'static str {
        match self {
            RealTask::LagVolatility => "vol",
            RealTask::RawLags => "lags",
            RealTask::Factor => "factor",
        }
    }
}

/// Walk-forward evaluation in supervised-sample units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandingCvSpec {
    pub initial_train: usize,
    pub valid_len: usize,
    pub test_len: usize,
    pub step: usize,
}

impl Default for ExpandingCvSpec {
    fn default() -> Self {
        Self {
            initial_train: 252 * 6,
            valid_len: 150,
            test_len: 150,
            step: 150,
        }
    }
}

impl ExpandingCvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.initial_train == 0 || self.valid_len == 0 || self.test_len == 0 || self.step == 0 {
            return Err(Error::Config("expanding cv lengths must all be at least 1".into()));
        }
        Ok(())
    }

    pub fn min_len(&self) -> usize {
        self.initial_train + self.valid_len + self.test_len
    }

    /// Training ends of every fold that fits in `len` samples.
    pub fn fold_train_ends(&self, len: usize) -> Vec<usize> {
        let mut ends = Vec::new();
        let mut k = self.initial_train;
        while k + self.valid_len + self.test_len <= len {
            ends.push(k);
            k += self.step;
        }
        ends
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealSpec {
    pub path: PathBuf,
    #[serde(default = "default_date_column")]
    pub date_column: String,
    #[serde(default = "default_date_format")]
    pub date_format: String,
    /// Columns holding the target series.
    pub series: Vec<String>,
    pub task: RealTask,
    #[serde(default = "default_lags")]
    pub lags: usize,
    /// Market, size and value factor columns for the factor task.
    #[serde(default)]
    pub factor_columns: Option<[String; 3]>,
    #[serde(default)]
    pub rf_column: Option<String>,
    /// Column label in result tables; defaults to the task name.
    #[serde(default)]
    pub dataset_name: Option<String>,
    #[serde(default)]
    pub cv: ExpandingCvSpec,
}

fn default_date_column() -> String {
    "date".into()
}

fn default_date_format() -> String {
    "%Y-%m-%d".into()
}

fn default_lags() -> usize {
    5
}

impl RealSpec {
    pub fn dataset_name(&self) -> &str {
        self.dataset_name.as_deref().unwrap_or(self.task.default_name())
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `real.path` resolves against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(real), Some(dir)) = (cfg.real.as_mut(), path.parent()) {
            if real.path.is_relative() {
                real.path = dir.join(&real.path);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("methods must not repeat".into()));
        }
        if self.ridge_grid.is_empty() || self.ridge_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("ridge_grid must be nonempty, finite and nonnegative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.settings.validate()?;
        match self.kind {
            ExperimentKind::Synthetic => {
                let s = self
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::Config("synthetic experiments need a [synthetic] section".into()))?;
                if s.kinds.is_empty() || s.runs == 0 {
                    return Err(Error::Config("synthetic section needs at least one kind and one run".into()));
                }
                if s.valid_len == 0 || s.test_len == 0 || s.train_end <= crate::synthgen::AR_LAGS {
                    return Err(Error::Config("synthetic split lengths must be positive".into()));
                }
                if s.train_end + s.valid_len + s.test_len > s.length {
                    return Err(Error::Config(format!(
                        "split {}+{}+{} exceeds series length {}",
                        s.train_end, s.valid_len, s.test_len, s.length
                    )));
                }
            }
            ExperimentKind::Real => {
                let r = self
                    .real
                    .as_ref()
                    .ok_or_else(|| Error::Config("real experiments need a [real] section".into()))?;
                if r.series.is_empty() {
                    return Err(Error::Config("real section needs at least one series column".into()));
                }
                if r.task != RealTask::Factor && r.lags == 0 {
                    return Err(Error::Config("lags must be at least 1".into()));
                }
                if r.task == RealTask::Factor && (r.factor_columns.is_none() || r.rf_column.is_none()) {
                    return Err(Error::Config("the factor task needs factor_columns and rf_column".into()));
                }
                r.cv.validate()?;
            }
        }
        Ok(())
    }

    /// Worker count after applying `FORGECAST_THREADS`.
    pub fn effective_threads(&self) -> Result<usize> {
        let cap = match std::env::var("FORGECAST_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|n| *n > 0)
                    .ok_or_else(|| Error::Config(format!("FORGECAST_THREADS must be a positive integer, got `{v}`")))?,
            ),
            Err(_) => None,
        };
        let base = self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Ok(cap.map_or(base, |c| base.min(c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_synthetic_config() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            kind = "synthetic"
            methods = ["stationary"]
            [synthetic]
            kinds = ["stat"]
            runs = 1
            "#,
        )
        .unwrap();
        assert_eq!(cfg.methods, vec![Method::Stationary]);
        assert_eq!(cfg.ridge_grid, DEFAULT_RIDGE_GRID.to_vec());
        let s = cfg.synthetic.unwrap();
        assert_eq!((s.length, s.train_end, s.valid_len, s.test_len), (3000, 2875, 100, 25));
        assert_eq!(cfg.settings.optimizer.restarts, 5);
    }

    #[test]
    fn nested_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            kind = "real"
            ridge_grid = [0.0]
            [settings]
            window_count = 10
            [settings.optimizer]
            epochs = 3
            [real]
            path = "r.csv"
            series = ["a"]
            task = "lag_volatility"
            [real.cv]
            initial_train = 100
            "#,
        )
        .unwrap();
        assert_eq!(cfg.settings.optimizer.epochs, 3);
        assert_eq!(cfg.settings.window_count, 10);
        let r = cfg.real.unwrap();
        assert_eq!(r.cv.initial_train, 100);
        assert_eq!(r.cv.valid_len, 150);
        assert_eq!(r.dataset_name(), "vol");
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "kind = \"synthetic\"",
            "kind = \"synthetic\"\nmethods = [\"arima\"]\n[synthetic]",
            "kind = \"synthetic\"\nmethods = []\n[synthetic]",
            "kind = \"synthetic\"\nridge_grid = [-1.0]\n[synthetic]",
            "kind = \"synthetic\"\n[synthetic]\nruns = 0",
            "kind = \"synthetic\"\n[synthetic]\nlength = 100",
            "kind = \"synthetic\"\nbogus = 1\n[synthetic]",
            "kind = \"real\"\n[real]\npath = \"x\"\nseries = [\"a\"]\ntask = \"factor\"",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn fold_arithmetic() {
        let cv = ExpandingCvSpec::default();
        assert_eq!(cv.fold_train_ends(1512 + 300), vec![1512]);
        assert_eq!(cv.fold_train_ends(1512 + 450), vec![1512, 1662]);
        assert!(cv.fold_train_ends(1511 + 300).is_empty());
    }
}
