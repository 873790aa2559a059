//! Test losses, the paired Wilcoxon signed-rank test and result tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest number of nonzero differences for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 20;
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Mean squared error.
pub fn mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "mse",
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidDataset("mse of an empty sequence".into()));
    }
    let sse: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(sse / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WilcoxonMethod {
    /// Exact for at most [`EXACT_MAX_N`] nonzero differences, normal approximation beyond.
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Rank sum of the positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of nonzero differences.
    pub n: usize,
    pub p_value: f64,
}

impl WilcoxonResult {
    pub fn statistic(&self) -> f64 {
        self.w_plus.min(self.w_minus)
    }
}

/// Midranks of `values` (1-based), ties sharing the average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired test of `a` against `b`, dropping zero differences.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "wilcoxon pairs",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidDataset("wilcoxon test needs at least one pair".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("wilcoxon differences"));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            n,
            p_value: 1.0,
        });
    }
    let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact {
        exact_p(&ranks, w_plus)
    } else {
        normal_p(&ranks, w_plus)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus: total - w_plus,
        n,
        p_value,
    })
}

/// Exact null distribution of the positive rank sum, counted over all sign
/// patterns. Midranks are multiples of 1/2, so doubled ranks index the table.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for (k, r) in doubled.iter().enumerate() {
        let reach: usize = doubled[..k].iter().sum();
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0.0 {
                counts[s + r] += c;
            }
        }
    }
    let patterns = 2f64.powi(ranks.len() as i32);
    let w = (2.0 * w_plus).round() as usize;
    let upper: f64 = counts[w..].iter().sum::<f64>() / patterns;
    let lower: f64 = counts[..=w].iter().sum::<f64>() / patterns;
    (2.0 * upper.min(lower)).min(1.0)
}

fn normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Test-segment MSE of one method on one run of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub dataset: String,
    pub run: u64,
    #[serde(rename = "mse")]
    pub test_mse: f64,
}

impl RunResult {
    pub fn new(method: impl Into<String>, dataset: impl Into<String>, run: u64, test_mse: f64) -> Result<Self> {
        if !(test_mse.is_finite() && test_mse >= 0.0) {
            return Err(Error::InvalidParameter(format!("test mse must be finite and nonnegative, got {test_mse}")));
        }
        Ok(Self {
            method: method.into(),
            dataset: dataset.into(),
            run,
            test_mse,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub mean: f64,
    pub runs: usize,
    /// Two-sided p-value against the column's best method; `None` for the best itself.
    pub p_value: Option<f64>,
    pub starred: bool,
    pub best: bool,
}

/// Mean test MSE per method (rows) and dataset (columns) with significance stars.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    /// `cells[m][d]`, `None` when the method was not run on the dataset.
    pub cells: Vec<Vec<Option<TableCell>>>,
    pub alpha: f64,
    pub notes: Vec<String>,
}

/// Assemble the result table. Methods and datasets keep their first-seen order.
pub fn build_table(results: &[RunResult], alpha: f64) -> Result<ExperimentTable> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("significance level {alpha} must lie in (0, 1)")));
    }
    let mut methods: Vec<String> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    let mut losses: BTreeMap<(usize, usize), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in results {
        if !(r.test_mse.is_finite() && r.test_mse >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "run {} of `{}` on `{}` has invalid mse {}",
                r.run, r.method, r.dataset, r.test_mse
            )));
        }
        let m = position_or_push(&mut methods, &r.method);
        let d = position_or_push(&mut datasets, &r.dataset);
        if losses.entry((m, d)).or_default().insert(r.run, r.test_mse).is_some() {
            return Err(Error::InvalidParameter(format!(
                "duplicate run {} of `{}` on `{}`",
                r.run, r.method, r.dataset
            )));
        }
    }

    let mut cells = vec![vec![None; datasets.len()]; methods.len()];
    for (d, dataset) in datasets.iter().enumerate() {
        let present: Vec<usize> = (0..methods.len()).filter(|m| losses.contains_key(&(*m, d))).collect();
        let reference: BTreeSet<u64> = losses[&(present[0], d)].keys().copied().collect();
        for m in &present[1..] {
            let ids: BTreeSet<u64> = losses[&(*m, d)].keys().copied().collect();
            if ids != reference {
                return Err(Error::Unpaired {
                    dataset: dataset.clone(),
                    runs: reference.symmetric_difference(&ids).copied().collect(),
                });
            }
        }
        let means: Vec<(usize, f64)> = present
            .iter()
            .map(|m| {
                let v = &losses[&(*m, d)];
                (*m, v.values().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let (best, best_mean) = means
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| methods[a.0].cmp(&methods[b.0])))
            .expect("dataset has at least one method");
        let best_losses: Vec<f64> = losses[&(best, d)].values().copied().collect();
        for (m, mean) in means {
            let cell = if m == best {
                TableCell {
                    mean,
                    runs: best_losses.len(),
                    p_value: None,
                    starred: false,
                    best: true,
                }
            } else {
                let mine: Vec<f64> = losses[&(m, d)].values().copied().collect();
                let p = wilcoxon_signed_rank(&mine, &best_losses)?.p_value;
                TableCell {
                    mean,
                    runs: mine.len(),
                    p_value: Some(p),
                    starred: p < alpha && mean > best_mean,
                    best: false,
                }
            };
            cells[m][d] = Some(cell);
        }
    }
    Ok(ExperimentTable {
        methods,
        datasets,
        cells,
        alpha,
        notes: Vec::new(),
    })
}

fn position_or_push(names: &mut Vec<String>, name: &str) -> usize {
    names.iter().position(|n| n == name).unwrap_or_else(|| {
        names.push(name.to_owned());
        names.len() - 1
    })
}

/// Three significant digits in scientific notation, e.g. `2.54e-3`.
pub fn format_sci(x: f64) -> String {
    format!("{x:.2e}")
}

impl ExperimentTable {
    pub fn cell(&self, method: &str, dataset: &str) -> Option<&TableCell> {
        let m = self.methods.iter().position(|n| n == method)?;
        let d = self.datasets.iter().position(|n| n == dataset)?;
        self.cells[m][d].as_ref()
    }

    pub fn best_method(&self, dataset: &str) -> Option<&str> {
        let d = self.datasets.iter().position(|n| n == dataset)?;
        (0..self.methods.len())
            .find(|m| self.cells[*m][d].as_ref().is_some_and(|c| c.best))
            .map(|m| self.methods[m].as_str())
    }

    /// Long-format CSV: one line per (method, dataset) cell.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "dataset", "mean_mse", "runs", "p_value", "starred", "best"])?;
        for (m, method) in self.methods.iter().enumerate() {
            for (d, dataset) in self.datasets.iter().enumerate() {
                if let Some(c) = &self.cells[m][d] {
                    w.write_record([
                        method.as_str(),
                        dataset.as_str(),
                        &format!("{:.16e}", c.mean),
                        &c.runs.to_string(),
                        &c.p_value.map(|p| format!("{p:.6e}")).unwrap_or_default(),
                        if c.starred { "true" } else { "false" },
                        if c.best { "true" } else { "false" },
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned plain-text grid. The best method of each column is bracketed and
    /// methods significantly worse than it carry a star.
    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("method".to_owned()).chain(self.datasets.iter().cloned()).collect()];
        for (m, method) in self.methods.iter().enumerate() {
            let mut row = vec![method.clone()];
            for c in &self.cells[m] {
                row.push(match c {
                    None => "-".to_owned(),
                    Some(c) if c.best => format!("[{}]", format_sci(c.mean)),
                    Some(c) => format!("{}{}", format_sci(c.mean), if c.starred { "*" } else { "" }),
                });
            }
            grid.push(row);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, w))| if j == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        let _ = writeln!(
            s,
            "[x] lowest mean MSE; * significantly larger than the best at the {} level (paired Wilcoxon signed-rank)",
            self.alpha
        );
        for note in &self.notes {
            let _ = writeln!(s, "note: {note}");
        }
        s
    }
}

/// Write per-run losses in long format with 17 significant digits.
pub fn write_runs_csv<W: io::Write>(results: &[RunResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "dataset", "run", "mse"])?;
    for r in results {
        w.write_record([r.method.as_str(), r.dataset.as_str(), &r.run.to_string(), &format!("{:.16e}", r.test_mse)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunResult>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<RunResult>().enumerate() {
        let r = rec.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?;
        out.push(RunResult::new(r.method, r.dataset, r.run, r.test_mse).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
