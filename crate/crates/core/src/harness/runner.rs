//! Experiment execution: synthetic Monte Carlo runs and expanding-window
//! cross validation on ingested series.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{make_split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{build_table, write_runs_csv, ExperimentTable, RunResult};
use crate::forgetting::weight;
use crate::harness::config::{ExperimentConfig, ExperimentKind, RealSpec, RealTask, SyntheticSpec, MAX_FAILURE_SHARE};
use crate::harness::features::{build_factor_dataset, build_lag_features, DatedSeries, LagTransform};
use crate::harness::ingest::{align_common_start, load_returns_csv, CsvSchema};
use crate::harness::methods::{run_method, Method, MethodOutcome, Selection};
use crate::synthgen::{generate, to_supervised, DgpConfig, AR_LAGS};

/// Note attached to tables built from several real series.
pub const CORRELATED_SERIES_NOTE: &str =
    "runs from different series share calendar dates and may be correlated; significance stars treat them as independent pairs";

/// One (dataset, run) evaluation of every configured method.
#[derive(Debug, Clone)]
pub struct UnitRecord {
    pub dataset: String,
    pub run: u64,
    pub seed: u64,
    pub split: SplitSpec,
    /// Series label and fold index for cross-validation runs.
    pub origin: Option<(String, usize)>,
    /// One entry per configured method, in config order.
    pub outcomes: Vec<(Method, std::result::Result<MethodOutcome, String>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub dataset: String,
    pub run: u64,
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub units: Vec<UnitRecord>,
    /// Test MSEs of every run that succeeded for all methods.
    pub results: Vec<RunResult>,
    pub failures: Vec<FailureRecord>,
    pub table: ExperimentTable,
    pub warnings: Vec<String>,
}

struct UnitSpec<'a> {
    dataset: String,
    run: u64,
    seed: u64,
    origin: Option<(String, usize)>,
    source: UnitSource<'a>,
    split: SplitSpec,
}

enum UnitSource<'a> {
    Generated(DgpConfig),
    Shared(&'a Dataset),
}

fn thread_pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_threads()?)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn evaluate_unit(cfg: &ExperimentConfig, spec: &UnitSpec) -> Result<UnitRecord> {
    let generated;
    let dataset = match &spec.source {
        UnitSource::Generated(dgp) => {
            generated = to_supervised(&generate(dgp, spec.seed)?.values)?;
            &generated
        }
        UnitSource::Shared(ds) => *ds,
    };
    let outcomes = cfg
        .methods
        .iter()
        .map(|m| {
            let out = run_method(*m, dataset, &spec.split, &cfg.settings, &cfg.ridge_grid, spec.seed)
                .map_err(|e| e.to_string());
            (*m, out)
        })
        .collect();
    Ok(UnitRecord {
        dataset: spec.dataset.clone(),
        run: spec.run,
        seed: spec.seed,
        split: spec.split,
        origin: spec.origin.clone(),
        outcomes,
    })
}

fn execute(cfg: &ExperimentConfig, specs: Vec<UnitSpec>, notes: Vec<String>) -> Result<Experiment> {
    let pool = thread_pool(cfg)?;
    let units: Vec<UnitRecord> = pool.install(|| specs.par_iter().map(|s| evaluate_unit(cfg, s)).collect::<Result<_>>())?;

    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    let mut excluded: BTreeSet<(String, u64)> = BTreeSet::new();
    for u in &units {
        for (m, out) in &u.outcomes {
            if let Err(message) = out {
                failures.push(FailureRecord {
                    dataset: u.dataset.clone(),
                    run: u.run,
                    method: *m,
                    message: message.clone(),
                });
                excluded.insert((u.dataset.clone(), u.run));
            }
        }
    }
    let mut datasets: Vec<&str> = Vec::new();
    for u in &units {
        if !datasets.contains(&u.dataset.as_str()) {
            datasets.push(&u.dataset);
        }
    }
    for d in &datasets {
        let total = units.iter().filter(|u| u.dataset == *d).count();
        let failed = excluded.iter().filter(|(ds, _)| ds == d).count();
        if failed > 0 {
            warnings.push(format!(
                "WARNING: {failed} of {total} runs on `{d}` had a method failure and were excluded for every method"
            ));
        }
        if failed as f64 > MAX_FAILURE_SHARE * total as f64 {
            return Err(Error::TooManyFailures { failed, total });
        }
    }

    let mut results = Vec::new();
    for u in units.iter().filter(|u| !excluded.contains(&(u.dataset.clone(), u.run))) {
        for (m, out) in &u.outcomes {
            let out = out.as_ref().expect("excluded runs hold every failure");
            results.push(RunResult::new(m.name(), u.dataset.clone(), u.run, out.test_mse)?);
        }
    }
    if results.is_empty() {
        return Err(Error::TooManyFailures {
            failed: excluded.len(),
            total: units.len(),
        });
    }
    let mut table = build_table(&results, cfg.alpha)?;
    table.notes = notes;
    Ok(Experiment {
        config: cfg.clone(),
        units,
        results,
        failures,
        table,
        warnings,
    })
}

/// Supervised split for raw-series split boundaries.
pub fn synthetic_split(spec: &SyntheticSpec) -> Result<SplitSpec> {
    let total = spec.length - AR_LAGS;
    make_split(total, spec.train_end - AR_LAGS, spec.valid_len, spec.test_len)
}

/// Monte Carlo evaluation of every method on every generated series.
pub fn run_synthetic(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::Synthetic {
        return Err(Error::Config("not a synthetic experiment".into()));
    }
    let spec = cfg.synthetic.as_ref().expect("validated");
    let split = synthetic_split(spec)?;
    let mut units = Vec::new();
    for kind in &spec.kinds {
        let dgp = DgpConfig {
            kind: *kind,
            length: spec.length,
            noise_sd: spec.noise_sd,
        };
        dgp.validate()?;
        for run in 0..spec.runs {
            units.push(UnitSpec {
                dataset: kind.name().to_owned(),
                run,
                seed: cfg.base_seed.wrapping_add(run),
                origin: None,
                source: UnitSource::Generated(dgp),
                split,
            });
        }
    }
    execute(cfg, units, Vec::new())
}

/// Supervised datasets of a real-data config, one per target series.
pub fn real_datasets(spec: &RealSpec) -> Result<Vec<(String, Dataset)>> {
    let mut columns = spec.series.clone();
    if spec.task == RealTask::Factor {
        let f = spec.factor_columns.as_ref().expect("validated");
        columns.extend(f.iter().cloned());
        columns.push(spec.rf_column.clone().expect("validated"));
    }
    let schema = CsvSchema {
        date_column: spec.date_column.clone(),
        date_format: spec.date_format.clone(),
        columns,
    };
    let loaded = load_returns_csv(&spec.path, &schema)?;
    let n = spec.series.len();
    match spec.task {
        RealTask::LagVolatility | RealTask::RawLags => {
            let transform = if spec.task == RealTask::LagVolatility {
                LagTransform::Absolute
            } else {
                LagTransform::Identity
            };
            loaded
                .into_iter()
                .map(|s| Ok((s.name.clone(), build_lag_features(&s.values, spec.lags, transform)?)))
                .collect()
        }
        RealTask::Factor => {
            let aligned: Vec<DatedSeries> = align_common_start(&loaded);
            let (targets, rest) = aligned.split_at(n);
            targets
                .iter()
                .map(|s| Ok((s.name.clone(), build_factor_dataset(s, [&rest[0], &rest[1], &rest[2]], &rest[3])?)))
                .collect()
        }
    }
}

/// Expanding-window walk-forward evaluation. Runs are numbered series-major
/// over (series, fold) and seeded `base_seed + run`.
pub fn run_expanding_cv(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::Real {
        return Err(Error::Config("not a real-data experiment".into()));
    }
    let spec = cfg.real.as_ref().expect("validated");
    let datasets = real_datasets(spec)?;
    for (name, ds) in &datasets {
        if ds.len() < spec.cv.min_len() {
            return Err(Error::InvalidDataset(format!(
                "series `{name}` yields {} samples but one fold needs at least {}",
                ds.len(),
                spec.cv.min_len()
            )));
        }
    }
    let mut units = Vec::new();
    let mut run = 0u64;
    for (name, ds) in &datasets {
        for (fold, train_end) in spec.cv.fold_train_ends(ds.len()).into_iter().enumerate() {
            let split = make_split(ds.len(), train_end, spec.cv.valid_len, spec.cv.test_len)?;
            units.push(UnitSpec {
                dataset: spec.dataset_name().to_owned(),
                run,
                seed: cfg.base_seed.wrapping_add(run),
                origin: Some((name.clone(), fold)),
                source: UnitSource::Shared(ds),
                split,
            });
            run += 1;
        }
    }
    let notes = if datasets.len() > 1 {
        vec![CORRELATED_SERIES_NOTE.to_owned()]
    } else {
        Vec::new()
    };
    execute(cfg, units, notes)
}

/// Run the configured experiment and write its artifacts to the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    let exp = match cfg.kind {
        ExperimentKind::Synthetic => run_synthetic(cfg)?,
        ExperimentKind::Real => run_expanding_cv(cfg)?,
    };
    exp.write_artifacts(&cfg.output_dir)?;
    Ok(exp)
}

fn selection_label(sel: &Selection) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(";");
    match sel {
        Selection::Stationary => String::new(),
        Selection::Window(w) => format!("window={w}"),
        Selection::Rate(r) => format!("eta={r:.16e}"),
        Selection::StateSpace(c) => format!("state_var={:.16e};obs_var={:.16e}", c.state_var, c.obs_var),
        Selection::Learned { params, .. } => format!("eta={}", join(params.eta())),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

impl Experiment {
    pub fn outcome(&self, dataset: &str, run: u64, method: Method) -> Option<&MethodOutcome> {
        let u = self.units.iter().find(|u| u.dataset == dataset && u.run == run)?;
        u.outcomes.iter().find(|(m, _)| *m == method)?.1.as_ref().ok()
    }

    /// `table.csv`, `table.txt`, `runs.csv`, `selections.csv`, `failures.csv`,
    /// plus traces and weight curves for the first runs of each dataset.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.table.write_csv(create(&dir.join("table.csv"))?)?;
        let mut txt = create(&dir.join("table.txt"))?;
        txt.write_all(self.table.to_text().as_bytes())?;
        for w in &self.warnings {
            writeln!(txt, "{w}")?;
        }
        txt.flush()?;
        write_runs_csv(&self.results, create(&dir.join("runs.csv"))?)?;

        let mut sel = csv::Writer::from_writer(create(&dir.join("selections.csv"))?);
        sel.write_record(["dataset", "run", "method", "ridge_penalty", "valid_mse", "test_mse", "selection"])?;
        for u in &self.units {
            for (m, out) in &u.outcomes {
                if let Ok(o) = out {
                    sel.write_record([
                        u.dataset.as_str(),
                        &u.run.to_string(),
                        m.name(),
                        &o.ridge_penalty.map(|l| format!("{l:.16e}")).unwrap_or_default(),
                        &format!("{:.16e}", o.valid_mse),
                        &format!("{:.16e}", o.test_mse),
                        &selection_label(&o.selection),
                    ])?;
                }
            }
        }
        sel.flush()?;

        let mut fail = csv::Writer::from_writer(create(&dir.join("failures.csv"))?);
        fail.write_record(["dataset", "run", "method", "message"])?;
        for f in &self.failures {
            fail.write_record([f.dataset.as_str(), &f.run.to_string(), f.method.name(), &f.message])?;
        }
        fail.flush()?;

        if self.units.iter().any(|u| u.origin.is_some()) {
            let mut folds = csv::Writer::from_writer(create(&dir.join("folds.csv"))?);
            folds.write_record(["dataset", "run", "series", "fold", "train_end", "valid_end", "test_end"])?;
            for u in &self.units {
                let (series, fold) = u.origin.clone().expect("cross-validation units carry their origin");
                folds.write_record([
                    u.dataset.clone(),
                    u.run.to_string(),
                    series,
                    fold.to_string(),
                    u.split.train_end().to_string(),
                    u.split.valid_end().to_string(),
                    u.split.test_end().to_string(),
                ])?;
            }
            folds.flush()?;
        }

        let art = &self.config.artifacts;
        for u in self.units.iter().filter(|u| u.run < art.max_runs) {
            for (m, out) in &u.outcomes {
                let Ok(o) = out else { continue };
                if art.traces {
                    if let Selection::Learned { traces, params } = &o.selection {
                        let path = dir.join("traces").join(&u.dataset).join(format!("{}_{}.csv", m.name(), u.run));
                        let mut w = csv::Writer::from_writer(create(&path)?);
                        let mut header = vec!["restart".to_owned(), "epoch".to_owned(), "valid_loss".to_owned()];
                        header.extend((1..=params.dim()).map(|i| format!("eta_{i}")));
                        w.write_record(&header)?;
                        for tr in traces {
                            for (epoch, (loss, eta)) in tr.losses.iter().zip(&tr.etas).enumerate() {
                                let mut row = vec![tr.restart.to_string(), (epoch + 1).to_string(), format!("{loss:.16e}")];
                                row.extend(eta.iter().map(|e| format!("{e:.16e}")));
                                w.write_record(&row)?;
                            }
                        }
                        w.flush()?;
                    }
                }
                if art.plotdata && m.uses_ridge() {
                    let path = dir
                        .join("plotdata")
                        .join(&u.dataset)
                        .join(format!("weights_{}_{}.csv", m.name(), u.run));
                    let mut w = csv::Writer::from_writer(create(&path)?);
                    w.write_record(["age", "weight"])?;
                    let forgetting = o.selection.forgetting();
                    for age in 0..u.split.train_end() as u64 {
                        let value = match (&o.selection, &forgetting) {
                            (Selection::Window(win), _) => f64::from(u8::from(age < *win as u64)),
                            (_, Some(p)) => weight(p, age),
                            _ => 1.0,
                        };
                        w.write_record([age.to_string(), format!("{value:.16e}")])?;
                    }
                    w.flush()?;
                }
            }
        }
        Ok(())
    }
}
