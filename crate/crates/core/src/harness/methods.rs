//! The registered forecasting methods behind one uniform fit-and-predict call.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    self, kalman_fit_predict, window_grid, GridSpec, StateSpaceConfig, DEFAULT_INIT_COV, DEFAULT_MIN_WINDOW,
    DEFAULT_STATE_RATIOS, DEFAULT_WEIGHT_CUTOFF, DEFAULT_WINDOW_COUNT,
};
use crate::bilevel::{self, OptimizerConfig, RestartTrace};
use crate::data::{dot, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::mse;
use crate::forgetting::{ForgettingParams, MechanismKind};
use crate::ridge::{HessianMode, RidgeSolution, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Stationary,
    Window,
    GridSearchExp,
    StateSpace,
    GradExp,
    GradMixedDecay,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Stationary,
        Method::Window,
        Method::GridSearchExp,
        Method::StateSpace,
        Method::GradExp,
        Method::GradMixedDecay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Stationary => "stationary",
            Method::Window => "window",
            Method::GridSearchExp => "grid_search_exp",
            Method::StateSpace => "state_space",
            Method::GradExp => "grad_exp",
            Method::GradMixedDecay => "grad_mixed_decay",
        }
    }

    /// Mechanism family whose weights the method produces, if any.
    pub fn mechanism(self) -> Option<MechanismKind> {
        match self {
            Method::GridSearchExp | Method::GradExp => Some(MechanismKind::Exponential),
            Method::GradMixedDecay => Some(MechanismKind::MixedDecay),
            _ => None,
        }
    }

    pub fn uses_ridge(self) -> bool {
        self != Method::StateSpace
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

/// Per-method knobs shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSettings {
    pub optimizer: OptimizerConfig,
    pub hessian_mode: HessianMode,
    pub window_count: usize,
    pub min_window: usize,
    /// Weight left at the window length by the grid-searched exponential decay.
    pub weight_cutoff: f64,
    pub state_ratios: Vec<f64>,
    pub state_init_cov: f64,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            hessian_mode: HessianMode::Exact,
            window_count: DEFAULT_WINDOW_COUNT,
            min_window: DEFAULT_MIN_WINDOW,
            weight_cutoff: DEFAULT_WEIGHT_CUTOFF,
            state_ratios: DEFAULT_STATE_RATIOS.to_vec(),
            state_init_cov: DEFAULT_INIT_COV,
        }
    }
}

impl MethodSettings {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.window_count == 0 || self.min_window == 0 {
            return Err(Error::Config("window_count and min_window must be at least 1".into()));
        }
        if !(self.weight_cutoff > 0.0 && self.weight_cutoff < 1.0) {
            return Err(Error::Config(format!("weight_cutoff {} must lie in (0, 1)", self.weight_cutoff)));
        }
        if self.state_ratios.is_empty() {
            return Err(Error::Config("state_ratios must be nonempty".into()));
        }
        for q in &self.state_ratios {
            StateSpaceConfig::new(1.0, *q, self.state_init_cov).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn state_space_grid(&self) -> Vec<StateSpaceConfig> {
        self.state_ratios
            .iter()
            .map(|q| StateSpaceConfig {
                obs_var: 1.0,
                state_var: *q,
                init_cov: self.state_init_cov,
            })
            .collect()
    }
}

/// Hyperparameters selected for one method fit.
#[derive(Debug, Clone)]
pub enum Selection {
    Stationary,
    Window(usize),
    Rate(f64),
    StateSpace(StateSpaceConfig),
    Learned {
        params: ForgettingParams,
        traces: Vec<RestartTrace>,
    },
}

impl Selection {
    /// Learned or selected forgetting parameters, for weight plots.
    pub fn forgetting(&self) -> Option<ForgettingParams> {
        match self {
            Selection::Rate(r) => ForgettingParams::exponential(*r).ok(),
            Selection::Learned { params, .. } => Some(params.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    /// Selected ridge penalty; `None` for methods without one.
    pub ridge_penalty: Option<f64>,
    pub valid_mse: f64,
    pub predictions: Vec<f64>,
    pub test_mse: f64,
    pub selection: Selection,
}

/// FNV-1a, stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of a method's randomized fits within a run.
pub fn method_seed(run_seed: u64, method: Method) -> u64 {
    run_seed ^ name_hash(method.name())
}

fn predict_test(dataset: &Dataset, split: &SplitSpec, model: &RidgeSolution) -> Vec<f64> {
    split.test().map(|t| dot(dataset.row(t), model.theta().as_slice())).collect()
}

/// Fit with one ridge penalty: returns the validation MSE that drives
/// selection, the refit model and the selected method hyperparameters.
fn fit_ridge_method(
    method: Method,
    dataset: &Dataset,
    split: &SplitSpec,
    solver: &SolverConfig,
    settings: &MethodSettings,
    seed: u64,
) -> Result<(f64, RidgeSolution, Selection)> {
    let windows = || window_grid(split.train_end(), settings.window_count, settings.min_window);
    match method {
        Method::Stationary => {
            let fit = baselines::fit_stationary(dataset, split, solver)?;
            Ok((fit.valid_mse, fit.model, Selection::Stationary))
        }
        Method::Window => {
            let fit = baselines::fit_window(dataset, split, solver, &windows()?)?;
            Ok((fit.valid_mse, fit.model, Selection::Window(fit.chosen)))
        }
        Method::GridSearchExp => {
            let fit = baselines::fit_grid_exp(dataset, split, solver, &windows()?, settings.weight_cutoff)?;
            Ok((fit.valid_mse, fit.model, Selection::Rate(fit.chosen)))
        }
        Method::GradExp | Method::GradMixedDecay => {
            let kind = method.mechanism().expect("gradient methods have a mechanism");
            let opt = OptimizerConfig {
                rng_seed: seed,
                ..settings.optimizer.clone()
            };
            let res = bilevel::fit(dataset, split, kind, solver, &opt)?;
            Ok((
                res.best_valid_loss / split.valid_len() as f64,
                res.final_model,
                Selection::Learned {
                    params: res.best_eta,
                    traces: res.restart_traces,
                },
            ))
        }
        Method::StateSpace => unreachable!("state-space model has no ridge penalty"),
    }
}

/// Select hyperparameters on the validation segment, refit and score the test segment.
///
/// Ridge penalties are searched in the order given; the lowest validation MSE
/// wins and ties keep the smaller penalty.
pub fn run_method(
    method: Method,
    dataset: &Dataset,
    split: &SplitSpec,
    settings: &MethodSettings,
    ridge_grid: &[f64],
    run_seed: u64,
) -> Result<MethodOutcome> {
    let labels: Vec<f64> = split.test().map(|t| dataset.label(t)).collect();
    if method == Method::StateSpace {
        let fit = kalman_fit_predict(dataset, split, &settings.state_space_grid())?;
        let test_mse = mse(&fit.predictions, &labels)?;
        return Ok(MethodOutcome {
            method,
            ridge_penalty: None,
            valid_mse: fit.valid_mse,
            predictions: fit.predictions,
            test_mse,
            selection: Selection::StateSpace(fit.config),
        });
    }
    let mut penalties = GridSpec::reals(ridge_grid.to_vec())
        .map_err(|_| Error::Config("ridge grid must be nonempty and finite".into()))?
        .values()
        .to_vec();
    penalties.sort_by(f64::total_cmp);
    let seed = method_seed(run_seed, method);
    let mut best: Option<(f64, f64, RidgeSolution, Selection)> = None;
    let mut last_err = None;
    for lambda in penalties {
        let solver = SolverConfig::new(lambda)?.with_hessian_mode(settings.hessian_mode);
        match fit_ridge_method(method, dataset, split, &solver, settings, seed) {
            Ok((v, model, sel)) if v.is_finite() => {
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, lambda, model, sel));
                }
            }
            Ok(_) => last_err = Some(Error::NonFinite("validation loss")),
            Err(e) => last_err = Some(e),
        }
    }
    let Some((valid_mse, lambda, model, selection)) = best else {
        return Err(last_err.unwrap_or(Error::Config("empty ridge grid".into())));
    };
    let predictions = predict_test(dataset, split, &model);
    let test_mse = mse(&predictions, &labels)?;
    Ok(MethodOutcome {
        method,
        ridge_penalty: Some(lambda),
        valid_mse,
        predictions,
        test_mse,
        selection,
    })
}
