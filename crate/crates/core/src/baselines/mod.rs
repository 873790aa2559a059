//! Comparison methods: unweighted fits, sliding windows, grid-searched
//! exponential decay and a random-walk-coefficient state-space model.
//!
//! All ridge-based baselines select their hyperparameter by validation MSE
//! on a fit to the training segment, then refit on training plus validation
//! samples with the chosen hyperparameter.

mod kalman;

pub use kalman::{
    default_state_space_grid, kalman_fit_predict, KalmanFilter, KalmanFit, StateSpaceConfig,
    DEFAULT_INIT_COV, DEFAULT_STATE_RATIOS,
};

use std::cmp::Ordering;

use crate::bilevel::refit;
use crate::data::{dot, Dataset, SplitSpec, WeightVector};
use crate::error::{Error, Result};
use crate::forgetting::{ForgettingParams, MechanismKind};
use crate::ridge::{self, HyperObjective, RidgeSolution, SolverConfig};

/// Fraction of weight left at the window length by the matched exponential decay.
pub const DEFAULT_WEIGHT_CUTOFF: f64 = 0.01;
pub const DEFAULT_WINDOW_COUNT: usize = 25;
pub const DEFAULT_MIN_WINDOW: usize = 5;

/// Sorted, de-duplicated candidate values for a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec<T> {
    values: Vec<T>,
}

impl GridSpec<usize> {
    pub fn windows(mut values: Vec<usize>) -> Result<Self> {
        values.sort_unstable();
        values.dedup();
        if values.is_empty() || values[0] == 0 {
            return Err(Error::InvalidParameter("window grid must be nonempty with lengths >= 1".into()));
        }
        Ok(Self { values })
    }
}

impl GridSpec<f64> {
    pub fn reals(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("grid must be nonempty and finite".into()));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self { values })
    }
}

impl<T> GridSpec<T> {
    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// `count` integer window lengths linearly spaced over `[min_window, max_window]`.
pub fn window_grid(max_window: usize, count: usize, min_window: usize) -> Result<GridSpec<usize>> {
    if max_window == 0 || count == 0 {
        return Err(Error::InvalidParameter("window grid needs a positive span and count".into()));
    }
    let lo = min_window.clamp(1, max_window) as f64;
    let hi = max_window as f64;
    let values = if count == 1 {
        vec![max_window]
    } else {
        (0..count)
            .map(|k| (lo + (hi - lo) * k as f64 / (count - 1) as f64).round() as usize)
            .collect()
    };
    GridSpec::windows(values)
}

/// Decay rate whose weight at age `window` equals `cutoff`: `ln(1 / cutoff) / window`.
pub fn window_to_rate(window: usize, cutoff: f64) -> f64 {
    -cutoff.ln() / window as f64
}

/// A fitted baseline: the refit model, the validation MSE that selected it and
/// the selected hyperparameter.
#[derive(Debug, Clone)]
pub struct BaselineFit<H> {
    pub model: RidgeSolution,
    pub valid_mse: f64,
    pub chosen: H,
}

pub(crate) fn valid_mse(dataset: &Dataset, split: &SplitSpec, model: &RidgeSolution) -> f64 {
    let sse: f64 = split
        .valid()
        .map(|t| (dataset.label(t) - dot(dataset.row(t), model.theta().as_slice())).powi(2))
        .sum();
    sse / split.valid_len() as f64
}

/// Unweighted ridge fit.
pub fn fit_stationary(dataset: &Dataset, split: &SplitSpec, solver: &SolverConfig) -> Result<BaselineFit<()>> {
    let train = ridge::solve(dataset, split, &WeightVector::ones(split.train_end()), solver)?;
    let model = ridge::solve_range(dataset, 0..split.valid_end(), &WeightVector::ones(split.valid_end()), solver)?;
    Ok(BaselineFit {
        valid_mse: valid_mse(dataset, split, &train),
        model,
        chosen: (),
    })
}

fn window_weights(len: usize, window: usize, anchor: usize) -> WeightVector {
    // ones on [anchor - window, len), zeros before
    let start = anchor.saturating_sub(window);
    WeightVector::new((0..len).map(|t| if t >= start { 1.0 } else { 0.0 }).collect())
        .expect("indicator weights are valid")
}

/// Uniform weights on the most recent `w` training samples, `w` chosen by validation MSE.
///
/// The refit keeps the same training window and adds every validation sample,
/// so the largest window `t*` reproduces the stationary fit exactly. Ties
/// prefer the longer window.
pub fn fit_window(
    dataset: &Dataset,
    split: &SplitSpec,
    solver: &SolverConfig,
    grid: &GridSpec<usize>,
) -> Result<BaselineFit<usize>> {
    let t_star = split.train_end();
    if let Some(w) = grid.values().iter().find(|w| **w > t_star) {
        return Err(Error::InvalidParameter(format!("window {w} exceeds the {t_star} training samples")));
    }
    let mut best: Option<(f64, usize)> = None;
    let mut last_err = None;
    for &w in grid.values().iter().rev() {
        match ridge::solve(dataset, split, &window_weights(t_star, w, t_star), solver) {
            Ok(sol) => {
                let mse = valid_mse(dataset, split, &sol);
                if best.is_none_or(|(b, _)| mse < b) {
                    best = Some((mse, w));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((mse, w)) = best else {
        return Err(last_err.unwrap_or(Error::InvalidParameter("empty window grid".into())));
    };
    let model = ridge::solve_range(dataset, 0..split.valid_end(), &window_weights(split.valid_end(), w, t_star), solver)?;
    Ok(BaselineFit {
        model,
        valid_mse: mse,
        chosen: w,
    })
}

/// Exponential decay with the rate chosen from an explicit grid by validation MSE.
/// Ties prefer the smaller rate.
pub fn fit_exp_grid(
    dataset: &Dataset,
    split: &SplitSpec,
    solver: &SolverConfig,
    rates: &GridSpec<f64>,
) -> Result<BaselineFit<f64>> {
    if rates.values()[0] < 0.0 {
        return Err(Error::InvalidParameter("decay rates must be nonnegative".into()));
    }
    let obj = HyperObjective::new(dataset, *split, MechanismKind::Exponential, *solver);
    let mut best: Option<(f64, f64)> = None;
    let mut last_err = None;
    for &rate in rates.values() {
        match obj.valid_loss(&[rate]) {
            Ok(sse) => {
                let mse = sse / split.valid_len() as f64;
                if best.is_none_or(|(b, _)| mse.total_cmp(&b) == Ordering::Less) {
                    best = Some((mse, rate));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((mse, rate)) = best else {
        return Err(last_err.unwrap_or(Error::InvalidParameter("empty rate grid".into())));
    };
    let model = refit(dataset, split, &ForgettingParams::exponential(rate)?, solver)?;
    Ok(BaselineFit {
        model,
        valid_mse: mse,
        chosen: rate,
    })
}

/// Exponential decay grid derived from window lengths: each window `w` maps to
/// the rate whose weight at age `w` equals `cutoff`.
pub fn fit_grid_exp(
    dataset: &Dataset,
    split: &SplitSpec,
    solver: &SolverConfig,
    window_grid: &GridSpec<usize>,
    cutoff: f64,
) -> Result<BaselineFit<f64>> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::InvalidParameter(format!("weight cutoff {cutoff} must lie in (0, 1)")));
    }
    let rates = GridSpec::reals(window_grid.values().iter().map(|w| window_to_rate(*w, cutoff)).collect())?;
    fit_exp_grid(dataset, split, solver, &rates)
}
