//! Upper-level optimization of forgetting parameters.
//!
//! Each step re-solves the ridge problem in closed form on the full training
//! segment, so the implicit gradient is always taken at the exact argmin.
//! Stochasticity comes only from mini-batching the validation segment.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitSpec, WeightVector};
use crate::error::{Error, Result};
use crate::forgetting::{project_nonnegative, weight, ForgettingParams, MechanismKind};
use crate::ridge::{self, HyperObjective, RidgeSolution, SolverConfig};

/// How a mini-batch's squared errors are combined before the update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchReduction {
    /// Gradient of the batch's mean squared error.
    #[default]
    Mean,
    /// Gradient of the batch's summed squared error, scaling the step with batch size.
    Sum,
}

/// Mini-batch SGD with momentum and random restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub restarts: usize,
    /// Lower bound of the uniform initialization box for every `eta_i`.
    pub init_low: f64,
    pub init_high: f64,
    pub rng_seed: u64,
    pub batch_reduction: BatchReduction,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            momentum: 0.9,
            epochs: 50,
            batch_size: 32,
            restarts: 5,
            init_low: 0.0,
            init_high: 1.0,
            rng_seed: 0,
            batch_reduction: BatchReduction::Mean,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size {} must be finite and nonnegative", self.step_size));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.restarts == 0 {
            return bad("epochs, batch size and restarts must all be at least 1".into());
        }
        if !(self.init_low <= self.init_high && self.init_low.is_finite() && self.init_high.is_finite()) {
            return bad(format!(
                "initialization box [{}, {}] is empty or not finite",
                self.init_low, self.init_high
            ));
        }
        Ok(())
    }
}

/// One restart's optimization path.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartTrace {
    pub restart: usize,
    pub initial_eta: Vec<f64>,
    /// Full-validation loss after each epoch.
    pub losses: Vec<f64>,
    /// Parameters after each epoch.
    pub etas: Vec<Vec<f64>>,
    /// Parameters after the last epoch, absent if the restart failed.
    pub final_eta: Option<Vec<f64>>,
    pub failure: Option<String>,
}

impl RestartTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.final_eta.as_ref().and(self.losses.last().copied())
    }
}

#[derive(Debug, Clone)]
pub struct BilevelResult {
    pub best_eta: ForgettingParams,
    /// Sum of squared errors on the full validation segment at `best_eta`.
    pub best_valid_loss: f64,
    pub restart_traces: Vec<RestartTrace>,
    /// Model refit on training plus validation samples at `best_eta`.
    pub final_model: RidgeSolution,
}

fn restart_seed(base: u64, restart: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ (restart as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_restart(obj: &HyperObjective, kind: MechanismKind, opt: &OptimizerConfig, restart: usize) -> RestartTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(opt.rng_seed, restart));
    let mut eta: Vec<f64> = (0..kind.dim())
        .map(|_| {
            if opt.init_low < opt.init_high {
                rng.random_range(opt.init_low..opt.init_high)
            } else {
                opt.init_low
            }
        })
        .collect();
    project_nonnegative(&mut eta);

    let mut trace = RestartTrace {
        restart,
        initial_eta: eta.clone(),
        losses: Vec::with_capacity(opt.epochs),
        etas: Vec::with_capacity(opt.epochs),
        final_eta: None,
        failure: None,
    };
    let mut velocity = vec![0.0; eta.len()];
    let mut order: Vec<usize> = obj.split().valid().collect();

    let outcome: Result<()> = (|| {
        for _epoch in 0..opt.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(opt.batch_size) {
                let g = obj.gradient(&eta, batch)?.gradient;
                let scale = match opt.batch_reduction {
                    BatchReduction::Mean => opt.step_size / batch.len() as f64,
                    BatchReduction::Sum => opt.step_size,
                };
                for ((e, v), gi) in eta.iter_mut().zip(&mut velocity).zip(&g) {
                    *v = opt.momentum * *v - scale * gi;
                    *e += *v;
                }
                project_nonnegative(&mut eta);
                if eta.iter().any(|e| !e.is_finite()) {
                    return Err(Error::NonFinite("forgetting parameters"));
                }
            }
            trace.losses.push(obj.valid_loss(&eta)?);
            trace.etas.push(eta.clone());
        }
        Ok(())
    })();

    match outcome {
        Ok(()) => trace.final_eta = Some(eta),
        Err(e) => trace.failure = Some(e.to_string()),
    }
    trace
}

/// Learns forgetting parameters by gradient descent on the validation loss.
pub fn fit(
    dataset: &Dataset,
    split: &SplitSpec,
    kind: MechanismKind,
    solver: &SolverConfig,
    opt: &OptimizerConfig,
) -> Result<BilevelResult> {
    opt.validate()?;
    solver.validate()?;
    if split.test_end() > dataset.len() {
        return Err(Error::Bounds(format!(
            "split ends at {} but the dataset has {} samples",
            split.test_end(),
            dataset.len()
        )));
    }
    let obj = HyperObjective::new(dataset, *split, kind, *solver);
    let traces: Vec<RestartTrace> = (0..opt.restarts)
        .into_par_iter()
        .map(|r| run_restart(&obj, kind, opt, r))
        .collect();

    let best = traces
        .iter()
        .filter_map(|t| Some((t.final_loss()?, t)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let Some((best_valid_loss, best)) = best else {
        let last = traces
            .iter()
            .rev()
            .find_map(|t| t.failure.clone())
            .unwrap_or_default();
        return Err(Error::AllRestartsFailed {
            restarts: opt.restarts,
            last: Box::new(Error::InvalidParameter(last)),
        });
    };
    let best_eta = ForgettingParams::new(kind, best.final_eta.clone().expect("selected restart finished"))?;
    let final_model = refit(dataset, split, &best_eta, solver)?;
    Ok(BilevelResult {
        best_eta,
        best_valid_loss,
        restart_traces: traces,
        final_model,
    })
}

/// Weights used for the final fit on training plus validation samples.
///
/// Training samples keep their forgetting weight `alpha(t* - tau)`; every
/// validation sample gets `alpha(0)`, the weight of the last training sample.
pub fn refit_weights(split: &SplitSpec, eta: &ForgettingParams) -> WeightVector {
    let t_star = split.train_end() as u64;
    let head = weight(eta, 0);
    let w = (0..split.valid_end() as u64)
        .map(|tau| if tau < t_star { weight(eta, t_star - 1 - tau) } else { head })
        .collect();
    WeightVector::new(w).expect("forgetting weights are finite and nonnegative")
}

/// Refits the weighted ridge model on the training and validation segments.
pub fn refit(
    dataset: &Dataset,
    split: &SplitSpec,
    eta: &ForgettingParams,
    solver: &SolverConfig,
) -> Result<RidgeSolution> {
    ridge::solve_range(dataset, 0..split.valid_end(), &refit_weights(split, eta), solver)
}

/// Point prediction `x' theta_hat`.
pub fn predict(model: &RidgeSolution, features: &[f64]) -> Result<f64> {
    model.predict(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_split;
    use crate::ridge::solve_range;
    use approx::assert_relative_eq;
    use std::f64::consts::LN_2;

    fn drifting(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = vec![0.0f64];
        for t in 1..=n {
            let phi = if t < 2 * n / 3 { 0.9 } else { -0.6 };
            y.push(phi * y[t - 1] + 0.05 * rng.random_range(-1.7..1.7));
        }
        Dataset::new((1..=n).map(|t| vec![y[t - 1]]).collect(), y[1..].to_vec()).unwrap()
    }

    #[test]
    fn zero_step_keeps_initialization() {
        let ds = drifting(120, 1);
        let split = make_split(120, 90, 20, 10).unwrap();
        let opt = OptimizerConfig {
            step_size: 0.0,
            restarts: 3,
            epochs: 2,
            init_low: 0.05,
            init_high: 0.5,
            rng_seed: 4,
            ..Default::default()
        };
        let cfg = SolverConfig::new(1e-4).unwrap();
        let res = fit(&ds, &split, MechanismKind::MixedDecay, &cfg, &opt).unwrap();
        let obj = HyperObjective::new(&ds, split, MechanismKind::MixedDecay, cfg);
        for tr in &res.restart_traces {
            assert_eq!(tr.final_eta.as_ref().unwrap(), &tr.initial_eta);
            let direct = obj.valid_loss(&tr.initial_eta).unwrap();
            assert!(tr.losses.iter().all(|l| *l == direct));
            assert_eq!(tr.losses.len(), 2);
        }
        let min = res.restart_traces.iter().map(|t| t.final_loss().unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(res.best_valid_loss, min);
    }

    #[test]
    fn zero_initialization_is_stationary() {
        let ds = drifting(80, 2);
        let split = make_split(80, 60, 12, 8).unwrap();
        let cfg = SolverConfig::new(1e-3).unwrap();
        let opt = OptimizerConfig {
            step_size: 0.0,
            restarts: 1,
            init_low: 0.0,
            init_high: 0.0,
            epochs: 1,
            ..Default::default()
        };
        let res = fit(&ds, &split, MechanismKind::Exponential, &cfg, &opt).unwrap();
        let stationary = solve_range(&ds, 0..split.valid_end(), &WeightVector::ones(split.valid_end()), &cfg).unwrap();
        assert_eq!(res.final_model.theta(), stationary.theta());
        let obj = HyperObjective::new(&ds, split, MechanismKind::Exponential, cfg);
        let train_only = crate::ridge::solve(&ds, &split, &WeightVector::ones(60), &cfg).unwrap();
        assert_eq!(obj.solve(&[0.0]).unwrap().theta(), train_only.theta());
    }

    #[test]
    fn gradient_descent_improves_validation_loss() {
        let ds = drifting(300, 3);
        let split = make_split(300, 250, 40, 10).unwrap();
        let cfg = SolverConfig::new(1e-4).unwrap();
        let opt = OptimizerConfig {
            restarts: 2,
            epochs: 20,
            batch_size: 8,
            init_low: 0.0,
            init_high: 0.0,
            ..Default::default()
        };
        let res = fit(&ds, &split, MechanismKind::Exponential, &cfg, &opt).unwrap();
        let obj = HyperObjective::new(&ds, split, MechanismKind::Exponential, cfg);
        assert!(res.best_valid_loss < obj.valid_loss(&[0.0]).unwrap());
        assert!(res.best_eta.eta()[0] > 0.0);
        for tr in &res.restart_traces {
            assert_eq!(tr.losses.len(), 20);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let ds = drifting(200, 5);
        let split = make_split(200, 150, 40, 10).unwrap();
        let cfg = SolverConfig::new(1e-4).unwrap();
        let opt = OptimizerConfig {
            epochs: 5,
            rng_seed: 99,
            ..Default::default()
        };
        let a = fit(&ds, &split, MechanismKind::MixedDecay, &cfg, &opt).unwrap();
        let b = fit(&ds, &split, MechanismKind::MixedDecay, &cfg, &opt).unwrap();
        assert_eq!(a.best_eta, b.best_eta);
        assert_eq!(a.restart_traces, b.restart_traces);
        assert_eq!(a.final_model.theta(), b.final_model.theta());
        assert!(a.best_eta.eta().iter().all(|e| *e >= 0.0));
    }

    #[test]
    fn mean_reduction_is_a_rescaled_sum_step() {
        let ds = drifting(120, 3);
        // 16 validation samples in two full batches of 8
        let split = make_split(120, 96, 16, 8).unwrap();
        let cfg = SolverConfig::new(1e-4).unwrap();
        let base = OptimizerConfig {
            epochs: 4,
            batch_size: 8,
            restarts: 2,
            rng_seed: 12,
            ..Default::default()
        };
        let mean = fit(&ds, &split, MechanismKind::Exponential, &cfg, &OptimizerConfig { step_size: 0.8, ..base.clone() }).unwrap();
        let sum = OptimizerConfig {
            step_size: 0.1,
            batch_reduction: BatchReduction::Sum,
            ..base
        };
        let sum = fit(&ds, &split, MechanismKind::Exponential, &cfg, &sum).unwrap();
        assert_eq!(mean.restart_traces, sum.restart_traces);
    }

    #[test]
    fn matches_grid_search_on_fixed_regime() {
        use crate::baselines::{fit_grid_exp, window_grid, DEFAULT_WEIGHT_CUTOFF};
        use crate::synthgen::{generate, to_supervised, DgpConfig, DgpKind};
        let series = generate(&DgpConfig::new(DgpKind::FixedRegime), 0).unwrap();
        let ds = to_supervised(&series.values).unwrap();
        let split = SplitSpec::new(ds.len(), 2872, 2972, 2997).unwrap();
        let cfg = SolverConfig::default();
        let grid = fit_grid_exp(&ds, &split, &cfg, &window_grid(2872, 25, 5).unwrap(), DEFAULT_WEIGHT_CUTOFF).unwrap();
        let res = fit(&ds, &split, MechanismKind::Exponential, &cfg, &OptimizerConfig::default()).unwrap();
        let learned = res.best_valid_loss / split.valid_len() as f64;
        assert!(learned <= 1.05 * grid.valid_mse, "{learned} vs grid {}", grid.valid_mse);
    }

    #[test]
    fn all_failed_restarts_error() {
        // Two collinear features and no ridge: every solve is singular.
        let rows = (0..20).map(|t| vec![t as f64, 2.0 * t as f64]).collect();
        let ds = Dataset::new(rows, (0..20).map(|t| t as f64).collect()).unwrap();
        let split = make_split(20, 12, 4, 4).unwrap();
        let opt = OptimizerConfig {
            epochs: 1,
            restarts: 2,
            ..Default::default()
        };
        let err = fit(&ds, &split, MechanismKind::Exponential, &SolverConfig::default(), &opt).unwrap_err();
        assert!(matches!(err, Error::AllRestartsFailed { restarts: 2, .. }), "{err}");
    }

    #[test]
    fn refit_weight_layout() {
        let split = SplitSpec::new(6, 3, 5, 6).unwrap();
        let w = refit_weights(&split, &ForgettingParams::exponential(LN_2).unwrap());
        let want = [0.25, 0.5, 1.0, 1.0, 1.0];
        for (g, e) in w.as_slice().iter().zip(want) {
            assert_relative_eq!(*g, e, max_relative = 1e-15);
        }
    }

    #[test]
    fn sharp_decay_refit_ignores_old_samples() {
        let ds = drifting(60, 7);
        let split = make_split(60, 40, 10, 10).unwrap();
        let cfg = SolverConfig::new(1e-6).unwrap();
        let eta = ForgettingParams::exponential(50.0).unwrap();
        let w = refit_weights(&split, &eta);
        assert!(w.as_slice()[..39].iter().all(|w| *w < 1e-20));
        let model = refit(&ds, &split, &eta, &cfg).unwrap();
        let mut recent = vec![0.0; 50];
        recent[39..].iter_mut().for_each(|w| *w = 1.0);
        let direct = solve_range(&ds, 0..50, &WeightVector::new(recent).unwrap(), &cfg).unwrap();
        assert_relative_eq!(model.theta()[0], direct.theta()[0], max_relative = 1e-10);
    }

    #[test]
    fn predict_is_dot_product() {
        let ds = Dataset::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], vec![1.0, 0.0, 1.0]).unwrap();
        let model = solve_range(&ds, 0..3, &WeightVector::ones(3), &SolverConfig::default()).unwrap();
        assert_relative_eq!(predict(&model, &[5.0, 0.0]).unwrap(), 5.0, max_relative = 1e-12);
        assert!(predict(&model, &[1.0]).is_err());
    }

    #[test]
    fn rejects_bad_optimizer_settings() {
        let ok = OptimizerConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            OptimizerConfig { momentum: 1.0, ..ok.clone() },
            OptimizerConfig { epochs: 0, ..ok.clone() },
            OptimizerConfig { init_low: 1.0, init_high: 0.0, ..ok.clone() },
            OptimizerConfig { step_size: f64::NAN, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
