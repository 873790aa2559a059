//! Linear regression with random-walk coefficients, filtered by a Kalman recursion.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitSpec};
use crate::error::{Error, Result};

/// Prior covariance scale used by the default grid, relative to unit observation noise.
pub const DEFAULT_INIT_COV: f64 = 1e4;

/// State-to-observation variance ratios searched by the default grid.
pub const DEFAULT_STATE_RATIOS: [f64; 8] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpaceConfig {
    pub obs_var: f64,
    pub state_var: f64,
    pub init_cov: f64,
}

impl StateSpaceConfig {
    pub fn new(obs_var: f64, state_var: f64, init_cov: f64) -> Result<Self> {
        let cfg = Self {
            obs_var,
            state_var,
            init_cov,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("obs_var", self.obs_var), ("state_var", self.state_var), ("init_cov", self.init_cov)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unit observation variance with each ratio in [`DEFAULT_STATE_RATIOS`].
///
/// One-step predictions only depend on the variances up to a common scale, so
/// fixing the observation variance loses nothing.
pub fn default_state_space_grid() -> Vec<StateSpaceConfig> {
    DEFAULT_STATE_RATIOS
        .iter()
        .map(|q| StateSpaceConfig {
            obs_var: 1.0,
            state_var: *q,
            init_cov: DEFAULT_INIT_COV,
        })
        .collect()
}

/// Filtered state of the coefficient random walk.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    cfg: StateSpaceConfig,
    dim: usize,
    theta: Vec<f64>,
    // row-major dim x dim
    cov: Vec<f64>,
    px: Vec<f64>,
}

impl KalmanFilter {
    pub fn new(dim: usize, cfg: StateSpaceConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = cfg.init_cov;
        }
        Ok(Self {
            cfg,
            dim,
            theta: vec![0.0; dim],
            cov,
            px: vec![0.0; dim],
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn config(&self) -> &StateSpaceConfig {
        &self.cfg
    }

    /// Propagate one step, return the one-step-ahead prediction for `x`, then
    /// condition on the observed `y`.
    pub fn step(&mut self, x: &[f64], y: f64) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "kalman step",
                expected: self.dim,
                got: x.len(),
            });
        }
        let d = self.dim;
        for i in 0..d {
            self.cov[i * d + i] += self.cfg.state_var;
        }
        let pred: f64 = x.iter().zip(&self.theta).map(|(a, b)| a * b).sum();
        for i in 0..d {
            self.px[i] = (0..d).map(|j| self.cov[i * d + j] * x[j]).sum();
        }
        let s: f64 = x.iter().zip(&self.px).map(|(a, b)| a * b).sum::<f64>() + self.cfg.obs_var;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::NonFinite("kalman innovation variance"));
        }
        let innov = y - pred;
        for i in 0..d {
            self.theta[i] += self.px[i] * innov / s;
        }
        for i in 0..d {
            for j in 0..d {
                self.cov[i * d + j] -= self.px[i] * self.px[j] / s;
            }
        }
        Ok(pred)
    }
}

#[derive(Debug, Clone)]
pub struct KalmanFit {
    pub config: StateSpaceConfig,
    pub valid_mse: f64,
    /// One-step-ahead predictions for each test sample.
    pub predictions: Vec<f64>,
    /// Filtered coefficients after the last test observation.
    pub theta: Vec<f64>,
}

fn run_filter(dataset: &Dataset, split: &SplitSpec, cfg: StateSpaceConfig) -> Result<(f64, KalmanFilter, Vec<f64>)> {
    let mut filter = KalmanFilter::new(dataset.dim(), cfg)?;
    let mut sse = 0.0;
    let mut test_preds = Vec::with_capacity(split.test_len());
    for t in 0..split.test_end() {
        let pred = filter.step(dataset.row(t), dataset.label(t))?;
        if split.valid().contains(&t) {
            sse += (dataset.label(t) - pred).powi(2);
        } else if t >= split.valid_end() {
            test_preds.push(pred);
        }
    }
    Ok((sse / split.valid_len() as f64, filter, test_preds))
}

/// Filter through the whole series for each configuration, pick the one with
/// the lowest one-step-ahead validation MSE and return its test predictions.
/// Ties prefer the earlier configuration in `grid`.
pub fn kalman_fit_predict(dataset: &Dataset, split: &SplitSpec, grid: &[StateSpaceConfig]) -> Result<KalmanFit> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("state-space grid is empty".into()));
    }
    if split.test_end() > dataset.len() {
        return Err(Error::Bounds(format!(
            "split ends at {} but the dataset has {} samples",
            split.test_end(),
            dataset.len()
        )));
    }
    let mut best: Option<KalmanFit> = None;
    for cfg in grid {
        let (mse, filter, predictions) = run_filter(dataset, split, *cfg)?;
        if !mse.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| mse < b.valid_mse) {
            best = Some(KalmanFit {
                config: *cfg,
                valid_mse: mse,
                predictions,
                theta: filter.theta,
            });
        }
    }
    best.ok_or(Error::NonFinite("kalman validation loss"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_split, WeightVector};
    use crate::ridge::{solve_range, SolverConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let labels = rows
            .iter()
            .map(|r| 0.5 * r[0] - 1.0 * r[1] + 2.0 * r[2] + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        Dataset::new(rows, labels).unwrap()
    }

    #[test]
    fn single_update_by_hand() {
        let mut f = KalmanFilter::new(1, StateSpaceConfig::new(1.0, 1e-300, 1.0).unwrap()).unwrap();
        let pred = f.step(&[1.0], 1.0).unwrap();
        assert_eq!(pred, 0.0);
        assert_relative_eq!(f.theta()[0], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn static_coefficients_reduce_to_least_squares() {
        let ds = toy(200, 5);
        let mut f = KalmanFilter::new(3, StateSpaceConfig::new(1.0, 1e-300, 1e8).unwrap()).unwrap();
        for t in 0..200 {
            f.step(ds.row(t), ds.label(t)).unwrap();
        }
        let ls = solve_range(&ds, 0..200, &WeightVector::ones(200), &SolverConfig::new(0.0).unwrap()).unwrap();
        let num: f64 = f.theta().iter().zip(ls.theta().iter()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(num.sqrt() / ls.theta().norm() < 1e-4);
    }

    #[test]
    fn near_noiseless_observations_interpolate() {
        let rows = [vec![1.0, 2.0], vec![3.0, -1.0]];
        let labels = vec![1.0 * 1.0 + 2.0 * 0.5, 3.0 * 1.0 - 0.5];
        let mut f = KalmanFilter::new(2, StateSpaceConfig::new(1e-12, 1e-300, 1.0).unwrap()).unwrap();
        for (x, y) in rows.iter().zip(&labels) {
            f.step(x, *y).unwrap();
        }
        assert_relative_eq!(f.theta()[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(f.theta()[1], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn tracks_a_coefficient_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = vec![];
        let mut labels = vec![];
        for t in 0..400 {
            let x = rng.random_range(-1.0..1.0);
            let beta = if t < 300 { 1.0 } else { -1.0 };
            rows.push(vec![x]);
            labels.push(beta * x + 0.05 * rng.random_range(-1.0..1.0));
        }
        let ds = Dataset::new(rows, labels).unwrap();
        let split = make_split(400, 340, 40, 20).unwrap();
        let fit = kalman_fit_predict(&ds, &split, &default_state_space_grid()).unwrap();
        assert_eq!(fit.predictions.len(), 20);
        assert!(fit.config.state_var > 1e-6);
        assert_relative_eq!(fit.theta[0], -1.0, epsilon = 0.1);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(StateSpaceConfig::new(0.0, 1.0, 1.0).is_err());
        assert!(StateSpaceConfig::new(1.0, -1.0, 1.0).is_err());
        assert!(StateSpaceConfig::new(1.0, 1.0, f64::INFINITY).is_err());
        let ds = toy(10, 0);
        let split = make_split(10, 6, 2, 2).unwrap();
        assert!(kalman_fit_predict(&ds, &split, &[]).is_err());
        let mut f = KalmanFilter::new(2, default_state_space_grid()[0]).unwrap();
        assert!(f.step(&[1.0], 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn predictions_scale_invariant(seed in 0u64..1000, log_c in -6.0f64..6.0, log_q in -6.0f64..0.0) {
            let ds = toy(60, seed);
            let split = make_split(60, 40, 10, 10).unwrap();
            let c = 10f64.powf(log_c);
            let base = StateSpaceConfig::new(1.0, 10f64.powf(log_q), 10.0).unwrap();
            let scaled = StateSpaceConfig::new(c, c * base.state_var, c * base.init_cov).unwrap();
            let a = kalman_fit_predict(&ds, &split, &[base]).unwrap();
            let b = kalman_fit_predict(&ds, &split, &[scaled]).unwrap();
            for (p, q) in a.predictions.iter().zip(&b.predictions) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
            }
            prop_assert!((a.valid_mse - b.valid_mse).abs() <= 1e-9 * a.valid_mse.max(1e-300));
        }
    }
}
