//! Weighted ridge regression and implicit differentiation of its solution.
//!
//! The lower-level objective is
//!
//! ```text
//! gL(eta, theta) = sum_tau w_tau(eta) (y_tau - x_tau' theta)^2 + lambda |theta|^2
//! ```
//!
//! with minimizer `theta_hat = G^-1 sum_tau w_tau x_tau y_tau`, where
//! `G = sum_tau w_tau x_tau x_tau' + lambda I`. The Hessian of `gL` is `2 G`
//! and the mixed derivative is `d(grad_theta gL)/d eta_i = -2 sum_tau
//! (d w_tau / d eta_i) x_tau r_tau`. Both factors of two are kept explicit.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ages_of, dot, Dataset, SplitSpec, WeightVector};
use crate::error::{Error, Result};
use crate::forgetting::{AgeBasis, ForgettingParams, MechanismKind};
use crate::linalg::Cholesky;

/// Inverse-Hessian treatment in the implicit Jacobian.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    #[default]
    Exact,
    /// Replace the inverse Hessian by the identity matrix.
    Identity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub ridge_penalty: f64,
    #[serde(default)]
    pub hessian_mode: HessianMode,
}

impl SolverConfig {
    pub fn new(ridge_penalty: f64) -> Result<Self> {
        let cfg = Self {
            ridge_penalty,
            hessian_mode: HessianMode::Exact,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_hessian_mode(mut self, mode: HessianMode) -> Self {
        self.hessian_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_penalty.is_finite() && self.ridge_penalty >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ridge penalty {} must be finite and nonnegative",
                self.ridge_penalty
            )));
        }
        Ok(())
    }
}

/// Fitted coefficients plus the artifacts needed to differentiate them.
#[derive(Debug, Clone)]
pub struct RidgeSolution {
    theta: DVector<f64>,
    gram: DMatrix<f64>,
    residuals: Vec<f64>,
    range: Range<usize>,
    factor: Cholesky,
}

impl RidgeSolution {
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// `G = sum w x x' + lambda I`; the lower-level Hessian is `2 G`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `y_tau - x_tau' theta_hat` for every sample of the fitted range.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Storage indices of the samples the model was fit on.
    pub fn fit_range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                context: "prediction features",
                expected: self.theta.len(),
                got: features.len(),
            });
        }
        Ok(dot(features, self.theta.as_slice()))
    }

    /// `G^-1 v` using the cached factorization.
    pub fn solve_gram(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }
}

fn check_weights(range: &Range<usize>, weights: &WeightVector) -> Result<()> {
    if weights.len() != range.len() {
        return Err(Error::DimensionMismatch {
            context: "sample weights",
            expected: range.len(),
            got: weights.len(),
        });
    }
    Ok(())
}

/// `sum_tau w_tau (y_tau - x_tau' theta)^2 + lambda |theta|^2` over the training segment.
pub fn lower_objective(
    dataset: &Dataset,
    split: &SplitSpec,
    weights: &WeightVector,
    theta: &[f64],
    cfg: &SolverConfig,
) -> Result<f64> {
    let range = split.train();
    check_weights(&range, weights)?;
    if theta.len() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            context: "coefficients",
            expected: dataset.dim(),
            got: theta.len(),
        });
    }
    let data_term: f64 = range
        .zip(weights.as_slice())
        .map(|(t, w)| w * (dataset.label(t) - dot(dataset.row(t), theta)).powi(2))
        .sum();
    Ok(data_term + cfg.ridge_penalty * dot(theta, theta))
}

/// Closed-form weighted ridge fit on the training segment of `split`.
pub fn solve(
    dataset: &Dataset,
    split: &SplitSpec,
    weights: &WeightVector,
    cfg: &SolverConfig,
) -> Result<RidgeSolution> {
    solve_range(dataset, split.train(), weights, cfg)
}

/// `(G, sum_tau w_tau x_tau y_tau)` over `range`, skipping zero weights.
fn normal_equations(dataset: &Dataset, range: Range<usize>, w: &[f64], penalty: f64) -> (DMatrix<f64>, DVector<f64>) {
    let d = dataset.dim();
    // column-major lower triangle accumulated in a flat buffer
    let mut g = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (t, &wt) in range.zip(w) {
        if wt == 0.0 {
            continue;
        }
        let x = dataset.row(t);
        let wy = wt * dataset.label(t);
        for (i, &xi) in x.iter().enumerate() {
            rhs[i] += xi * wy;
            let wxi = wt * xi;
            let col = &mut g[i * d..i * d + i + 1];
            for (gij, xj) in col.iter_mut().zip(x) {
                *gij += wxi * xj;
            }
        }
    }
    let gram = DMatrix::from_fn(d, d, |i, j| {
        let v = if j <= i { g[i * d + j] } else { g[j * d + i] };
        if i == j {
            v + penalty
        } else {
            v
        }
    });
    (gram, DVector::from_vec(rhs))
}

/// Closed-form weighted ridge fit on an arbitrary contiguous range of samples.
pub fn solve_range(
    dataset: &Dataset,
    range: Range<usize>,
    weights: &WeightVector,
    cfg: &SolverConfig,
) -> Result<RidgeSolution> {
    cfg.validate()?;
    if range.is_empty() || range.end > dataset.len() {
        return Err(Error::Bounds(format!(
            "fit range {range:?} of a dataset with {} samples",
            dataset.len()
        )));
    }
    check_weights(&range, weights)?;
    let w = weights.as_slice();
    if w.iter().all(|w| *w == 0.0) {
        return Err(Error::ZeroWeights);
    }

    let (gram, rhs) = normal_equations(dataset, range.clone(), w, cfg.ridge_penalty);
    let factor = Cholesky::factor(&gram)?;
    let theta = factor.solve(&rhs);
    let residuals = range
        .clone()
        .map(|t| dataset.label(t) - dot(dataset.row(t), theta.as_slice()))
        .collect();
    Ok(RidgeSolution {
        theta,
        gram,
        residuals,
        range,
        factor,
    })
}

/// `d theta_hat / d eta`, a `d x dim(eta)` matrix.
///
/// `weight_jac` holds `d w_tau / d eta_i` for every sample of the solution's
/// fit range. Column `i` is `-(2G)^-1 * (-2 sum_tau J_tau,i x_tau r_tau)`; in
/// identity mode the inverse Hessian is replaced by `I`.
pub fn implicit_jacobian(
    solution: &RidgeSolution,
    dataset: &Dataset,
    split: &SplitSpec,
    weight_jac: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    if solution.range != split.train() {
        return Err(Error::InvalidParameter(format!(
            "solution was fit on {:?}, not the training segment {:?}",
            solution.range,
            split.train()
        )));
    }
    implicit_jacobian_on(solution, dataset, weight_jac, cfg.hessian_mode)
}

fn implicit_jacobian_on(
    solution: &RidgeSolution,
    dataset: &Dataset,
    weight_jac: &DMatrix<f64>,
    mode: HessianMode,
) -> Result<DMatrix<f64>> {
    let n = solution.residuals.len();
    if weight_jac.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "weight Jacobian rows",
            expected: n,
            got: weight_jac.nrows(),
        });
    }
    let d = dataset.dim();
    let k = weight_jac.ncols();
    // mixed[:, i] = d(grad_theta gL)/d eta_i = -2 sum_tau J[tau, i] x_tau r_tau
    let mut mixed = DMatrix::<f64>::zeros(d, k);
    for (row, t) in solution.range.clone().enumerate() {
        let r = solution.residuals[row];
        if r == 0.0 {
            continue;
        }
        let x = dataset.row(t);
        for i in 0..k {
            let c = -2.0 * weight_jac[(row, i)] * r;
            if c == 0.0 {
                continue;
            }
            for (m, xj) in x.iter().enumerate() {
                mixed[(m, i)] += c * xj;
            }
        }
    }
    Ok(match mode {
        // -(2G)^-1 mixed
        HessianMode::Exact => solution.factor.solve_matrix(&mixed) * -0.5,
        HessianMode::Identity => -mixed,
    })
}

/// Total derivative of the validation loss with respect to `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperGradient {
    pub gradient: Vec<f64>,
    /// Sum of squared validation errors over the evaluated subset.
    pub valid_loss: f64,
}

/// Gradient of `gU = sum_{t in subset} (y_t - x_t' theta_hat(eta))^2` with respect to `eta`.
///
/// `valid_subset` holds storage indices, each inside the validation segment.
pub fn upper_gradient(
    eta: &ForgettingParams,
    dataset: &Dataset,
    split: &SplitSpec,
    valid_subset: &[usize],
    cfg: &SolverConfig,
) -> Result<UpperGradient> {
    HyperObjective::new(dataset, *split, eta.kind(), *cfg).gradient(eta.eta(), valid_subset)
}

/// The bi-level problem for one dataset, split and mechanism family, with
/// the age basis precomputed.
#[derive(Debug, Clone)]
pub struct HyperObjective<'a> {
    dataset: &'a Dataset,
    split: SplitSpec,
    basis: AgeBasis,
    cfg: SolverConfig,
}

impl<'a> HyperObjective<'a> {
    pub fn new(
        dataset: &'a Dataset,
        split: SplitSpec,
        kind: MechanismKind,
        cfg: SolverConfig,
    ) -> Self {
        let basis = AgeBasis::new(kind, &ages_of(&split));
        Self {
            dataset,
            split,
            basis,
            cfg,
        }
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn weights(&self, eta: &[f64]) -> Result<WeightVector> {
        if eta.len() != self.basis.kind().dim() {
            return Err(Error::DimensionMismatch {
                context: "forgetting parameters",
                expected: self.basis.kind().dim(),
                got: eta.len(),
            });
        }
        self.basis.weights(eta)
    }

    /// Lower-level solution `theta_hat(eta)` on the training segment.
    pub fn solve(&self, eta: &[f64]) -> Result<RidgeSolution> {
        let w = self.weights(eta)?;
        solve(self.dataset, &self.split, &w, &self.cfg)
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if subset.is_empty() {
            return Err(Error::InvalidParameter("validation subset is empty".into()));
        }
        let valid = self.split.valid();
        if let Some(t) = subset.iter().find(|t| !valid.contains(t)) {
            return Err(Error::Bounds(format!(
                "index {t} lies outside the validation segment {valid:?}"
            )));
        }
        Ok(())
    }

    /// Sum of squared validation errors over the whole validation segment.
    pub fn valid_loss(&self, eta: &[f64]) -> Result<f64> {
        let w = self.weights(eta)?;
        let (theta, _) = self.fit_theta(w.as_slice())?;
        Ok(self
            .split
            .valid()
            .map(|t| (self.dataset.label(t) - dot(self.dataset.row(t), theta.as_slice())).powi(2))
            .sum())
    }

    /// `theta_hat` and the factor of `G` without materializing residuals.
    fn fit_theta(&self, w: &[f64]) -> Result<(DVector<f64>, Cholesky)> {
        if w.iter().all(|w| *w == 0.0) {
            return Err(Error::ZeroWeights);
        }
        let (gram, rhs) = normal_equations(self.dataset, self.split.train(), w, self.cfg.ridge_penalty);
        let factor = Cholesky::factor(&gram)?;
        let theta = factor.solve(&rhs);
        Ok((theta, factor))
    }

    pub fn gradient(&self, eta: &[f64], subset: &[usize]) -> Result<UpperGradient> {
        self.check_subset(subset)?;
        let w = self.weights(eta)?;
        let (theta, factor) = self.fit_theta(w.as_slice())?;

        let d = self.dataset.dim();
        let mut grad_theta = DVector::<f64>::zeros(d);
        let mut valid_loss = 0.0;
        for &t in subset {
            let x = self.dataset.row(t);
            let r = self.dataset.label(t) - dot(x, theta.as_slice());
            valid_loss += r * r;
            for (g, xi) in grad_theta.iter_mut().zip(x) {
                *g += -2.0 * xi * r;
            }
        }

        // mixed[:, i] = -2 sum_tau (d w_tau / d eta_i) x_tau r_tau, with d w / d eta_i = -phi_i w
        let k = self.basis.kind().dim();
        let th = theta.as_slice();
        let mut acc = vec![0.0; d * k];
        for (tau, (t, &wt)) in self.split.train().zip(w.as_slice()).enumerate() {
            if wt == 0.0 {
                continue;
            }
            let x = self.dataset.row(t);
            let r2w = 2.0 * wt * (self.dataset.label(t) - dot(x, th));
            for (col, p) in acc.chunks_exact_mut(d).zip(self.basis.phi(tau)) {
                let c = r2w * p;
                for (a, xj) in col.iter_mut().zip(x) {
                    *a += c * xj;
                }
            }
        }
        let mixed = DMatrix::from_vec(d, k, acc);
        let dtheta = match self.cfg.hessian_mode {
            HessianMode::Exact => factor.solve_matrix(&mixed) * -0.5,
            HessianMode::Identity => -mixed,
        };
        let gradient: Vec<f64> = (dtheta.transpose() * grad_theta).iter().copied().collect();
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("hypergradient"));
        }
        Ok(UpperGradient {
            gradient,
            valid_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_split;
    use crate::forgetting::{weight_jacobian, weight_vector};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_point() -> (Dataset, SplitSpec) {
        let ds = Dataset::new(
            vec![vec![1.0], vec![1.0], vec![1.0], vec![1.0]],
            vec![2.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let split = make_split(4, 2, 1, 1).unwrap();
        (ds, split)
    }

    fn w(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn lower_objective_examples() {
        let (ds, split) = two_point();
        let plain = SolverConfig::default();
        assert_eq!(lower_objective(&ds, &split, &w(&[1.0, 1.0]), &[0.0], &plain).unwrap(), 20.0);
        assert_eq!(lower_objective(&ds, &split, &w(&[0.0, 0.0]), &[7.0], &plain).unwrap(), 0.0);
        // 1 * 1.5^2 + 3 * 0.5^2
        assert_relative_eq!(
            lower_objective(&ds, &split, &w(&[1.0, 3.0]), &[3.5], &plain).unwrap(),
            3.0,
            max_relative = 1e-15
        );
        assert!(lower_objective(&ds, &split, &w(&[1.0]), &[0.0], &plain).is_err());
        assert!(lower_objective(&ds, &split, &w(&[1.0, 1.0]), &[0.0, 1.0], &plain).is_err());
    }

    #[test]
    fn solve_examples() {
        let (ds, split) = two_point();
        let plain = SolverConfig::default();
        let sol = solve(&ds, &split, &w(&[1.0, 1.0]), &plain).unwrap();
        assert_relative_eq!(sol.theta()[0], 3.0, max_relative = 1e-15);
        let sol = solve(&ds, &split, &w(&[1.0, 3.0]), &plain).unwrap();
        assert_relative_eq!(sol.theta()[0], 3.5, max_relative = 1e-15);
        assert_eq!(sol.residuals(), &[-1.5, 0.5]);
        assert_relative_eq!(sol.predict(&[1.0]).unwrap(), 3.5, max_relative = 1e-15);
        assert!(sol.predict(&[1.0, 2.0]).is_err());

        let huge = SolverConfig::new(1e12).unwrap();
        let sol = solve(&ds, &split, &w(&[1.0, 3.0]), &huge).unwrap();
        assert!(sol.theta().norm() < 1e-6);
    }

    #[test]
    fn solve_rejects_degenerate_inputs() {
        let (ds, split) = two_point();
        let plain = SolverConfig::default();
        assert!(matches!(solve(&ds, &split, &w(&[0.0, 0.0]), &plain), Err(Error::ZeroWeights)));
        let collinear =
            Dataset::new(vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![0.0, 0.0]], vec![1.0, 2.0, 0.0])
                .unwrap();
        let split = SplitSpec::new(3, 2, 3, 3).unwrap();
        match solve(&collinear, &split, &w(&[1.0, 1.0]), &plain) {
            Err(Error::Singular { dim: 2, rank: 1 }) => {}
            other => panic!("expected rank-1 singularity, got {other:?}"),
        }
        assert!(SolverConfig::new(-1.0).is_err());
    }

    #[test]
    fn normal_equations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ds = Dataset::new(rows, labels).unwrap();
        let split = make_split(30, 25, 3, 2).unwrap();
        let weights = w(&(0..25).map(|i| 0.9f64.powi(24 - i)).collect::<Vec<_>>());
        let sol = solve(&ds, &split, &weights, &SolverConfig::new(0.01).unwrap()).unwrap();
        let mut rhs = DVector::zeros(3);
        for t in 0..25 {
            rhs += DVector::from_row_slice(ds.row(t)) * (weights.as_slice()[t] * ds.label(t));
        }
        let lhs = sol.gram() * sol.theta();
        assert!((lhs - &rhs).norm() <= 1e-8 * rhs.norm());
        assert_relative_eq!(sol.gram(), &sol.gram().transpose());
    }

    #[test]
    fn implicit_jacobian_trivial_cases() {
        let (ds, split) = two_point();
        let plain = SolverConfig::default();
        let sol = solve(&ds, &split, &w(&[1.0, 1.0]), &plain).unwrap();
        let zero_jac = DMatrix::zeros(2, 3);
        let j = implicit_jacobian(&sol, &ds, &split, &zero_jac, &plain).unwrap();
        assert_eq!(j.shape(), (1, 3));
        assert!(j.iter().all(|v| *v == 0.0));

        let perfect = Dataset::new(vec![vec![1.0], vec![2.0], vec![3.0]], vec![2.0, 4.0, 6.0]).unwrap();
        let split = SplitSpec::new(3, 2, 3, 3).unwrap();
        let sol = solve(&perfect, &split, &w(&[0.5, 1.0]), &plain).unwrap();
        let jac = DMatrix::from_row_slice(2, 1, &[-0.5, 0.0]);
        let j = implicit_jacobian(&sol, &perfect, &split, &jac, &plain).unwrap();
        assert!(j.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn scalar_implicit_jacobian_matches_finite_differences() {
        // one sample x = 1, y = 1, w = exp(-eta): theta = w / (w + 0.1)
        let ds = Dataset::new(vec![vec![1.0], vec![1.0]], vec![1.0, 0.0]).unwrap();
        let split = SplitSpec::new(2, 1, 2, 2).unwrap();
        let cfg = SolverConfig::new(0.1).unwrap();
        let theta_at = |eta: f64| {
            solve(&ds, &split, &w(&[(-eta).exp()]), &cfg).unwrap().theta()[0]
        };
        let eta: f64 = 0.5;
        let sol = solve(&ds, &split, &w(&[(-eta).exp()]), &cfg).unwrap();
        let wt = (-eta).exp();
        assert_relative_eq!(sol.theta()[0], wt / (wt + 0.1), max_relative = 1e-14);
        let jac = DMatrix::from_row_slice(1, 1, &[-wt]);
        let j = implicit_jacobian(&sol, &ds, &split, &jac, &cfg).unwrap();
        let h = 1e-5;
        let fd = (theta_at(eta + h) - theta_at(eta - h)) / (2.0 * h);
        assert!((j[(0, 0)] - fd).abs() / fd.abs() < 1e-6, "{} vs {fd}", j[(0, 0)]);
    }

    #[test]
    fn perfect_validation_fit_has_zero_gradient() {
        let ds = Dataset::new(
            (1..=8).map(|i| vec![i as f64]).collect(),
            (1..=8).map(|i| 2.0 * i as f64).collect(),
        )
        .unwrap();
        let split = SplitSpec::new(8, 5, 8, 8).unwrap();
        let eta = ForgettingParams::exponential(0.2).unwrap();
        let g = upper_gradient(&eta, &ds, &split, &[5, 6, 7], &SolverConfig::default()).unwrap();
        assert!(g.gradient[0].abs() < 1e-12);
        assert!(g.valid_loss < 1e-20);
    }

    #[test]
    fn flat_mechanism_has_zero_gradient() {
        // With a single training sample every age is zero, so d alpha / d eta = 0.
        let ds = Dataset::new(vec![vec![1.0], vec![1.0], vec![1.0]], vec![1.0, 3.0, 0.0]).unwrap();
        let split = make_split(3, 1, 1, 1).unwrap();
        let eta = ForgettingParams::exponential(0.7).unwrap();
        let g = upper_gradient(&eta, &ds, &split, &[1], &SolverConfig::new(0.1).unwrap()).unwrap();
        assert_eq!(g.gradient, vec![0.0]);
        assert!(g.valid_loss > 0.0);
    }

    #[test]
    fn rejects_subsets_outside_validation() {
        let (ds, split) = two_point();
        let eta = ForgettingParams::exponential(0.1).unwrap();
        let cfg = SolverConfig::default();
        assert!(upper_gradient(&eta, &ds, &split, &[], &cfg).is_err());
        assert!(upper_gradient(&eta, &ds, &split, &[0], &cfg).is_err());
        assert!(upper_gradient(&eta, &ds, &split, &[3], &cfg).is_err());
        assert!(upper_gradient(&eta, &ds, &split, &[2], &cfg).is_ok());
    }

    /// Toy series whose AR coefficient flips sign halfway through.
    fn regime_toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = vec![0.0f64];
        for t in 1..=n {
            let phi = if t < n / 2 { 0.9 } else { -0.9 };
            let prev = y[t - 1];
            y.push(phi * prev + 0.05 * rng.random_range(-1.7..1.7));
        }
        let rows = (1..=n).map(|t| vec![y[t - 1]]).collect();
        Dataset::new(rows, y[1..].to_vec()).unwrap()
    }

    fn fd_gradient(obj: &HyperObjective, eta: &[f64], h: f64) -> Vec<f64> {
        (0..eta.len())
            .map(|i| {
                let mut up = eta.to_vec();
                let mut down = eta.to_vec();
                up[i] += h;
                down[i] -= h;
                (obj.valid_loss(&up).unwrap() - obj.valid_loss(&down).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn exponential_gradient_matches_finite_differences() {
        let ds = regime_toy(50, 11);
        let split = make_split(50, 35, 10, 5).unwrap();
        let obj = HyperObjective::new(&ds, split, MechanismKind::Exponential, SolverConfig::default());
        let subset: Vec<usize> = split.valid().collect();
        let g = obj.gradient(&[0.2], &subset).unwrap();
        let fd = fd_gradient(&obj, &[0.2], 1e-5);
        assert!((g.gradient[0] - fd[0]).abs() / fd[0].abs() < 1e-5, "{:?} vs {fd:?}", g.gradient);
    }

    #[test]
    fn hypergradient_matches_composed_jacobians() {
        for mode in [HessianMode::Exact, HessianMode::Identity] {
            let ds = regime_toy(60, 4);
            let split = make_split(60, 40, 12, 8).unwrap();
            let cfg = SolverConfig::new(1e-3).unwrap().with_hessian_mode(mode);
            let p = ForgettingParams::new(MechanismKind::MixedDecay, vec![0.05, 0.001, 0.2]).unwrap();
            let subset = [41, 44, 50];
            let fused = upper_gradient(&p, &ds, &split, &subset, &cfg).unwrap();

            let w = weight_vector(&p, &ages_of(&split));
            let sol = solve(&ds, &split, &w, &cfg).unwrap();
            let jac = implicit_jacobian(&sol, &ds, &split, &weight_jacobian(&p, &ages_of(&split)), &cfg).unwrap();
            let grad_theta = DVector::from_fn(1, |_, _| {
                subset
                    .iter()
                    .map(|&t| -2.0 * ds.row(t)[0] * (ds.label(t) - ds.row(t)[0] * sol.theta()[0]))
                    .sum::<f64>()
            });
            let composed = jac.transpose() * grad_theta;
            for (a, b) in fused.gradient.iter().zip(composed.iter()) {
                assert_relative_eq!(*a, *b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn weight_jacobian_and_basis_agree() {
        let split = make_split(20, 12, 4, 4).unwrap();
        let p = ForgettingParams::new(MechanismKind::MixedDecay, vec![0.1, 0.01, 0.3]).unwrap();
        let basis = AgeBasis::new(p.kind(), &ages_of(&split));
        let wv = basis.weights(p.eta()).unwrap();
        assert_eq!(basis.jacobian(&wv), weight_jacobian(&p, &ages_of(&split)));
    }

    fn random_instance(seed: u64) -> (Dataset, SplitSpec, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=3);
        let t_star = rng.random_range(2..=20);
        let n = t_star + 6;
        let rows = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let penalty = rng.random_range(0.01..1.0);
        (Dataset::new(rows, labels).unwrap(), make_split(n, t_star, 4, 2).unwrap(), penalty)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn closed_form_is_a_minimum(seed in 0u64..10_000, dir in prop::collection::vec(-1.0..1.0f64, 3)) {
            let (ds, split, penalty) = random_instance(seed);
            let cfg = SolverConfig::new(penalty).unwrap();
            let ages = ages_of(&split);
            let weights = crate::forgetting::weight_vector(&ForgettingParams::exponential(0.1).unwrap(), &ages);
            let sol = solve(&ds, &split, &weights, &cfg).unwrap();
            let d = ds.dim();
            let norm = dir[..d].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let perturbed: Vec<f64> = sol.theta().iter().zip(&dir).map(|(t, v)| t + 1e-3 * v / norm).collect();
            let at_min = lower_objective(&ds, &split, &weights, sol.theta().as_slice(), &cfg).unwrap();
            let off = lower_objective(&ds, &split, &weights, &perturbed, &cfg).unwrap();
            prop_assert!(at_min <= off);
        }

        #[test]
        fn solve_is_invariant_to_weight_scale(seed in 0u64..10_000, k in 0.01..100.0f64) {
            let (ds, split, penalty) = random_instance(seed);
            let ages = ages_of(&split);
            let weights = crate::forgetting::weight_vector(&ForgettingParams::exponential(0.2).unwrap(), &ages);
            let scaled = WeightVector::new(weights.as_slice().iter().map(|w| k * w).collect()).unwrap();
            let a = solve(&ds, &split, &weights, &SolverConfig::new(penalty).unwrap()).unwrap();
            let b = solve(&ds, &split, &scaled, &SolverConfig::new(k * penalty).unwrap()).unwrap();
            prop_assert!((a.theta() - b.theta()).norm() <= 1e-10 * (1.0 + a.theta().norm()));
        }

        #[test]
        fn identity_mode_gives_descent_direction_for_scaled_identity_gram(
            seed in 0u64..10_000,
            eta in 0.0..1.0f64,
        ) {
            // single standardized feature: G = c I with c > 0
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let rows = (0..n).map(|_| vec![if rng.random_bool(0.5) { 1.0 } else { -1.0 }]).collect();
            let labels = (0..n).map(|t| if t < 15 { 0.5 } else { -0.5 } + rng.random_range(-0.2..0.2)).collect();
            let ds = Dataset::new(rows, labels).unwrap();
            let split = make_split(n, 22, 6, 2).unwrap();
            let subset: Vec<usize> = split.valid().collect();
            let exact = HyperObjective::new(&ds, split, MechanismKind::Exponential, SolverConfig::new(0.1).unwrap());
            let ident = HyperObjective::new(
                &ds, split, MechanismKind::Exponential,
                SolverConfig::new(0.1).unwrap().with_hessian_mode(HessianMode::Identity),
            );
            let ge = exact.gradient(&[eta], &subset).unwrap().gradient[0];
            let gi = ident.gradient(&[eta], &subset).unwrap().gradient[0];
            prop_assert!(ge * gi >= 0.0);
            // -(2G)^-1 = -I / (2c): identity mode rescales the exact gradient by 2c
            let c = exact.solve(&[eta]).unwrap().gram()[(0, 0)];
            prop_assert!((gi - 2.0 * c * ge).abs() <= 1e-9 * gi.abs().max(1e-12));
        }
    }
}
