//! Supervised datasets built from raw series.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Transformation applied to series values before lagging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagTransform {
    #[default]
    Identity,
    Absolute,
}

impl LagTransform {
    fn apply(self, v: f64) -> f64 {
        match self {
            LagTransform::Identity => v,
            LagTransform::Absolute => v.abs(),
        }
    }
}

/// Label `f(Y_t)` with features `(f(Y_{t-1}), ..., f(Y_{t-lags}))`, no intercept.
pub fn build_lag_features(series: &[f64], lags: usize, transform: LagTransform) -> Result<Dataset> {
    if lags == 0 {
        return Err(Error::InvalidParameter("at least one lag is required".into()));
    }
    if series.len() <= lags {
        return Err(Error::InvalidDataset(format!(
            "series of length {} is too short for {lags} lags (need at least {})",
            series.len(),
            lags + 1
        )));
    }
    let v: Vec<f64> = series.iter().map(|x| transform.apply(*x)).collect();
    let n = v.len() - lags;
    let mut features = Vec::with_capacity(n * lags);
    for t in lags..v.len() {
        features.extend((1..=lags).map(|k| v[t - k]));
    }
    Dataset::from_flat(features, v[lags..].to_vec(), lags)
}

/// Dated observations of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct DatedSeries {
    pub name: String,
    pub dates: Vec<String>,
    pub values: Vec<f64>,
}

impl DatedSeries {
    pub fn new(name: impl Into<String>, dates: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if dates.len() != values.len() {
            return Err(Error::InvalidDataset(format!(
                "series `{name}` has {} dates but {} values",
                dates.len(),
                values.len()
            )));
        }
        Ok(Self { name, dates, values })
    }
}

/// Three-factor regression sample set.
///
/// Label: excess return `Y_t - RF_t`. Features: `(1, MR_t, SB_t, HL_t)`.
pub fn build_factor_dataset(
    series: &DatedSeries,
    factors: [&DatedSeries; 3],
    risk_free: &DatedSeries,
) -> Result<Dataset> {
    let n = series.values.len();
    for other in factors.iter().copied().chain(std::iter::once(risk_free)) {
        if other.values.len() != n {
            return Err(Error::InvalidDataset(format!(
                "series `{}` has {} observations but `{}` has {n}",
                other.name,
                other.values.len(),
                series.name
            )));
        }
        if let Some(i) = (0..n).find(|&i| other.dates[i] != series.dates[i]) {
            return Err(Error::InvalidDataset(format!(
                "dates misaligned at row {i}: `{}` has {} but `{}` has {}",
                series.name, series.dates[i], other.name, other.dates[i]
            )));
        }
    }
    let mut features = Vec::with_capacity(n * 4);
    let mut labels = Vec::with_capacity(n);
    for t in 0..n {
        features.extend([1.0, factors[0].values[t], factors[1].values[t], factors[2].values[t]]);
        labels.push(series.values[t] - risk_free.values[t]);
    }
    Dataset::from_flat(features, labels, 4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WeightVector;
    use crate::ridge::{solve, SolverConfig};
    use approx::assert_relative_eq;

    #[test]
    fn absolute_lags() {
        let ds = build_lag_features(&[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0], 5, LagTransform::Absolute).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.row(0), &[1.0; 5]);
        assert_eq!(ds.label(0), 1.0);

        let ds = build_lag_features(&[1.0, -2.0, 3.0], 1, LagTransform::Absolute).unwrap();
        assert_eq!(ds.rows().collect::<Vec<_>>(), vec![&[1.0][..], &[2.0][..]]);
        assert_eq!(ds.labels(), &[2.0, 3.0]);

        let zero = build_lag_features(&[0.0; 9], 5, LagTransform::Absolute).unwrap();
        assert!(zero.labels().iter().all(|v| *v == 0.0));
        assert!(zero.rows().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn too_short_for_lags() {
        assert!(build_lag_features(&[1.0; 5], 5, LagTransform::Absolute).is_err());
        assert!(build_lag_features(&[1.0; 5], 0, LagTransform::Identity).is_err());
    }

    fn dated(name: &str, values: &[f64]) -> DatedSeries {
        let dates = (0..values.len()).map(|i| format!("2020-01-{:02}", i + 1)).collect();
        DatedSeries::new(name, dates, values.to_vec()).unwrap()
    }

    #[test]
    fn factor_dataset_layout() {
        let y = dated("y", &[0.02, -0.01]);
        let (mr, sb, hl) = (dated("mr", &[0.01, 0.02]), dated("sb", &[0.0, 0.5]), dated("hl", &[1.0, 2.0]));
        let rf = dated("rf", &[0.001, 0.001]);
        let ds = build_factor_dataset(&y, [&mr, &sb, &hl], &rf).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.row(1), &[1.0, 0.02, 0.5, 2.0]);
        assert_relative_eq!(ds.label(0), 0.019);
    }

    #[test]
    fn zero_factors_regress_on_intercept() {
        let y = dated("y", &[1.0, 2.0, 4.0, 0.0]);
        let z = dated("z", &[0.0; 4]);
        let ds = build_factor_dataset(&y, [&z, &z, &z], &z).unwrap();
        let split = crate::data::SplitSpec::new(4, 3, 4, 4).unwrap();
        let w = WeightVector::new(vec![1.0, 1.0, 2.0]).unwrap();
        let sol = solve(&ds, &split, &w, &SolverConfig::new(1e-3).unwrap()).unwrap();
        // intercept-only weighted mean, shrunk by the penalty: sum(w y) / (sum(w) + lambda)
        assert_relative_eq!(sol.theta()[0], 11.0 / 4.001, max_relative = 1e-12);
    }

    #[test]
    fn excess_returns_of_risk_free_are_zero() {
        let rf = dated("rf", &[0.01, 0.02, 0.03]);
        let f = dated("f", &[0.3, -0.1, 0.2]);
        let ds = build_factor_dataset(&rf, [&f, &f, &f], &rf).unwrap();
        assert!(ds.labels().iter().all(|v| *v == 0.0));
        let split = crate::data::SplitSpec::new(3, 2, 3, 3).unwrap();
        let sol = solve(&ds, &split, &WeightVector::ones(2), &SolverConfig::new(0.1).unwrap()).unwrap();
        assert!(sol.theta().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_sample_factor_fit_matches_hand_solution() {
        // X = [[1, 1, 0, 0], [1, 0, 1, 0]], y = [1, 3], lambda = 1:
        // (X'X + I) theta = X'y with X'y = [4, 1, 3, 0]  =>  theta = [1, 0, 1, 0]
        let y = dated("y", &[1.0, 3.0, 0.0]);
        let mr = dated("mr", &[1.0, 0.0, 0.0]);
        let sb = dated("sb", &[0.0, 1.0, 0.0]);
        let hl = dated("hl", &[0.0, 0.0, 0.0]);
        let rf = dated("rf", &[0.0, 0.0, 0.0]);
        let ds = build_factor_dataset(&y, [&mr, &sb, &hl], &rf).unwrap();
        let split = crate::data::SplitSpec::new(3, 2, 3, 3).unwrap();
        let sol = solve(&ds, &split, &WeightVector::ones(2), &SolverConfig::new(1.0).unwrap()).unwrap();
        for (got, want) in sol.theta().iter().zip([1.0, 0.0, 1.0, 0.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn misaligned_dates_are_rejected() {
        let y = dated("y", &[1.0, 2.0]);
        let mut rf = dated("rf", &[0.0, 0.0]);
        rf.dates[1] = "2020-02-01".into();
        let err = build_factor_dataset(&y, [&y, &y, &y], &rf).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }
}
