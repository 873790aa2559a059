//! Parametric forgetting mechanisms.
//!
//! Both supported families are log-linear in their parameters:
//!
//! ```text
//! alpha(age; eta) = exp(-<phi(age), eta>)
//! ```
//!
//! with `phi(age) = [age]` for exponential decay and
//! `phi(age) = [age, age^2, ln(age + 1)]` for mixed decay. The Jacobian with
//! respect to `eta` is therefore `-phi(age) * alpha(age; eta)`, and
//! `alpha(0; eta) = 1` for every `eta`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{AgeVector, WeightVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    /// `exp(-eta1 * age)`
    Exponential,
    /// `exp(-eta1 * age - eta2 * age^2 - eta3 * ln(age + 1))`
    MixedDecay,
}

impl MechanismKind {
    /// Length of the parameter vector.
    pub fn dim(self) -> usize {
        match self {
            MechanismKind::Exponential => 1,
            MechanismKind::MixedDecay => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Exponential => "exponential",
            MechanismKind::MixedDecay => "mixed_decay",
        }
    }

    fn basis_into(self, age: f64, out: &mut [f64]) {
        match self {
            MechanismKind::Exponential => out[0] = age,
            MechanismKind::MixedDecay => {
                out[0] = age;
                out[1] = age * age;
                out[2] = age.ln_1p();
            }
        }
    }

    /// Evaluates the mechanism at a real-valued age without validating `eta`.
    pub fn eval(self, eta: &[f64], age: f64) -> f64 {
        let mut phi = [0.0; 3];
        self.basis_into(age, &mut phi);
        let exponent: f64 = phi[..self.dim()].iter().zip(eta).map(|(p, e)| p * e).sum();
        (-exponent).exp()
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(MechanismKind::Exponential),
            "mixed_decay" | "mixed" => Ok(MechanismKind::MixedDecay),
            other => Err(Error::InvalidParameter(format!(
                "unknown forgetting mechanism `{other}`"
            ))),
        }
    }
}

/// A mechanism family together with its parameter vector `eta`.
///
/// Parameters are kept in the nonnegative orthant, which bounds every weight
/// by one and makes weights non-increasing in age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingParams {
    kind: MechanismKind,
    eta: Vec<f64>,
}

impl ForgettingParams {
    pub fn new(kind: MechanismKind, eta: Vec<f64>) -> Result<Self> {
        if eta.len() != kind.dim() {
            return Err(Error::DimensionMismatch {
                context: "forgetting parameters",
                expected: kind.dim(),
                got: eta.len(),
            });
        }
        if let Some(e) = eta.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{kind} parameter {e} must be finite and nonnegative"
            )));
        }
        Ok(Self { kind, eta })
    }

    /// Builds parameters after clamping every entry at zero.
    pub fn projected(kind: MechanismKind, mut eta: Vec<f64>) -> Result<Self> {
        project_nonnegative(&mut eta);
        Self::new(kind, eta)
    }

    pub fn zeros(kind: MechanismKind) -> Self {
        Self {
            kind,
            eta: vec![0.0; kind.dim()],
        }
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        Self::new(MechanismKind::Exponential, vec![rate])
    }

    pub fn kind(&self) -> MechanismKind {
        self.kind
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }
}

pub(crate) fn project_nonnegative(eta: &mut [f64]) {
    for e in eta.iter_mut() {
        if *e < 0.0 {
            *e = 0.0;
        }
    }
}

/// Weight of a sample of the given age.
pub fn weight(params: &ForgettingParams, age: u64) -> f64 {
    params.kind.eval(&params.eta, age as f64)
}

pub fn weight_vector(params: &ForgettingParams, ages: &AgeVector) -> WeightVector {
    AgeBasis::new(params.kind, ages)
        .weights(params.eta())
        .expect("nonnegative finite parameters give weights in [0, 1]")
}

/// `|ages| x dim(eta)` matrix of partial derivatives `d alpha(age_tau) / d eta_i`.
pub fn weight_jacobian(params: &ForgettingParams, ages: &AgeVector) -> DMatrix<f64> {
    let basis = AgeBasis::new(params.kind, ages);
    let w = basis
        .weights(params.eta())
        .expect("nonnegative finite parameters give weights in [0, 1]");
    basis.jacobian(&w)
}

/// Precomputed basis features `phi(age)` for a fixed age vector.
///
/// The bi-level optimizer evaluates the same ages thousands of times, so the
/// logarithms and squares are computed once here.
#[derive(Debug, Clone)]
pub struct AgeBasis {
    kind: MechanismKind,
    phi: Vec<f64>,
}

impl AgeBasis {
    pub fn new(kind: MechanismKind, ages: &AgeVector) -> Self {
        let k = kind.dim();
        let mut phi = vec![0.0; ages.len() * k];
        for (age, out) in ages.as_slice().iter().zip(phi.chunks_exact_mut(k)) {
            kind.basis_into(*age as f64, out);
        }
        Self { kind, phi }
    }

    pub fn kind(&self) -> MechanismKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.phi.len() / self.kind.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn phi(&self, tau: usize) -> &[f64] {
        let k = self.kind.dim();
        &self.phi[tau * k..(tau + 1) * k]
    }

    /// Evaluates the weights; `eta` is used as given (no projection).
    pub fn weights(&self, eta: &[f64]) -> Result<WeightVector> {
        let k = self.kind.dim();
        let w = self
            .phi
            .chunks_exact(k)
            .map(|p| {
                let e: f64 = p.iter().zip(eta).map(|(a, b)| a * b).sum();
                (-e).exp()
            })
            .collect();
        WeightVector::new(w).map_err(|_| Error::NonFinite("forgetting weights"))
    }

    /// Jacobian of the weights given their values at the same `eta`.
    pub fn jacobian(&self, weights: &WeightVector) -> DMatrix<f64> {
        let k = self.kind.dim();
        let w = weights.as_slice();
        DMatrix::from_fn(w.len(), k, |tau, i| -self.phi[tau * k + i] * w[tau])
    }
}
