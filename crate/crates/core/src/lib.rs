//! Time-series prediction under distribution shift by weighted empirical risk
//! minimization, with sample weights produced by a parametric forgetting
//! mechanism whose parameters are learned through implicit differentiation of
//! the ridge-regression solution.

pub mod data;
pub mod error;
pub mod forgetting;
mod linalg;
pub mod bilevel;
pub mod ridge;
pub mod baselines;
pub mod evaluation;
pub mod harness;
pub mod synthgen;

pub use data::{ages_of, make_split, AgeVector, Dataset, LossKind, SplitSpec, WeightVector};
pub use error::{Error, Result};
pub use forgetting::{ForgettingParams, MechanismKind};
pub use ridge::{HessianMode, RidgeSolution, SolverConfig};
