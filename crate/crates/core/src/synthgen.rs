//! Synthetic autoregressive processes with controlled distribution shift.
//!
//! Every process follows `Y_t = theta_t * Y_{t-1} + eps_t` with
//! `eps_t ~ N(0, noise_sd^2)` and `Y_0 = 0`, for `t = 1..=T`. They differ only
//! in the coefficient path `theta_t`:
//!
//! | kind           | `theta_t`                                                  |
//! |----------------|------------------------------------------------------------|
//! | `FixedRegime`  | `-0.9` for `1000 <= t <= 2000`, `0.9` otherwise            |
//! | `RandomWalk`   | `1 - t / 1500`                                             |
//! | `RandomRegime` | `-0.5` or `0.9`, switching with run-length dependent hazard |
//! | `Stat`         | `-0.5`                                                     |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::features::{build_lag_features, LagTransform};

/// Per-step survival base of the random regime process: a regime that has
/// lasted `r` steps persists one more step with probability `SURVIVAL^r`.
pub const RANDOM_REGIME_SURVIVAL: f64 = 0.999_982_55;

/// Coefficients of regimes 1 and 2 of the random regime process.
pub const RANDOM_REGIME_COEFFICIENTS: [f64; 2] = [-0.5, 0.9];

pub const DEFAULT_LENGTH: usize = 3000;
pub const DEFAULT_NOISE_SD: f64 = 0.05;

/// Number of autoregressive lags used as features.
pub const AR_LAGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    FixedRegime,
    RandomWalk,
    RandomRegime,
    Stat,
}

impl DgpKind {
    pub const ALL: [DgpKind; 4] = [
        DgpKind::FixedRegime,
        DgpKind::RandomWalk,
        DgpKind::RandomRegime,
        DgpKind::Stat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::FixedRegime => "fixed_regime",
            DgpKind::RandomWalk => "random_walk",
            DgpKind::RandomRegime => "random_regime",
            DgpKind::Stat => "stat",
        }
    }

    /// Deterministic coefficient at 1-based time `t`; `None` for the random regime process.
    pub fn coefficient(self, t: usize) -> Option<f64> {
        match self {
            DgpKind::FixedRegime => Some(if (1000..=2000).contains(&t) { -0.9 } else { 0.9 }),
            DgpKind::RandomWalk => Some(1.0 - t as f64 / 1500.0),
            DgpKind::Stat => Some(-0.5),
            DgpKind::RandomRegime => None,
        }
    }
}

impl fmt::Display for DgpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DgpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
        match key.as_str() {
            "fixedregime" => Ok(DgpKind::FixedRegime),
            "randomwalk" => Ok(DgpKind::RandomWalk),
            "randomregime" => Ok(DgpKind::RandomRegime),
            "stat" | "stationary" => Ok(DgpKind::Stat),
            _ => Err(Error::InvalidParameter(format!("unknown data-generating process `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub kind: DgpKind,
    pub length: usize,
    pub noise_sd: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self::new(DgpKind::Stat)
    }
}

impl DgpConfig {
    pub fn new(kind: DgpKind) -> Self {
        Self {
            kind,
            length: DEFAULT_LENGTH,
            noise_sd: DEFAULT_NOISE_SD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sd {} must be positive", self.noise_sd)));
        }
        if self.length < AR_LAGS + 1 {
            return Err(Error::InvalidParameter(format!(
                "series length {} is shorter than the {} samples needed for {AR_LAGS} lags",
                self.length,
                AR_LAGS + 1
            )));
        }
        Ok(())
    }
}

/// Regime indicator path of the random regime process.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    /// Regime index (1 or 2) at each time step.
    pub indicators: Vec<u8>,
    pub coefficients: Vec<f64>,
    /// Length of the current run at each time step, starting from 1.
    pub run_lengths: Vec<u64>,
}

impl RegimePath {
    /// Simulates `len` steps; the first regime is drawn uniformly.
    pub fn simulate<R: Rng>(len: usize, rng: &mut R) -> Self {
        let mut indicators = Vec::with_capacity(len);
        let mut run_lengths = Vec::with_capacity(len);
        let mut regime: u8 = if rng.random_bool(0.5) { 1 } else { 2 };
        let mut run: u64 = 1;
        for t in 0..len {
            if t > 0 {
                let survive = RANDOM_REGIME_SURVIVAL.powf(run as f64);
                if rng.random::<f64>() < survive {
                    run += 1;
                } else {
                    regime = 3 - regime;
                    run = 1;
                }
            }
            indicators.push(regime);
            run_lengths.push(run);
        }
        let coefficients = indicators
            .iter()
            .map(|i| RANDOM_REGIME_COEFFICIENTS[*i as usize - 1])
            .collect();
        Self {
            indicators,
            coefficients,
            run_lengths,
        }
    }

    /// Number of regime changes along the path.
    pub fn switches(&self) -> usize {
        self.indicators.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

/// A simulated series together with its latent coefficient path.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub kind: DgpKind,
    /// `Y_1..Y_T`.
    pub values: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// Regime index per step: 1/2 for the regime processes, 0 otherwise.
    pub regimes: Vec<u8>,
}

impl SyntheticSeries {
    /// CSV with columns `t, y, theta_t, regime`, `t` starting at 1.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "y", "theta_t", "regime"])?;
        for (i, ((y, theta), regime)) in self.values.iter().zip(&self.coefficients).zip(&self.regimes).enumerate() {
            w.write_record([
                (i + 1).to_string(),
                format!("{y:.16e}"),
                format!("{theta:.16e}"),
                regime.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn regime_label(kind: DgpKind, theta: f64) -> u8 {
    match kind {
        DgpKind::FixedRegime => if theta < 0.0 { 2 } else { 1 },
        DgpKind::RandomRegime => if theta == RANDOM_REGIME_COEFFICIENTS[0] { 1 } else { 2 },
        DgpKind::RandomWalk | DgpKind::Stat => 0,
    }
}

fn simulate(cfg: &DgpConfig, rng: &mut ChaCha8Rng, mut noise: impl FnMut(&mut ChaCha8Rng) -> f64) -> SyntheticSeries {
    let coefficients: Vec<f64> = match cfg.kind {
        DgpKind::RandomRegime => RegimePath::simulate(cfg.length, rng).coefficients,
        kind => (1..=cfg.length).map(|t| kind.coefficient(t).expect("deterministic path")).collect(),
    };
    let mut values = Vec::with_capacity(cfg.length);
    let mut prev = 0.0;
    for theta in &coefficients {
        let y = theta * prev + noise(rng);
        values.push(y);
        prev = y;
    }
    let regimes = coefficients.iter().map(|th| regime_label(cfg.kind, *th)).collect();
    SyntheticSeries {
        kind: cfg.kind,
        values,
        coefficients,
        regimes,
    }
}

/// Simulates one series; identical `(cfg, seed)` pairs give identical paths.
pub fn generate(cfg: &DgpConfig, seed: u64) -> Result<SyntheticSeries> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(simulate(cfg, &mut rng, |r| normal.sample(r)))
}

/// AR(3) regression samples: features `(Y_{t-1}, Y_{t-2}, Y_{t-3})`, label `Y_t`, for `t = 4..=T`.
pub fn to_supervised(values: &[f64]) -> Result<Dataset> {
    build_lag_features(values, AR_LAGS, LagTransform::Identity)
}

/// Mean regime duration implied by the survival law, `sum_n prod_{r<=n} SURVIVAL^r`.
pub fn expected_regime_duration() -> f64 {
    let log_p = RANDOM_REGIME_SURVIVAL.ln();
    let mut total = 0.0;
    let mut log_survival = 0.0;
    for n in 0u64.. {
        if n > 0 {
            log_survival += log_p * n as f64;
        }
        let s = log_survival.exp();
        total += s;
        if s < 1e-18 {
            break;
        }
    }
    total
}
