//! CSG-EMOS link functions and minimum-CRPS coefficient estimation.
//!
//! The dual-resolution link is
//!
//! ```text
//! μ  = a² + b_H² f̄_H + b_L² f̄_L
//! σ² = c² + d² f̄
//! ```
//!
//! where `f̄_H`, `f̄_L` are the high- and low-resolution group means and `f̄` the
//! mean over all members. `(μ, σ)` are turned into gamma shape and scale, and the
//! shift `δ` is a free positive parameter.

use serde::{Deserialize, Serialize};

use crate::dist::{csg_crps, moments_to_params, CsgParams};
use crate::ensemble::{EnsembleForecast, ForecastCase, MixtureConfig, Resolution};
use crate::error::{Error, Result};
use crate::simplex::{self, SimplexOptions};

/// Floor applied to the linked mean and standard deviation.
pub const MOMENT_FLOOR: f64 = 1e-8;
/// The linked standard deviation is kept above this fraction of the mean, bounding κ by 1e6.
pub const MIN_RELATIVE_SD: f64 = 1e-3;
/// Training cases required per free coefficient.
pub const CASES_PER_PARAMETER: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmosCoefficients {
    pub a: f64,
    pub b_high: f64,
    pub b_low: f64,
    pub c: f64,
    pub d: f64,
    pub delta: f64,
}

impl EmosCoefficients {
    /// Default starting point for `mixture`, splitting the mean weight between active groups.
    pub fn initial(mixture: &MixtureConfig) -> Self {
        let b = if mixture.is_pure_high() || mixture.is_pure_low() {
            0.7
        } else {
            (0.49f64 / 2.0).sqrt()
        };
        EmosCoefficients {
            a: 0.3,
            b_high: 0.0,
            b_low: 0.0,
            c: 0.5,
            d: 0.5,
            delta: 0.5,
        }
        .with_b(mixture, b, b)
    }

    fn with_b(mut self, mixture: &MixtureConfig, b_high: f64, b_low: f64) -> Self {
        self.b_high = if mixture.m_high > 0 { b_high } else { 0.0 };
        self.b_low = if mixture.m_low > 0 { b_low } else { 0.0 };
        self
    }

    /// Zeroes the coefficient of any group absent from `mixture`.
    pub fn frozen_for(self, mixture: &MixtureConfig) -> Self {
        let (h, l) = (self.b_high, self.b_low);
        self.with_b(mixture, h, l)
    }

    /// Same link outputs with every squared coefficient made non-negative.
    pub fn canonical(self) -> Self {
        EmosCoefficients {
            a: self.a.abs(),
            b_high: self.b_high.abs(),
            b_low: self.b_low.abs(),
            c: self.c.abs(),
            d: self.d.abs(),
            delta: self.delta,
        }
    }

    fn to_vector(self, mixture: &MixtureConfig) -> Vec<f64> {
        let mut v = vec![self.a];
        if mixture.m_high > 0 {
            v.push(self.b_high);
        }
        if mixture.m_low > 0 {
            v.push(self.b_low);
        }
        v.extend([self.c, self.d, self.delta.max(crate::dist::PARAM_FLOOR).ln()]);
        v
    }

    fn from_vector(v: &[f64], mixture: &MixtureConfig) -> Self {
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("parameter vector length matches mixture");
        let a = next();
        let b_high = if mixture.m_high > 0 { next() } else { 0.0 };
        let b_low = if mixture.m_low > 0 { next() } else { 0.0 };
        let c = next();
        let d = next();
        let delta = next().exp();
        EmosCoefficients {
            a,
            b_high,
            b_low,
            c,
            d,
            delta,
        }
    }
}

/// Number of coefficients the optimiser moves for `mixture` (5 for pure, 6 for mixed).
pub fn free_parameter_count(mixture: &MixtureConfig) -> usize {
    4 + usize::from(mixture.m_high > 0) + usize::from(mixture.m_low > 0)
}

/// Gamma mean and standard deviation from the linear predictors, floored.
fn floored_moments(mean: f64, var: f64) -> (f64, f64) {
    let mu = if mean.is_finite() { mean.max(MOMENT_FLOOR) } else { MOMENT_FLOOR };
    let sd_floor = MOMENT_FLOOR.max(MIN_RELATIVE_SD * mu);
    let sd = if var.is_finite() { var.max(0.0).sqrt() } else { sd_floor };
    if sd < sd_floor || mu == MOMENT_FLOOR && mean != MOMENT_FLOOR {
        log::trace!("flooring linked moments mean={mean} var={var}");
    }
    (mu, sd.max(sd_floor))
}

fn params_from(mean: f64, var: f64, delta: f64) -> CsgParams {
    let (mu, sd) = floored_moments(mean, var);
    let g = moments_to_params(mu, sd).expect("floored moments are positive");
    CsgParams::clamped(g.shape(), g.scale(), delta)
}

/// Dual-resolution link. Missing groups should be passed as mean 0.
pub fn link(coeffs: &EmosCoefficients, f_high_mean: f64, f_low_mean: f64, f_overall_mean: f64) -> CsgParams {
    let EmosCoefficients {
        a,
        b_high,
        b_low,
        c,
        d,
        delta,
    } = *coeffs;
    let mean = a * a + b_high * b_high * f_high_mean + b_low * b_low * f_low_mean;
    let var = c * c + d * d * f_overall_mean;
    params_from(mean, var, delta)
}

/// Link coefficients for `K` exchangeable groups, one `b_k` per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoefficients {
    pub a: f64,
    pub b: Vec<f64>,
    pub c: f64,
    pub d: f64,
    pub delta: f64,
}

/// `μ = a² + Σ b_k² f̄_k`, `σ² = c² + d² f̄`.
pub fn general_link(coeffs: &GroupCoefficients, group_means: &[f64], overall_mean: f64) -> Result<CsgParams> {
    if coeffs.b.len() != group_means.len() {
        return Err(Error::Arity {
            coefficients: coeffs.b.len(),
            groups: group_means.len(),
        });
    }
    let mean = coeffs.a * coeffs.a
        + coeffs
            .b
            .iter()
            .zip(group_means)
            .map(|(b, f)| b * b * f)
            .sum::<f64>();
    let var = coeffs.c * coeffs.c + coeffs.d * coeffs.d * overall_mean;
    Ok(params_from(mean, var, coeffs.delta))
}

/// Per-member link: every member is its own group.
pub fn member_link(coeffs: &GroupCoefficients, members: &[f64]) -> Result<CsgParams> {
    if members.is_empty() {
        return Err(Error::InvalidForecast("no members".into()));
    }
    let overall = members.iter().sum::<f64>() / members.len() as f64;
    general_link(coeffs, members, overall)
}

/// The ensemble statistics the dual-resolution link consumes, plus the observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingCase {
    pub high_mean: f64,
    pub low_mean: f64,
    pub overall_mean: f64,
    pub observation: f64,
}

impl TrainingCase {
    pub fn from_forecast(f: &EnsembleForecast, observation: f64) -> Self {
        let m = f.group_means();
        TrainingCase {
            high_mean: m.get(Resolution::High).unwrap_or(0.0),
            low_mean: m.get(Resolution::Low).unwrap_or(0.0),
            overall_mean: m.overall,
            observation,
        }
    }

    pub fn from_case(case: &ForecastCase) -> Self {
        Self::from_forecast(&case.forecast, case.observation)
    }

    pub fn predictive(&self, coeffs: &EmosCoefficients) -> CsgParams {
        link(coeffs, self.high_mean, self.low_mean, self.overall_mean)
    }
}

pub fn predict(coeffs: &EmosCoefficients, f: &EnsembleForecast) -> CsgParams {
    TrainingCase::from_forecast(f, 0.0).predictive(coeffs)
}

fn mean_crps(coeffs: &EmosCoefficients, cases: &[TrainingCase]) -> f64 {
    let total: f64 = cases
        .iter()
        .map(|c| csg_crps(&c.predictive(coeffs), c.observation))
        .sum();
    total / cases.len() as f64
}

/// Mean CRPS of the linked CSG forecasts over a training window.
pub fn mean_crps_objective(coeffs: &EmosCoefficients, window: &[ForecastCase]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::insufficient(1, 0, "cases in training window"));
    }
    let cases: Vec<TrainingCase> = window.iter().map(TrainingCase::from_case).collect();
    Ok(mean_crps(coeffs, &cases))
}

/// Same as [`mean_crps_objective`] on precomputed ensemble statistics.
pub fn mean_crps_summaries(coeffs: &EmosCoefficients, cases: &[TrainingCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::insufficient(1, 0, "cases in training window"));
    }
    Ok(mean_crps(coeffs, cases))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub coefficients: EmosCoefficients,
    pub train_mean_crps: f64,
    pub n_cases: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub simplex: SimplexOptions,
    pub cases_per_parameter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            simplex: SimplexOptions::default(),
            cases_per_parameter: CASES_PER_PARAMETER,
        }
    }
}

impl FitOptions {
    /// For starts near the optimum, e.g. the previous day's fit: a smaller simplex, no
    /// restart and looser stopping tolerances.
    pub fn warm() -> Self {
        FitOptions {
            simplex: SimplexOptions {
                initial_step: 0.05,
                restarts: 0,
                improvement_tol: 1e-6,
                spread_tol: 1e-4,
                ..SimplexOptions::default()
            },
            cases_per_parameter: CASES_PER_PARAMETER,
        }
    }
}

/// Estimates coefficients by minimising the mean CRPS over `window`.
pub fn fit(window: &[ForecastCase], mixture: &MixtureConfig, init: Option<EmosCoefficients>) -> Result<FitReport> {
    let cases: Vec<TrainingCase> = window.iter().map(TrainingCase::from_case).collect();
    fit_summaries(&cases, mixture, init, &FitOptions::default())
}

pub fn fit_summaries(
    cases: &[TrainingCase],
    mixture: &MixtureConfig,
    init: Option<EmosCoefficients>,
    options: &FitOptions,
) -> Result<FitReport> {
    let needed = options.cases_per_parameter * free_parameter_count(mixture);
    if cases.len() < needed {
        return Err(Error::insufficient(
            needed,
            cases.len(),
            format!("training cases for mixture {mixture}"),
        ));
    }
    let start = init
        .unwrap_or_else(|| EmosCoefficients::initial(mixture))
        .frozen_for(mixture);
    let x0 = start.to_vector(mixture);
    let result = simplex::minimize(
        |x| mean_crps(&EmosCoefficients::from_vector(x, mixture), cases),
        &x0,
        &options.simplex,
    );
    let coefficients = EmosCoefficients::from_vector(&result.x, mixture).canonical();
    Ok(FitReport {
        coefficients,
        train_mean_crps: result.value,
        n_cases: cases.len(),
        iterations: result.iterations,
        converged: result.converged,
    })
}
