//! Gamma and censored shifted gamma (CSG) distributions and their CRPS.
//!
//! A CSG variable is `max(0, X - δ)` with `X ~ Γ(κ, θ)`: its CDF is
//! `G_{κ,θ}(x + δ)` for `x ≥ 0` and zero below, so it carries a point mass
//! `G_{κ,θ}(δ)` at zero.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;
use crate::special::{gamma_p, gamma_p_next_with_ln_gamma, gamma_pq_with_ln_gamma, gamma_q, ln_gamma};

/// Lower bound applied to κ, θ and δ when parameters come out of an optimiser.
pub const PARAM_FLOOR: f64 = 1e-8;

/// Absolute tolerance of [`csg_crps_quadrature`].
pub const QUADRATURE_TOLERANCE: f64 = 1e-10;

/// Survival level beyond which the quadrature domain is truncated.
const TAIL_CUTOFF: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    shape: f64,
    scale: f64,
}

impl GammaParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(Error::domain(format!(
                "gamma parameters must be positive and finite (shape={shape}, scale={scale})"
            )));
        }
        Ok(GammaParams { shape, scale })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn sd(&self) -> f64 {
        self.shape.sqrt() * self.scale
    }
}

/// Maps a mean and standard deviation to shape `μ²/σ²` and scale `σ²/μ`.
pub fn moments_to_params(mean: f64, sd: f64) -> Result<GammaParams> {
    if !(mean > 0.0 && sd > 0.0) {
        return Err(Error::domain(format!(
            "mean and sd must be positive (mean={mean}, sd={sd})"
        )));
    }
    let var = sd * sd;
    GammaParams::new(mean * mean / var, var / mean)
}

pub fn gamma_pdf(p: &GammaParams, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let (k, t) = (p.shape, p.scale);
    ((k - 1.0) * x.ln() - x / t - k * t.ln() - ln_gamma(k)).exp()
}

pub fn gamma_cdf(p: &GammaParams, x: f64) -> f64 {
    gamma_p(p.shape, x / p.scale)
}

fn gamma_sf(p: &GammaParams, x: f64) -> f64 {
    gamma_q(p.shape, x / p.scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsgParams {
    gamma: GammaParams,
    shift: f64,
}

impl CsgParams {
    pub fn new(shape: f64, scale: f64, shift: f64) -> Result<Self> {
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(Error::domain(format!("shift must be positive, got {shift}")));
        }
        Ok(CsgParams {
            gamma: GammaParams::new(shape, scale)?,
            shift,
        })
    }

    pub fn from_gamma(gamma: GammaParams, shift: f64) -> Result<Self> {
        Self::new(gamma.shape, gamma.scale, shift)
    }

    /// Builds parameters with κ, θ and δ floored at [`PARAM_FLOOR`].
    pub fn clamped(shape: f64, scale: f64, shift: f64) -> Self {
        let fix = |v: f64, name: &str| {
            if v.is_finite() && v >= PARAM_FLOOR {
                v
            } else {
                log::trace!("clamping {name}={v} to {PARAM_FLOOR}");
                PARAM_FLOOR
            }
        };
        CsgParams {
            gamma: GammaParams {
                shape: fix(shape, "shape"),
                scale: fix(scale, "scale"),
            },
            shift: fix(shift, "shift"),
        }
    }

    pub fn shape(&self) -> f64 {
        self.gamma.shape
    }

    pub fn scale(&self) -> f64 {
        self.gamma.scale
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn gamma(&self) -> GammaParams {
        self.gamma
    }

    /// Mean of the underlying (uncensored, unshifted) gamma.
    pub fn gamma_mean(&self) -> f64 {
        self.gamma.mean()
    }

    pub fn gamma_sd(&self) -> f64 {
        self.gamma.sd()
    }

    /// Probability of exactly zero precipitation.
    pub fn point_mass_at_zero(&self) -> f64 {
        gamma_cdf(&self.gamma, self.shift)
    }

    /// Quantile by bisection on the CDF; returns 0 inside the point mass.
    pub fn quantile(&self, prob: f64) -> f64 {
        if prob <= self.point_mass_at_zero() {
            return 0.0;
        }
        let mut hi = self.gamma_mean() + self.gamma_sd();
        while csg_cdf(self, hi) < prob {
            hi *= 2.0;
            if !hi.is_finite() {
                return f64::INFINITY;
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if csg_cdf(self, mid) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi.max(1e-300) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

pub fn csg_cdf(p: &CsgParams, x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        gamma_cdf(&p.gamma, x + p.shift)
    }
}

/// Closed-form CRPS of a CSG forecast for observation `y` (Scheuerer & Hamill 2015).
///
/// With `ỹ = (y + δ)/θ`, `c̃ = δ/θ` and `F_a` the unit-scale gamma CDF of shape `a`:
///
/// ```text
/// CRPS = θ ỹ (2F_κ(ỹ) − 1) − θ c̃ F_κ(c̃)²
///      + θ κ (1 + 2F_κ(c̃)F_{κ+1}(c̃) − F_κ(c̃)² − 2F_{κ+1}(ỹ))
///      − (θ κ / π) B(½, κ + ½) (1 − F_{2κ}(2c̃))
/// ```
pub fn csg_crps(p: &CsgParams, y: f64) -> f64 {
    if y < 0.0 {
        return -y + csg_crps(p, 0.0);
    }
    let k = p.gamma.shape;
    let theta = p.gamma.scale;
    let y_t = (y + p.shift) / theta;
    let c_t = p.shift / theta;

    // Two log-gamma evaluations serve every term: Γ(κ+1) = κΓ(κ) and the duplication
    // formula ln Γ(2κ) = (2κ−1) ln 2 − ½ ln π + ln Γ(κ) + ln Γ(κ+½).
    let lg_k = ln_gamma(k);
    let lg_k_half = ln_gamma(k + 0.5);
    let lg_k1 = lg_k + k.ln();
    let lg_2k = (2.0 * k - 1.0) * LN_2 - 0.5 * PI.ln() + lg_k + lg_k_half;

    let fk_c = gamma_pq_with_ln_gamma(k, c_t, lg_k).0;
    let fk1_c = gamma_p_next_with_ln_gamma(k, c_t, fk_c, lg_k1);
    let (fk_y, fk1_y) = if y == 0.0 {
        (fk_c, fk1_c)
    } else {
        let fk_y = gamma_pq_with_ln_gamma(k, y_t, lg_k).0;
        (fk_y, gamma_p_next_with_ln_gamma(k, y_t, fk_y, lg_k1))
    };
    let f2k_2c = gamma_pq_with_ln_gamma(2.0 * k, 2.0 * c_t, lg_2k).1;
    // B(½, κ+½) = Γ(½)Γ(κ+½)/Γ(κ+1)
    let beta_half = (0.5 * PI.ln() + lg_k_half - lg_k1).exp();

    theta * y_t * (2.0 * fk_y - 1.0) - theta * c_t * fk_c * fk_c
        + theta * k * (1.0 + 2.0 * fk_c * fk1_c - fk_c * fk_c - 2.0 * fk1_y)
        - theta * k / PI * beta_half * f2k_2c
}

/// CRPS by adaptive quadrature of `∫ (F(t) − 1{t ≥ y})² dt`; the reference for [`csg_crps`].
pub fn csg_crps_quadrature(p: &CsgParams, y: f64) -> Result<f64> {
    if y < 0.0 {
        return Ok(-y + csg_crps_quadrature(p, 0.0)?);
    }
    let below = quadrature::integrate(
        |t| {
            let f = csg_cdf(p, t);
            f * f
        },
        0.0,
        y,
        0.5 * QUADRATURE_TOLERANCE,
    )?;

    let mut upper = y.max(p.gamma_mean() + p.gamma_sd());
    while gamma_sf(&p.gamma, upper + p.shift) >= TAIL_CUTOFF {
        upper = 2.0 * upper + p.gamma.scale;
    }
    let above = quadrature::integrate(
        |t| {
            let s = gamma_sf(&p.gamma, t + p.shift);
            s * s
        },
        y,
        upper,
        0.5 * QUADRATURE_TOLERANCE,
    )?;
    Ok(below.value + above.value)
}

/// CRPS of a raw ensemble, `mean|fᵢ − y| − (1/2M²) ΣΣ |fᵢ − fⱼ|`.
///
/// # Panics
/// If `members` is empty.
pub fn empirical_crps(members: &[f64], y: f64) -> f64 {
    assert!(!members.is_empty(), "empirical CRPS needs at least one member");
    let m = members.len() as f64;
    let abs_err = members.iter().map(|f| (f - y).abs()).sum::<f64>() / m;
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    // ΣΣ|fᵢ − fⱼ| = 2 Σ (2i − M − 1) f₍ᵢ₎ over 1-based order statistics.
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, f)| (2.0 * (i as f64 + 1.0) - m - 1.0) * f)
        .sum::<f64>()
        * 2.0;
    abs_err - pair_sum / (2.0 * m * m)
}

/// A predictive distribution that can be scored.
pub trait PredictiveCdf {
    fn cdf(&self, x: f64) -> f64;
    fn crps(&self, y: f64) -> f64;
    /// Points where the CDF may jump.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl PredictiveCdf for CsgParams {
    fn cdf(&self, x: f64) -> f64 {
        csg_cdf(self, x)
    }

    fn crps(&self, y: f64) -> f64 {
        csg_crps(self, y)
    }

    fn breakpoints(&self) -> Vec<f64> {
        vec![0.0]
    }
}

/// Weighted empirical step CDF over sorted support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCdf {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl StepCdf {
    /// Sorts the points (carrying weights along) and normalises the weights.
    pub fn new(points: &[f64], weights: &[f64]) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::domain(format!(
                "step CDF needs matching non-empty points and weights ({} vs {})",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::domain("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::domain("weights sum to zero"));
        }
        let mut pairs: Vec<(f64, f64)> = points
            .iter()
            .zip(weights)
            .map(|(&p, &w)| (p, w / total))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (points, weights) = pairs.into_iter().unzip();
        Ok(StepCdf { points, weights })
    }

    pub fn uniform(points: &[f64]) -> Result<Self> {
        Self::new(points, &vec![1.0; points.len()])
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Exact CRPS by integrating the piecewise-constant squared difference segment by segment.
    pub fn crps_piecewise(&self, y: f64) -> f64 {
        let mut breaks: Vec<f64> = self.points.clone();
        breaks.push(y);
        breaks.sort_by(f64::total_cmp);
        let mut total = 0.0;
        let mut cum = 0.0;
        let mut next_point = 0;
        for seg in breaks.windows(2) {
            let (lo, hi) = (seg[0], seg[1]);
            while next_point < self.points.len() && self.points[next_point] <= lo {
                cum += self.weights[next_point];
                next_point += 1;
            }
            if hi > lo {
                let indicator = if lo >= y { 1.0 } else { 0.0 };
                let diff = cum.min(1.0) - indicator;
                total += diff * diff * (hi - lo);
            }
        }
        total
    }
}

impl PredictiveCdf for StepCdf {
    fn cdf(&self, x: f64) -> f64 {
        let idx = self.points.partition_point(|p| *p <= x);
        self.weights[..idx].iter().sum::<f64>().min(1.0)
    }

    fn crps(&self, y: f64) -> f64 {
        self.crps_piecewise(y)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.points.clone()
    }
}
