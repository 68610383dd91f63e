//! Quantile mapping and closest-member-histogram weighting of sorted ensemble members.

use serde::{Deserialize, Serialize};

use crate::dist::StepCdf;
use crate::error::{Error, Result};
use crate::special::beta_inc;

/// Minimum climatology sample size.
pub const MIN_CLIM_SAMPLES: usize = 30;
/// Reforecast ensemble size, hence closest-member histogram bin count.
pub const REFORECAST_MEMBERS: usize = 11;

/// Empirical climatological CDF over a sorted sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimCdf {
    sorted: Vec<f64>,
}

impl ClimCdf {
    pub fn build(samples: &[f64]) -> Result<Self> {
        Self::build_with_min(samples, MIN_CLIM_SAMPLES)
    }

    pub fn build_with_min(samples: &[f64], min_samples: usize) -> Result<Self> {
        if samples.len() < min_samples.max(1) {
            return Err(Error::insufficient(
                min_samples.max(1),
                samples.len(),
                "climatology samples",
            ));
        }
        if samples.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("climatology samples must be finite and non-negative"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(ClimCdf { sorted })
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// `#{samples ≤ x} / n` at the order statistics, linear between distinct ones, so that
    /// it inverts [`quantile`](Self::quantile) on the sample range. Ties (dry days) keep their jump.
    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.sorted.len();
        let j = self.sorted.partition_point(|v| *v <= x);
        if j == 0 {
            return 0.0;
        }
        if j == n {
            return 1.0;
        }
        let (a, b) = (self.sorted[j - 1], self.sorted[j]);
        (j as f64 + (x - a) / (b - a)) / n as f64
    }

    /// `F⁻¹(i/n)` is the `i`-th order statistic, linear in between, clamped to the sample
    /// range.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let mut h = (p * n as f64).clamp(1.0, n as f64);
        // Snap rounding noise so that F⁻¹(i/n) hits the order statistic exactly.
        if (h - h.round()).abs() < 1e-9 {
            h = h.round();
        }
        let lo = h.floor() as usize;
        if lo >= n {
            return self.sorted[n - 1];
        }
        let frac = h - lo as f64;
        self.sorted[lo - 1] + frac * (self.sorted[lo] - self.sorted[lo - 1])
    }

    /// Largest gap between consecutive order statistics: the resolution of the map.
    pub fn max_spacing(&self) -> f64 {
        self.sorted
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// `F_o⁻¹(F_f(f))`.
pub fn quantile_map(f: f64, forecast_clim: &ClimCdf, obs_clim: &ClimCdf) -> f64 {
    obs_clim.quantile(forecast_clim.cdf(f))
}

/// Maps every member and returns them sorted ascending.
pub fn quantile_map_members(members: &[f64], forecast_clim: &ClimCdf, obs_clim: &ClimCdf) -> Vec<f64> {
    let mut out: Vec<f64> = members
        .iter()
        .map(|&f| quantile_map(f, forecast_clim, obs_clim))
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosestMemberHistogram {
    pub counts: Vec<u64>,
    /// Ensemble-mean bin this histogram is conditioned on, if any.
    pub mean_bin: Option<usize>,
}

/// Rank (0-based) of the sorted member closest to `analysis`; ties go to the lower rank.
pub fn closest_member_rank(sorted_members: &[f64], analysis: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, m) in sorted_members.iter().enumerate() {
        let d = (m - analysis).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

impl ClosestMemberHistogram {
    pub fn new(n_bins: usize, mean_bin: Option<usize>) -> Self {
        ClosestMemberHistogram {
            counts: vec![0; n_bins],
            mean_bin,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one case; members are sorted before ranking.
    pub fn add(&mut self, members: &[f64], analysis: f64) -> Result<()> {
        if members.len() != self.counts.len() {
            return Err(Error::domain(format!(
                "expected {} members, got {}",
                self.counts.len(),
                members.len()
            )));
        }
        let mut sorted = members.to_vec();
        sorted.sort_by(f64::total_cmp);
        self.counts[closest_member_rank(&sorted, analysis)] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ClosestMemberHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Builds a histogram from `(adjusted members, analysis)` cases.
pub fn build_closest_member_histogram<'a>(
    cases: impl IntoIterator<Item = (&'a [f64], f64)>,
    n_bins: usize,
) -> Result<ClosestMemberHistogram> {
    let mut h = ClosestMemberHistogram::new(n_bins, None);
    for (members, analysis) in cases {
        h.add(members, analysis)?;
    }
    Ok(h)
}

/// Non-negative weights for the ranks of a sorted ensemble, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberWeights {
    weights: Vec<f64>,
}

impl MemberWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::domain("weights must be non-empty, finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::domain("weights sum to zero"));
        }
        Ok(MemberWeights {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(m: usize) -> Self {
        MemberWeights {
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaWeights {
    pub alpha: f64,
    pub beta: f64,
    pub weights: MemberWeights,
    /// Set when all counts sat in one bin and the smoothed one-hot fallback was used.
    pub degenerate: bool,
}

/// Beta parameters by moment matching on the bin centres `(i − ½)/B`.
///
/// The variance gets Sheppard's `1/(12B²)` correction for grouping, so a flat
/// histogram maps to exactly `α = β = 1`.
pub fn beta_moments(hist: &ClosestMemberHistogram) -> Result<(f64, f64)> {
    let total = hist.total();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let b = hist.n_bins() as f64;
    let freqs = hist.counts.iter().map(|&c| c as f64 / total as f64);
    let centres = (0..hist.n_bins()).map(|i| (i as f64 + 0.5) / b);
    let pairs: Vec<(f64, f64)> = centres.zip(freqs).collect();
    let mean: f64 = pairs.iter().map(|(x, p)| x * p).sum();
    let var: f64 = pairs.iter().map(|(x, p)| p * (x - mean).powi(2)).sum::<f64>() + 1.0 / (12.0 * b * b);
    let common = mean * (1.0 - mean) / var - 1.0;
    if common <= 0.0 {
        return Err(Error::domain("histogram variance too large for a beta fit"));
    }
    Ok((mean * common, (1.0 - mean) * common))
}

/// Weights for a sorted `target_size`-member ensemble from a closest-member histogram:
/// the fitted beta CDF's increments over `M` equal subintervals of `[0, 1]`.
pub fn fit_beta_weights(hist: &ClosestMemberHistogram, target_size: usize) -> Result<BetaWeights> {
    if target_size == 0 {
        return Err(Error::domain("target ensemble size must be positive"));
    }
    if hist.total() == 0 {
        return Err(Error::EmptyHistogram);
    }
    let occupied: Vec<usize> = (0..hist.n_bins()).filter(|&i| hist.counts[i] > 0).collect();
    if occupied.len() == 1 {
        log::warn!("closest-member histogram has a single occupied bin; using smoothed one-hot weights");
        return Ok(BetaWeights {
            alpha: f64::NAN,
            beta: f64::NAN,
            weights: smoothed_one_hot(occupied[0], hist.n_bins(), target_size),
            degenerate: true,
        });
    }
    let (alpha, beta) = beta_moments(hist)?;
    let m = target_size as f64;
    let mut prev = 0.0;
    let raw: Vec<f64> = (1..=target_size)
        .map(|j| {
            let cur = beta_inc(alpha, beta, j as f64 / m);
            let w = (cur - prev).max(0.0);
            prev = cur;
            w
        })
        .collect();
    Ok(BetaWeights {
        alpha,
        beta,
        weights: MemberWeights::new(raw)?,
        degenerate: false,
    })
}

/// Weight 2 on target members whose rank falls in `bin`, 1 on those in the adjacent bins.
fn smoothed_one_hot(bin: usize, n_bins: usize, target_size: usize) -> MemberWeights {
    let bin_of = |j: usize| (((j as f64 + 0.5) / target_size as f64) * n_bins as f64) as usize;
    let raw: Vec<f64> = (0..target_size)
        .map(|j| match bin_of(j).abs_diff(bin) {
            0 => 2.0,
            1 => 1.0,
            _ => 0.0,
        })
        .collect();
    if raw.iter().any(|w| *w > 0.0) {
        return MemberWeights::new(raw).expect("positive weights");
    }
    let nearest = (0..target_size)
        .min_by_key(|&j| bin_of(j).abs_diff(bin))
        .unwrap_or(0);
    let mut one_hot = vec![0.0; target_size];
    one_hot[nearest] = 1.0;
    MemberWeights::new(one_hot).expect("positive weights")
}

/// Weighted step CDF over the members, with weights indexed by sorted rank.
pub fn weighted_ensemble_cdf(members: &[f64], weights: &MemberWeights) -> Result<StepCdf> {
    if members.len() != weights.len() {
        return Err(Error::domain(format!(
            "{} members but {} weights",
            members.len(),
            weights.len()
        )));
    }
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    StepCdf::new(&sorted, weights.as_slice())
}

/// Concatenates per-resolution weighted ensembles, scaling each group by its share of members.
pub fn combine_weighted_groups(groups: &[(&[f64], &MemberWeights)]) -> Result<StepCdf> {
    let total: usize = groups.iter().map(|(m, _)| m.len()).sum();
    let mut points = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for (members, w) in groups {
        if members.len() != w.len() {
            return Err(Error::domain("member and weight counts differ"));
        }
        let share = members.len() as f64 / total as f64;
        let mut sorted = members.to_vec();
        sorted.sort_by(f64::total_cmp);
        points.extend(sorted);
        weights.extend(w.as_slice().iter().map(|x| x * share));
    }
    let mass: f64 = weights.iter().sum();
    debug_assert!((mass - 1.0).abs() < 1e-12, "combined mass {mass}");
    StepCdf::new(&points, &weights)
}
