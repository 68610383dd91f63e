//! Verification scores, skill scores, reliability diagrams and significance tests.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::PredictiveCdf;
use crate::ensemble::LocationId;
use crate::error::{Error, Result};
use crate::quadrature::integrate;
use crate::special::{beta_inc, erfc};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.1, 5.0, 10.0];
pub const DEFAULT_RELIABILITY_BINS: usize = 10;
pub const MIN_BOOTSTRAP_POINTS: usize = 10;
pub const MIN_BOOTSTRAP_REPLICATES: usize = 100;
pub const MIN_DM_LENGTH: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Crps,
    Brier,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Crps => "crps",
            ScoreKind::Brier => "bs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub location_id: LocationId,
    pub valid_time: NaiveDate,
    pub value: f64,
}

/// Per-case scores of one forecast method; entries are kept sorted by (date, location).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub kind: ScoreKind,
    /// Event threshold in mm for Brier scores.
    pub threshold: Option<f64>,
    entries: Vec<ScoreEntry>,
}

impl ScoreSeries {
    pub fn new(kind: ScoreKind, threshold: Option<f64>, mut entries: Vec<ScoreEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.value.is_finite() || e.value < 0.0) {
            return Err(Error::domain(format!(
                "score {} at {} {} is not a finite non-negative value",
                e.value, e.location_id, e.valid_time
            )));
        }
        entries.sort_by(|a, b| {
            a.valid_time
                .cmp(&b.valid_time)
                .then_with(|| a.location_id.cmp(&b.location_id))
        });
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[0].valid_time == w[1].valid_time && w[0].location_id == w[1].location_id)
        {
            return Err(Error::domain(format!(
                "duplicate score for {} at {}",
                w[0].location_id, w[0].valid_time
            )));
        }
        Ok(ScoreSeries {
            kind,
            threshold,
            entries,
        })
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().map(|e| e.value).sum::<f64>() / self.entries.len() as f64
    }

    /// Per-date score totals and case counts in date order.
    pub fn daily_totals(&self) -> Vec<(NaiveDate, f64, usize)> {
        let mut out: Vec<(NaiveDate, f64, usize)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == e.valid_time => {
                    last.1 += e.value;
                    last.2 += 1;
                }
                _ => out.push((e.valid_time, e.value, 1)),
            }
        }
        out
    }

    /// Time-ordered scores per location.
    pub fn by_location(&self) -> BTreeMap<LocationId, Vec<(NaiveDate, f64)>> {
        let mut out: BTreeMap<LocationId, Vec<(NaiveDate, f64)>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.location_id.clone())
                .or_default()
                .push((e.valid_time, e.value));
        }
        out
    }

    fn keys(&self) -> impl Iterator<Item = (&NaiveDate, &LocationId)> {
        self.entries.iter().map(|e| (&e.valid_time, &e.location_id))
    }
}

/// Brier score of the non-exceedance event `{x ≤ threshold}`.
pub fn brier_score<F: PredictiveCdf + ?Sized>(f: &F, threshold: f64, x: f64) -> f64 {
    let indicator = if threshold >= x { 1.0 } else { 0.0 };
    (f.cdf(threshold) - indicator).powi(2)
}

fn skill(mean: f64, reference: f64) -> Result<f64> {
    if reference <= 0.0 || !reference.is_finite() {
        return Err(Error::ZeroReference);
    }
    Ok(1.0 - mean / reference)
}

pub fn crpss(mean_crps: f64, mean_crps_ref: f64) -> Result<f64> {
    skill(mean_crps, mean_crps_ref)
}

pub fn bss(mean_bs: f64, mean_bs_ref: f64) -> Result<f64> {
    skill(mean_bs, mean_bs_ref)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyDiagnostic {
    pub bs_integral: f64,
    pub crps: f64,
    pub abs_difference: f64,
}

/// Walks outward from `start` by doubling steps until `done` holds.
fn find_bound(start: f64, direction: f64, done: impl Fn(f64) -> bool) -> f64 {
    let mut step = 1.0;
    let mut x = start;
    for _ in 0..200 {
        if done(x) {
            return x;
        }
        x = start + direction * step;
        step *= 2.0;
    }
    x
}

/// Integrates the Brier score over all thresholds and compares it with the CRPS.
pub fn crps_bs_consistency_check<F: PredictiveCdf + ?Sized>(f: &F, x: f64) -> Result<ConsistencyDiagnostic> {
    const TAIL: f64 = 1e-14;
    let mut cuts = f.breakpoints();
    cuts.push(x);
    cuts.retain(|c| c.is_finite());
    let lo_anchor = cuts.iter().copied().fold(x, f64::min);
    let hi_anchor = cuts.iter().copied().fold(x, f64::max);
    let lo = find_bound(lo_anchor, -1.0, |y| f.cdf(y) < TAIL);
    let hi = find_bound(hi_anchor, 1.0, |y| 1.0 - f.cdf(y) < TAIL);
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut total = 0.0;
    for w in cuts.windows(2) {
        // The integrand is smooth strictly inside each piece; sample the open interval only.
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let event = if mid >= x { 1.0 } else { 0.0 };
        total += integrate(|y| (f.cdf(y) - event).powi(2), a, b, 1e-11)?.value;
    }
    let crps = f.crps(x);
    Ok(ConsistencyDiagnostic {
        bs_integral: total,
        crps,
        abs_difference: (total - crps).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub events: usize,
    /// `None` for empty bins.
    pub mean_prob: Option<f64>,
    pub obs_freq: Option<f64>,
    /// log10 of the bin's share of all cases.
    pub log10_freq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
}

/// Equal-width reliability diagram of `(probability, event occurred)` pairs.
pub fn reliability(pairs: &[(f64, bool)], n_bins: usize) -> Result<ReliabilityDiagram> {
    if n_bins == 0 {
        return Err(Error::domain("reliability diagram needs at least one bin"));
    }
    if let Some((p, _)) = pairs.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        return Err(Error::domain(format!("probability {p} outside [0, 1]")));
    }
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    let mut events = vec![0usize; n_bins];
    for &(p, hit) in pairs {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        sums[b] += p;
        counts[b] += 1;
        events[b] += hit as usize;
    }
    let total = pairs.len();
    let bins = (0..n_bins)
        .map(|b| {
            let n = counts[b];
            let occupied = n > 0;
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: n,
                events: events[b],
                mean_prob: occupied.then(|| sums[b] / n as f64),
                obs_freq: occupied.then(|| events[b] as f64 / n as f64),
                log10_freq: occupied.then(|| (n as f64 / total as f64).log10()),
            }
        })
        .collect();
    Ok(ReliabilityDiagram { bins, total })
}

/// Central binomial band `[lo, hi]` of event counts for `n` trials with success
/// probability `p`, holding at least `level` of the mass.
pub fn binomial_band(n: usize, p: f64, level: f64) -> (usize, usize) {
    let tail = 0.5 * (1.0 - level);
    // P(X ≤ k) = I_{1-p}(n-k, k+1)
    let cdf = |k: usize| -> f64 {
        if k >= n || p <= 0.0 {
            1.0
        } else if p >= 1.0 {
            0.0
        } else {
            beta_inc((n - k) as f64, k as f64 + 1.0, 1.0 - p)
        }
    };
    let lo = (0..=n).find(|&k| cdf(k) > tail).unwrap_or(0);
    let hi = (0..=n).find(|&k| cdf(k) >= 1.0 - tail).unwrap_or(n);
    (lo, hi)
}

impl ReliabilityBin {
    /// Whether the observed event count lies in the binomial band around the bin's mean probability.
    pub fn within_band(&self, level: f64) -> Option<bool> {
        let p = self.mean_prob?;
        let (lo, hi) = binomial_band(self.count, p, level);
        Some((lo..=hi).contains(&self.events))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub n_boot: usize,
    /// Defaults to `ceil(n^(1/3))` for `n` time points.
    pub mean_block_length: Option<f64>,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            n_boot: 2000,
            mean_block_length: None,
            seed: 0,
            level: 0.95,
        }
    }
}

pub fn default_block_length(n: usize) -> f64 {
    (n as f64).cbrt().ceil().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// One stationary-bootstrap resample of `0..n`: circular blocks with geometric lengths.
pub fn stationary_bootstrap_indices(n: usize, mean_block_length: f64, rng: &mut impl Rng) -> Vec<usize> {
    let p_new = 1.0 / mean_block_length.max(1.0);
    let mut out = Vec::with_capacity(n);
    let mut i = rng.random_range(0..n);
    out.push(i);
    while out.len() < n {
        i = if rng.random::<f64>() < p_new {
            rng.random_range(0..n)
        } else {
            (i + 1) % n
        };
        out.push(i);
    }
    out
}

fn percentile(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap CI for `stat` applied to resampled column sums of `rows`.
/// Replicate `r` draws from stream `r` of the seeded generator, so the result does not
/// depend on the thread pool.
pub fn stationary_bootstrap_ci<const N: usize>(
    rows: &[[f64; N]],
    stat: impl Fn(&[f64; N]) -> f64 + Sync,
    opts: &BootstrapOptions,
) -> Result<ConfidenceInterval> {
    if rows.len() < MIN_BOOTSTRAP_POINTS {
        return Err(Error::InsufficientSeries {
            needed: MIN_BOOTSTRAP_POINTS,
            got: rows.len(),
        });
    }
    if opts.n_boot < MIN_BOOTSTRAP_REPLICATES {
        return Err(Error::domain(format!(
            "need at least {MIN_BOOTSTRAP_REPLICATES} bootstrap replicates, got {}",
            opts.n_boot
        )));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::domain(format!("confidence level {} outside (0, 1)", opts.level)));
    }
    let n = rows.len();
    let block = opts.mean_block_length.unwrap_or_else(|| default_block_length(n));
    let totals = |idx: &mut dyn Iterator<Item = usize>| {
        let mut acc = [0.0; N];
        for i in idx {
            for (a, v) in acc.iter_mut().zip(&rows[i]) {
                *a += v;
            }
        }
        acc
    };
    let estimate = stat(&totals(&mut (0..n)));
    let mut replicates: Vec<f64> = (0..opts.n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let idx = stationary_bootstrap_indices(n, block, &mut rng);
            stat(&totals(&mut idx.into_iter()))
        })
        .collect();
    replicates.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - opts.level);
    Ok(ConfidenceInterval {
        estimate,
        lo: percentile(&replicates, tail),
        hi: percentile(&replicates, 1.0 - tail),
    })
}

/// CI of the mean score, resampling dates.
pub fn mean_score_ci(series: &ScoreSeries, opts: &BootstrapOptions) -> Result<ConfidenceInterval> {
    let rows: Vec<[f64; 2]> = series
        .daily_totals()
        .into_iter()
        .map(|(_, s, c)| [s, c as f64])
        .collect();
    stationary_bootstrap_ci(&rows, |t| t[0] / t[1], opts)
}

/// CI of the skill score `1 − mean(series)/mean(reference)`, resampling dates jointly.
pub fn skill_score_ci(
    series: &ScoreSeries,
    reference: &ScoreSeries,
    opts: &BootstrapOptions,
) -> Result<ConfidenceInterval> {
    if series.len() != reference.len() || !series.keys().eq(reference.keys()) {
        return Err(Error::Data("skill score series are not aligned".into()));
    }
    if reference.entries.iter().all(|e| e.value == 0.0) {
        return Err(Error::ZeroReference);
    }
    let rows: Vec<[f64; 2]> = series
        .daily_totals()
        .into_iter()
        .zip(reference.daily_totals())
        .map(|((_, a, _), (_, b, _))| [a, b])
        .collect();
    stationary_bootstrap_ci(
        &rows,
        |t| if t[1] > 0.0 { 1.0 - t[0] / t[1] } else { 0.0 },
        opts,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Set when the long-run variance estimate was not positive; `p_value` is then 1.
    pub degenerate: bool,
}

/// Diebold–Mariano test of zero mean loss differential with a rectangular-kernel
/// long-run variance over lags `0..h`.
pub fn diebold_mariano(d: &[f64], horizon: usize) -> Result<DmResult> {
    let n = d.len();
    if n < MIN_DM_LENGTH {
        return Err(Error::InsufficientSeries {
            needed: MIN_DM_LENGTH,
            got: n,
        });
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("loss differential contains non-finite values"));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let autocov = |k: usize| -> f64 {
        (k..n).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / n as f64
    };
    let lags = horizon.max(1) - 1;
    let lrv = autocov(0) + 2.0 * (1..=lags.min(n - 1)).map(autocov).sum::<f64>();
    if !(lrv > 0.0) {
        return Ok(DmResult {
            statistic: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let statistic = mean / (lrv / n as f64).sqrt();
    Ok(DmResult {
        statistic,
        p_value: erfc(statistic.abs() / std::f64::consts::SQRT_2).min(1.0),
        degenerate: false,
    })
}

/// Benjamini–Hochberg step-up procedure; returns the indices of rejected hypotheses in
/// ascending order.
pub fn benjamini_hochberg(p_values: &[f64], q: f64) -> Result<Vec<usize>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let cutoff = (1..=m)
        .rev()
        .find(|&i| p_values[order[i - 1]] <= i as f64 * q / m as f64);
    let mut rejected: Vec<usize> = match cutoff {
        Some(k) => order[..k].to_vec(),
        None => Vec::new(),
    };
    rejected.sort_unstable();
    Ok(rejected)
}

/// Per-location DM tests of two aligned score series, with BH across locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationTests {
    pub locations: Vec<LocationId>,
    pub results: Vec<DmResult>,
    pub rejected: BTreeSet<LocationId>,
    pub skipped: usize,
}

impl StationTests {
    pub fn significant_share(&self) -> f64 {
        if self.locations.is_empty() {
            0.0
        } else {
            self.rejected.len() as f64 / self.locations.len() as f64
        }
    }
}

/// Locations with fewer than [`MIN_DM_LENGTH`] shared dates are counted as skipped.
pub fn station_tests(a: &ScoreSeries, b: &ScoreSeries, horizon: usize, q: f64) -> Result<StationTests> {
    let sa = a.by_location();
    let sb = b.by_location();
    let mut locations = Vec::new();
    let mut results = Vec::new();
    let mut skipped = 0;
    for (loc, xs) in &sa {
        let Some(ys) = sb.get(loc) else {
            skipped += 1;
            continue;
        };
        let ys: BTreeMap<NaiveDate, f64> = ys.iter().copied().collect();
        let d: Vec<f64> = xs
            .iter()
            .filter_map(|(t, x)| ys.get(t).map(|y| x - y))
            .collect();
        if d.len() < MIN_DM_LENGTH {
            skipped += 1;
            continue;
        }
        locations.push(loc.clone());
        results.push(diebold_mariano(&d, horizon)?);
    }
    let p: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    let rejected = benjamini_hochberg(&p, q)?
        .into_iter()
        .map(|i| locations[i].clone())
        .collect();
    Ok(StationTests {
        locations,
        results,
        rejected,
        skipped,
    })
}
