//! Synthetic precipitation scenarios: truth, dual-resolution ensembles and a small
//! reforecast archive, all reproducible from one seed.
//!
//! Each location has a zero-inflated gamma climate whose wet-day mean `λ` is itself
//! gamma distributed. Each resolution of a forecast at lead `L` sees its own Poisson
//! count with rate `λ·t_L`, `t_L = information / lead_days` (scaled down for the low
//! resolution), and its members are drawn from the resulting posterior predictive.
//! Truth and undistorted members of one group are therefore exchangeable; the
//! configured bias, spread deflation and per-member noise then miscalibrate the ensemble.

use chrono::{Datelike, Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::CsgParams;
use crate::emos::{link, EmosCoefficients, TrainingCase};
use crate::ensemble::{
    EnsembleForecast, ForecastCase, LeadTime, LocationId, MemberGroup, MixtureConfig, ReforecastCase, Resolution,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub p_dry: [f64; 2],
    /// Shape of the gamma prior on the wet-day mean.
    pub prior_shape: [f64; 2],
    /// Climatological wet-day mean in mm.
    pub wet_mean: [f64; 2],
    /// Shape of wet-day amounts given the wet-day mean.
    pub wet_shape: [f64; 2],
    /// Relative amplitude of the annual cycle in the wet-day mean.
    pub seasonal_amplitude: f64,
    /// Information available at a one-day lead; decays as `1 / lead_days`.
    pub information: f64,
    /// Fraction of that information seen by the low-resolution model.
    pub low_information: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            p_dry: [0.2, 0.6],
            prior_shape: [2.0, 4.0],
            wet_mean: [2.0, 8.0],
            wet_shape: [0.7, 1.3],
            seasonal_amplitude: 0.3,
            information: 3.0,
            low_information: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionConfig {
    pub bias: f64,
    /// Scales member deviations from the ensemble mean; values below 1 underdisperse.
    pub deflation: f64,
    /// Log-scale sd of multiplicative member noise.
    pub noise_high: f64,
    pub noise_low: f64,
}

impl DistortionConfig {
    pub fn identity() -> Self {
        DistortionConfig {
            bias: 1.0,
            deflation: 1.0,
            noise_high: 0.0,
            noise_low: 0.0,
        }
    }
}

impl Default for DistortionConfig {
    fn default() -> Self {
        DistortionConfig {
            bias: 1.2,
            deflation: 0.5,
            noise_high: 0.1,
            noise_low: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReforecastConfig {
    pub members: usize,
    pub years: u32,
    /// Extra days generated on each side of the scenario period.
    pub margin_days: u32,
}

impl Default for ReforecastConfig {
    fn default() -> Self {
        ReforecastConfig {
            members: 11,
            years: 3,
            margin_days: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_locations: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub lead_days: Vec<u32>,
    pub mixtures: Vec<MixtureConfig>,
    pub n_high: usize,
    pub n_low: usize,
    pub truth: TruthConfig,
    pub distortion: DistortionConfig,
    pub reforecast: ReforecastConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_locations: 100,
            n_days: 90,
            start_date: NaiveDate::from_ymd_opt(2017, 4, 1).expect("valid date"),
            lead_days: vec![1, 3, 5, 7, 10],
            mixtures: MixtureConfig::reference_set(),
            n_high: 50,
            n_low: 200,
            truth: TruthConfig::default(),
            distortion: DistortionConfig::default(),
            reforecast: ReforecastConfig::default(),
            seed: 20170401,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] >= lo && r[1] <= hi && r[0] <= r[1]) {
        return Err(Error::Config(format!(
            "{name} range [{}, {}] must be ordered within [{lo}, {hi}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_locations == 0 || self.n_days == 0 || self.lead_days.is_empty() {
            return Err(Error::Config("locations, days and lead times must be non-empty".into()));
        }
        if self.lead_days.contains(&0) {
            return Err(Error::Config("lead times must be at least one day".into()));
        }
        for m in &self.mixtures {
            if m.m_high as usize > self.n_high || m.m_low as usize > self.n_low {
                return Err(Error::Config(format!(
                    "mixture {m} exceeds the generated ensemble ({}, {})",
                    self.n_high, self.n_low
                )));
            }
        }
        let t = &self.truth;
        check_range("p_dry", t.p_dry, 0.0, 0.99)?;
        check_range("prior_shape", t.prior_shape, 1e-3, f64::MAX)?;
        check_range("wet_mean", t.wet_mean, 1e-3, f64::MAX)?;
        check_range("wet_shape", t.wet_shape, 1e-3, f64::MAX)?;
        if !(0.0..1.0).contains(&t.seasonal_amplitude)
            || !(t.information > 0.0)
            || !(t.low_information > 0.0 && t.low_information <= 1.0)
        {
            return Err(Error::Config(
                "seasonal amplitude must lie in [0, 1), information must be positive and low_information in (0, 1]"
                    .into(),
            ));
        }
        let d = &self.distortion;
        if !(d.bias > 0.0) || !(d.deflation > 0.0 && d.deflation <= 1.0) {
            return Err(Error::Config(format!(
                "bias must be positive and deflation in (0, 1], got {} and {}",
                d.bias, d.deflation
            )));
        }
        if !(d.noise_high >= 0.0 && d.noise_low >= 0.0) {
            return Err(Error::Config("member noise must be non-negative".into()));
        }
        if self.reforecast.members == 0 {
            return Err(Error::Config("reforecast ensembles need at least one member".into()));
        }
        Ok(())
    }

    pub fn lead_times(&self) -> Vec<LeadTime> {
        self.lead_days.iter().map(|&d| LeadTime::from_days(d)).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.n_days as u64)
            .map(|i| self.start_date + Days::new(i))
            .collect()
    }
}

/// Per-location climate drawn from the configured hyper-ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationClimate {
    pub location_id: LocationId,
    pub p_dry: f64,
    pub prior_shape: f64,
    pub wet_mean: f64,
    pub wet_shape: f64,
    pub seasonal_phase: f64,
}

impl LocationClimate {
    fn wet_mean_on(&self, date: NaiveDate, amplitude: f64) -> f64 {
        let angle = std::f64::consts::TAU * date.ordinal0() as f64 / 365.25 + self.seasonal_phase;
        self.wet_mean * (1.0 + amplitude * angle.sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub climates: Vec<LocationClimate>,
    /// Full ensembles, ordered by (location, date, lead).
    pub forecasts: Vec<ForecastCase>,
    pub reforecasts: Vec<ReforecastCase>,
}

pub fn location_name(index: usize) -> LocationId {
    LocationId(format!("S{index:04}"))
}

fn uniform_in(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn gamma(shape: f64, scale: f64) -> Gamma<f64> {
    Gamma::new(shape, scale).expect("positive gamma parameters")
}

/// Zero-inflated gamma draw given the wet-day mean.
fn draw_amount(rng: &mut ChaCha8Rng, climate: &LocationClimate, wet_mean: f64) -> f64 {
    let dry = rng.random::<f64>() < climate.p_dry;
    let amount = gamma(climate.wet_shape, wet_mean / climate.wet_shape).sample(rng);
    if dry {
        0.0
    } else {
        amount
    }
}

struct Sampler<'a> {
    cfg: &'a ScenarioConfig,
    climate: &'a LocationClimate,
}

impl Sampler<'_> {
    /// Truth for one valid date and the prior rate of its wet-day mean.
    fn truth(&self, rng: &mut ChaCha8Rng, date: NaiveDate) -> (f64, f64, f64) {
        let clim_mean = self.climate.wet_mean_on(date, self.cfg.truth.seasonal_amplitude);
        let rate = self.climate.prior_shape / clim_mean;
        let lambda = gamma(self.climate.prior_shape, 1.0 / rate).sample(rng);
        (draw_amount(rng, self.climate, lambda), lambda, rate)
    }

    /// Members for one lead. Each resolution sees its own Poisson count of the true
    /// wet-day mean and samples its posterior predictive; noise and distortion follow.
    fn ensemble(&self, rng: &mut ChaCha8Rng, lambda: f64, rate: f64, lead_days: u32, sizes: [usize; 2]) -> [Vec<f64>; 2] {
        let d = &self.cfg.distortion;
        let t = &self.cfg.truth;
        let info = t.information / lead_days as f64;
        let specs = [(sizes[0], info, d.noise_high), (sizes[1], info * t.low_information, d.noise_low)];
        specs.map(|(n, info, noise)| {
            let count = Poisson::new(lambda * info)
                .map(|p| p.sample(rng))
                .unwrap_or(0.0);
            let posterior = gamma(self.climate.prior_shape + count, 1.0 / (rate + info));
            let mut members: Vec<f64> = (0..n)
                .map(|_| {
                    let lam = posterior.sample(rng);
                    let raw = draw_amount(rng, self.climate, lam);
                    let z: f64 = rng.sample(StandardNormal);
                    raw * (noise * z - 0.5 * noise * noise).exp()
                })
                .collect();
            let mean = members.iter().sum::<f64>() / n.max(1) as f64;
            for v in members.iter_mut() {
                *v = (d.bias * (mean + d.deflation * (*v - mean))).max(0.0);
            }
            members
        })
    }
}

fn location_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_climate(cfg: &ScenarioConfig, index: usize) -> LocationClimate {
    let mut rng = location_rng(cfg.seed, 3 * index as u64);
    let t = &cfg.truth;
    LocationClimate {
        location_id: location_name(index),
        p_dry: uniform_in(&mut rng, t.p_dry),
        prior_shape: uniform_in(&mut rng, t.prior_shape),
        wet_mean: uniform_in(&mut rng, t.wet_mean),
        wet_shape: uniform_in(&mut rng, t.wet_shape),
        seasonal_phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

fn generate_location(cfg: &ScenarioConfig, climate: &LocationClimate, index: usize) -> (Vec<ForecastCase>, Vec<ReforecastCase>) {
    let sampler = Sampler { cfg, climate };

    let mut rng = location_rng(cfg.seed, 3 * index as u64 + 1);
    let mut forecasts = Vec::with_capacity(cfg.n_days * cfg.lead_days.len());
    for date in cfg.dates() {
        let (obs, lambda, rate) = sampler.truth(&mut rng, date);
        for &lead in &cfg.lead_days {
            let [high, low] = sampler.ensemble(
                &mut rng,
                lambda,
                rate,
                lead,
                [cfg.n_high, cfg.n_low],
            );
            let forecast = EnsembleForecast::new(
                climate.location_id.clone(),
                date,
                LeadTime::from_days(lead),
                vec![
                    MemberGroup::new(Resolution::High, high).expect("finite members"),
                    MemberGroup::new(Resolution::Low, low).expect("finite members"),
                ],
            )
            .expect("non-empty forecast");
            forecasts.push(ForecastCase::new(forecast, obs).expect("non-negative truth"));
        }
    }

    let mut rng = location_rng(cfg.seed, 3 * index as u64 + 2);
    let r = &cfg.reforecast;
    let mut reforecasts = Vec::new();
    let span = cfg.n_days as u64 + 2 * r.margin_days as u64;
    for year in (1..=r.years).rev() {
        let first = shift_years(cfg.start_date, -(year as i32)) - Days::new(r.margin_days as u64);
        for i in 0..span {
            let date = first + Days::new(i);
            let (obs, lambda, rate) = sampler.truth(&mut rng, date);
            for &lead in &cfg.lead_days {
                let [high, low] = sampler.ensemble(
                    &mut rng,
                    lambda,
                    rate,
                    lead,
                    [r.members, r.members],
                );
                reforecasts.push(ReforecastCase {
                    location_id: climate.location_id.clone(),
                    valid_time: date,
                    lead_time: LeadTime::from_days(lead),
                    observation: obs,
                    high,
                    low,
                });
            }
        }
    }
    (forecasts, reforecasts)
}

/// Same calendar day `years` years away; 29 February maps to 28 February.
pub fn shift_years(date: NaiveDate, years: i32) -> NaiveDate {
    let y = date.year() + years;
    date.with_year(y)
        .or_else(|| NaiveDate::from_ymd_opt(y, date.month(), 28))
        .expect("valid shifted date")
}

/// Generates the full scenario. Locations are generated in parallel from independent
/// substreams, so the output does not depend on the thread pool.
pub fn generate(cfg: &ScenarioConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let climates: Vec<LocationClimate> = (0..cfg.n_locations).map(|i| draw_climate(cfg, i)).collect();
    let parts: Vec<(Vec<ForecastCase>, Vec<ReforecastCase>)> = climates
        .par_iter()
        .enumerate()
        .map(|(i, c)| generate_location(cfg, c, i))
        .collect();
    let mut forecasts = Vec::with_capacity(parts.iter().map(|p| p.0.len()).sum());
    let mut reforecasts = Vec::with_capacity(parts.iter().map(|p| p.1.len()).sum());
    for (f, r) in parts {
        forecasts.extend(f);
        reforecasts.extend(r);
    }
    Ok(SyntheticDataset {
        climates,
        forecasts,
        reforecasts,
    })
}

/// Draw from a censored shifted gamma distribution.
pub fn sample_csg(params: &CsgParams, rng: &mut impl Rng) -> f64 {
    let g = gamma(params.shape(), params.scale()).sample(rng);
    (g - params.shift()).max(0.0)
}

/// Training cases whose observations follow the CSG-EMOS link with known `truth`
/// coefficients. Group means are gamma distributed around 3 mm, with the low-resolution
/// mean a noisy copy of the high-resolution one.
pub fn emos_truth_cases(truth: &EmosCoefficients, mixture: &MixtureConfig, n: usize, seed: u64) -> Vec<TrainingCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_dist = gamma(1.5, 2.0);
    let (mh, ml) = (mixture.m_high as f64, mixture.m_low as f64);
    (0..n)
        .map(|_| {
            let base: f64 = mean_dist.sample(&mut rng);
            let jitter: f64 = rng.sample(StandardNormal);
            let high_mean = if mh > 0.0 { base } else { 0.0 };
            let low_mean = if ml > 0.0 { (base * (0.3 * jitter).exp()).max(0.0) } else { 0.0 };
            let overall_mean = (mh * high_mean + ml * low_mean) / (mh + ml);
            let params = link(truth, high_mean, low_mean, overall_mean);
            TrainingCase {
                high_mean,
                low_mean,
                overall_mean,
                observation: sample_csg(&params, &mut rng),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::empirical_crps;

    fn small(distortion: DistortionConfig) -> ScenarioConfig {
        ScenarioConfig {
            n_locations: 6,
            n_days: 120,
            lead_days: vec![1, 5],
            n_high: 10,
            n_low: 10,
            mixtures: vec![MixtureConfig::new(10, 10).unwrap()],
            distortion,
            reforecast: ReforecastConfig {
                years: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Rank of the truth among the members, ties broken uniformly at random.
    fn rank(members: &[f64], y: f64, rng: &mut ChaCha8Rng) -> usize {
        let below = members.iter().filter(|m| **m < y).count();
        let ties = members.iter().filter(|m| **m == y).count();
        below + rng.random_range(0..=ties)
    }

    #[test]
    fn identity_distortion_gives_flat_rank_histograms() {
        let data = generate(&small(DistortionConfig::identity())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for label in [Resolution::High, Resolution::Low] {
            let bins = 11;
            let mut counts = vec![0usize; bins];
            for c in &data.forecasts {
                let members = c.forecast.group(label).unwrap().members();
                counts[rank(members, c.observation, &mut rng)] += 1;
            }
            let expected = data.forecasts.len() as f64 / bins as f64;
            let chi2: f64 = counts
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            // 99th percentile of chi-squared with 10 degrees of freedom.
            assert!(chi2 < 23.21, "{label}: chi2 = {chi2}, counts {counts:?}");
        }
    }

    #[test]
    fn deflation_worsens_crps_against_calibrated_ensemble() {
        let base = DistortionConfig {
            bias: 1.0,
            deflation: 1.0,
            noise_high: 0.0,
            noise_low: 0.0,
        };
        let calibrated = generate(&small(base.clone())).unwrap();
        let deflated = generate(&small(DistortionConfig {
            deflation: 0.5,
            ..base
        }))
        .unwrap();
        let mean_crps = |d: &SyntheticDataset| {
            d.forecasts
                .iter()
                .map(|c| empirical_crps(&c.forecast.members().collect::<Vec<_>>(), c.observation))
                .sum::<f64>()
                / d.forecasts.len() as f64
        };
        let (a, b) = (mean_crps(&calibrated), mean_crps(&deflated));
        assert!(b >= 1.1 * a, "calibrated {a}, deflated {b}");
    }

    #[test]
    fn deterministic_for_seed_and_pool() {
        let cfg = small(DistortionConfig::default());
        let a = generate(&cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| generate(&cfg).unwrap());
        assert_eq!(a, b);
        let c = generate(&ScenarioConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.forecasts, c.forecasts);
    }

    #[test]
    fn low_resolution_members_have_larger_error() {
        let cfg = ScenarioConfig {
            distortion: DistortionConfig {
                noise_high: 0.1,
                noise_low: 0.5,
                ..DistortionConfig::identity()
            },
            ..small(DistortionConfig::identity())
        };
        let data = generate(&cfg).unwrap();
        let mae = |label| {
            let mut total = 0.0;
            let mut n = 0;
            for c in &data.forecasts {
                for m in c.forecast.group(label).unwrap().members() {
                    total += (m - c.observation).abs();
                    n += 1;
                }
            }
            total / n as f64
        };
        let (h, l) = (mae(Resolution::High), mae(Resolution::Low));
        assert!(l > 1.02 * h, "high {h}, low {l}");
    }

    #[test]
    fn non_negative_with_dry_mass() {
        let data = generate(&small(DistortionConfig::default())).unwrap();
        let obs: Vec<f64> = data.forecasts.iter().map(|c| c.observation).collect();
        assert!(obs.iter().all(|v| *v >= 0.0));
        assert!(obs.contains(&0.0));
        assert!(data
            .forecasts
            .iter()
            .all(|c| c.forecast.members().all(|m| m >= 0.0)));
    }

    #[test]
    fn shapes_and_reforecast_span() {
        let cfg = small(DistortionConfig::default());
        let data = generate(&cfg).unwrap();
        assert_eq!(data.forecasts.len(), 6 * 120 * 2);
        assert_eq!(data.reforecasts.len(), 6 * (120 + 8) * 2);
        assert!(data.reforecasts.iter().all(|r| r.high.len() == 11 && r.low.len() == 11));
        let first = data.reforecasts[0].valid_time;
        assert_eq!(first, NaiveDate::from_ymd_opt(2016, 3, 28).unwrap());
    }

    #[test]
    fn truth_shared_across_leads() {
        let data = generate(&small(DistortionConfig::default())).unwrap();
        for pair in data.forecasts.chunks(2) {
            assert_eq!(pair[0].observation, pair[1].observation);
            assert_eq!(pair[0].forecast.valid_time, pair[1].forecast.valid_time);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = ScenarioConfig {
            distortion: DistortionConfig {
                deflation: 1.5,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ScenarioConfig {
            n_high: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csg_sampler_matches_cdf() {
        let p = CsgParams::new(0.9, 2.5, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let zeros = (0..n).filter(|_| sample_csg(&p, &mut rng) == 0.0).count();
        let expected = p.point_mass_at_zero();
        assert!((zeros as f64 / n as f64 - expected).abs() < 5e-3);
    }

    #[test]
    fn shift_years_handles_leap_day() {
        let d = NaiveDate::from_ymd_opt(2016, 2, 29).unwrap();
        assert_eq!(shift_years(d, -1), NaiveDate::from_ymd_opt(2015, 2, 28).unwrap());
    }
}
