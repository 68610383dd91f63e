//! End-to-end experiment: semi-local CSG-EMOS, quantile mapping with and without
//! member weighting, and verification of every method against the raw ensemble.
//!
//! Work is split by lead time (and mixture for EMOS) and run on the ambient rayon pool.
//! Each unit is sequential and the pieces are reassembled in a fixed order, so results
//! do not depend on the number of threads.

pub mod mapping;
pub mod scoring;
pub mod semilocal;

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emos::TrainingCase;
use crate::ensemble::{ForecastCase, LeadTime, MixtureConfig, ReforecastCase, Resolution};
use crate::error::{Error, Result};

pub use mapping::{QmCase, QmOutput};
pub use scoring::{Evaluation, Method};
pub use semilocal::{ClusterRecord, CoefficientRecord, EmosOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmosSettings {
    pub window_days: u32,
    /// Requested cluster count; capped by the number of locations.
    pub clusters: usize,
    /// Quantiles per feature block used for clustering.
    pub quantiles: usize,
    pub cases_per_parameter: usize,
    /// Start each fit from the previous day's fit of the nearest cluster.
    pub warm_start: bool,
}

impl Default for EmosSettings {
    fn default() -> Self {
        EmosSettings {
            window_days: 30,
            clusters: 4,
            quantiles: crate::cluster::DEFAULT_QUANTILES,
            cases_per_parameter: crate::emos::CASES_PER_PARAMETER,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QmSettings {
    /// Reforecast dates within this many calendar days of the target are pooled.
    pub half_window_days: u32,
    /// Climatologically similar locations pooled with each location.
    pub supplemental_locations: usize,
    /// Ensemble-mean categories conditioning the closest-member histograms.
    pub mean_bins: usize,
    pub min_samples: usize,
    /// Below this many counts a mean-bin histogram falls back to the pooled one.
    pub min_histogram_cases: u64,
}

impl Default for QmSettings {
    fn default() -> Self {
        QmSettings {
            half_window_days: 4,
            supplemental_locations: 5,
            mean_bins: 3,
            min_samples: crate::qm::MIN_CLIM_SAMPLES,
            min_histogram_cases: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub thresholds: Vec<f64>,
    pub n_boot: usize,
    /// Mean block length of the stationary bootstrap; `ceil(n^(1/3))` when unset.
    pub block_length: Option<f64>,
    pub level: f64,
    pub fdr: f64,
    pub reliability_bins: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            thresholds: crate::verify::DEFAULT_THRESHOLDS.to_vec(),
            n_boot: 2000,
            block_length: None,
            level: 0.95,
            fdr: 0.05,
            reliability_bins: crate::verify::DEFAULT_RELIABILITY_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub mixtures: Vec<MixtureConfig>,
    pub emos: EmosSettings,
    pub qm: QmSettings,
    pub verify: VerifySettings,
    pub seed: u64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            mixtures: MixtureConfig::reference_set(),
            emos: EmosSettings::default(),
            qm: QmSettings::default(),
            verify: VerifySettings::default(),
            seed: 20170401,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<()> {
        if self.mixtures.is_empty() {
            return Err(Error::Config("at least one mixture is required".into()));
        }
        for m in &self.mixtures {
            MixtureConfig::with_cost_ratio(m.m_high, m.m_low, m.cost_ratio)?;
        }
        let e = &self.emos;
        if e.window_days == 0 || e.clusters == 0 || e.quantiles == 0 {
            return Err(Error::Config(
                "window length, cluster count and quantile count must be positive".into(),
            ));
        }
        let q = &self.qm;
        if q.mean_bins == 0 || q.min_samples == 0 {
            return Err(Error::Config("mean bins and minimum samples must be positive".into()));
        }
        let v = &self.verify;
        if v.thresholds.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config("thresholds must be finite and non-negative".into()));
        }
        if v.n_boot < crate::verify::MIN_BOOTSTRAP_REPLICATES {
            return Err(Error::Config(format!(
                "n_boot must be at least {}",
                crate::verify::MIN_BOOTSTRAP_REPLICATES
            )));
        }
        if !(v.level > 0.0 && v.level < 1.0) || !(v.fdr > 0.0 && v.fdr < 1.0) {
            return Err(Error::Config("confidence level and FDR must lie in (0, 1)".into()));
        }
        if v.block_length.is_some_and(|b| !(b >= 1.0)) {
            return Err(Error::Config("block length must be at least 1".into()));
        }
        if v.reliability_bins == 0 {
            return Err(Error::Config("reliability diagram needs at least one bin".into()));
        }
        Ok(())
    }
}

/// Ensemble statistics of the first `m_high`/`m_low` members, without copying them.
pub fn mixture_summary(case: &ForecastCase, mixture: &MixtureConfig) -> Result<TrainingCase> {
    let prefix_mean = |label: Resolution, m: u32| -> Result<(f64, f64)> {
        if m == 0 {
            return Ok((0.0, 0.0));
        }
        let members = case.forecast.group(label).map_or(&[][..], |g| g.members());
        if members.len() < m as usize {
            return Err(Error::Data(format!(
                "mixture {mixture} needs {m} {label} members; {} on {} has {}",
                case.forecast.location_id,
                case.forecast.valid_time,
                members.len()
            )));
        }
        let sum: f64 = members[..m as usize].iter().sum();
        Ok((sum / m as f64, sum))
    };
    let (high_mean, high_sum) = prefix_mean(Resolution::High, mixture.m_high)?;
    let (low_mean, low_sum) = prefix_mean(Resolution::Low, mixture.m_low)?;
    Ok(TrainingCase {
        high_mean,
        low_mean,
        overall_mean: (high_sum + low_sum) / mixture.total_members() as f64,
        observation: case.observation,
    })
}

/// The mixture's members, high resolution first.
pub fn mixture_members(case: &ForecastCase, mixture: &MixtureConfig) -> Vec<f64> {
    let take = |label, m: u32| {
        case.forecast
            .group(label)
            .map_or(&[][..], |g| &g.members()[..(m as usize).min(g.len())])
    };
    let mut out = take(Resolution::High, mixture.m_high).to_vec();
    out.extend_from_slice(take(Resolution::Low, mixture.m_low));
    out
}

/// Cases of one lead time ordered by (date, location), with the verification subset:
/// every date preceded by a complete training window.
#[derive(Debug, Clone)]
pub struct LeadCases<'a> {
    pub lead: LeadTime,
    pub cases: Vec<&'a ForecastCase>,
    pub dates: Vec<NaiveDate>,
    pub target_dates: Vec<NaiveDate>,
    /// Indices into `cases` of the verification cases, in order.
    pub verification: Vec<usize>,
}

impl LeadCases<'_> {
    pub fn date_range(&self, date: NaiveDate) -> std::ops::Range<usize> {
        self.dates.partition_point(|d| *d < date)..self.dates.partition_point(|d| *d <= date)
    }

    pub fn verification_cases(&self) -> impl Iterator<Item = &ForecastCase> + '_ {
        self.verification.iter().map(|&i| self.cases[i])
    }
}

pub fn split_by_lead(cases: &[ForecastCase], window_days: u32) -> Result<Vec<LeadCases<'_>>> {
    let mut by_lead: BTreeMap<LeadTime, Vec<&ForecastCase>> = BTreeMap::new();
    for c in cases {
        by_lead.entry(c.forecast.lead_time).or_default().push(c);
    }
    let mut out = Vec::with_capacity(by_lead.len());
    for (lead, mut cs) in by_lead {
        cs.sort_by(|a, b| {
            a.forecast
                .valid_time
                .cmp(&b.forecast.valid_time)
                .then_with(|| a.forecast.location_id.cmp(&b.forecast.location_id))
        });
        if let Some(w) = cs.windows(2).find(|w| {
            w[0].forecast.valid_time == w[1].forecast.valid_time
                && w[0].forecast.location_id == w[1].forecast.location_id
        }) {
            return Err(Error::Data(format!(
                "duplicate forecast for {} on {} at lead {lead}",
                w[0].forecast.location_id, w[0].forecast.valid_time
            )));
        }
        let dates: Vec<NaiveDate> = cs.iter().map(|c| c.forecast.valid_time).collect();
        let first = dates[0];
        let earliest_target = first + Days::new(window_days as u64);
        let mut target_dates: Vec<NaiveDate> = dates.iter().copied().filter(|d| *d >= earliest_target).collect();
        target_dates.dedup();
        if target_dates.is_empty() {
            let span = (dates[dates.len() - 1] - first).num_days() as usize + 1;
            return Err(Error::insufficient(
                window_days as usize + 1,
                span,
                format!("days of forecasts at lead {lead}"),
            ));
        }
        let start = dates.partition_point(|d| *d < earliest_target);
        out.push(LeadCases {
            lead,
            verification: (start..cs.len()).collect(),
            cases: cs,
            dates,
            target_dates,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("no forecast cases".into()));
    }
    Ok(out)
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub emos: Vec<EmosOutput>,
    pub qm: Vec<QmOutput>,
    pub evaluation: Evaluation,
}

/// Semi-local EMOS for every (lead, mixture), in lead-major order.
pub fn run_emos_stage(leads: &[LeadCases<'_>], settings: &PipelineSettings, fit: bool) -> Result<Vec<EmosOutput>> {
    let jobs: Vec<(usize, MixtureConfig)> = (0..leads.len())
        .flat_map(|l| settings.mixtures.iter().map(move |m| (l, *m)))
        .collect();
    jobs.par_iter()
        .map(|(l, m)| semilocal::run_semilocal(&leads[*l], m, &settings.emos, settings.seed, fit))
        .collect()
}

pub fn run_qm_stage(
    leads: &[LeadCases<'_>],
    reforecasts: &[ReforecastCase],
    settings: &PipelineSettings,
) -> Result<Vec<QmOutput>> {
    let archive = mapping::ReforecastArchive::new(reforecasts, &settings.qm)?;
    leads
        .iter()
        .map(|lc| mapping::run_quantile_mapping(lc, &archive, &settings.qm))
        .collect()
}

pub fn run_all(
    cases: &[ForecastCase],
    reforecasts: &[ReforecastCase],
    settings: &PipelineSettings,
) -> Result<PipelineOutput> {
    settings.validate()?;
    let leads = split_by_lead(cases, settings.emos.window_days)?;
    let emos = run_emos_stage(&leads, settings, true)?;
    let qm = run_qm_stage(&leads, reforecasts, settings)?;
    let evaluation = scoring::evaluate(&leads, &emos, Some(&qm), settings)?;
    Ok(PipelineOutput { emos, qm, evaluation })
}
