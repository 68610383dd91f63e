//! Quantile mapping against reforecast climatologies and closest-member-histogram
//! weighting, per verification case and resolution.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rayon::prelude::*;

use super::{LeadCases, QmSettings};
use crate::cluster::{extract_features, interpolated_quantile, Standardizer, DEFAULT_QUANTILES};
use crate::dist::StepCdf;
use crate::emos::TrainingCase;
use crate::ensemble::{ForecastCase, LeadTime, LocationId, MixtureConfig, ReforecastCase, Resolution};
use crate::error::{Error, Result};
use crate::qm::{
    closest_member_rank, combine_weighted_groups, fit_beta_weights, quantile_map, quantile_map_members, ClimCdf,
    ClosestMemberHistogram, MemberWeights,
};
use crate::synth::shift_years;

pub const RESOLUTIONS: [Resolution; 2] = [Resolution::High, Resolution::Low];

/// Reforecasts indexed by (lead, location), with each location's climatological neighbours.
pub struct ReforecastArchive<'a> {
    series: BTreeMap<(LeadTime, LocationId), Vec<&'a ReforecastCase>>,
    neighbours: BTreeMap<(LeadTime, LocationId), Vec<&'a LocationId>>,
    members: usize,
}

impl<'a> ReforecastArchive<'a> {
    pub fn new(reforecasts: &'a [ReforecastCase], settings: &QmSettings) -> Result<Self> {
        let members = reforecasts.first().map_or(0, |r| r.high.len());
        if members == 0 {
            return Err(Error::Data("reforecast archive is empty".into()));
        }
        if let Some(r) = reforecasts
            .iter()
            .find(|r| r.high.len() != members || r.low.len() != members)
        {
            return Err(Error::Data(format!(
                "reforecast for {} on {} has ({}, {}) members, expected {members} per resolution",
                r.location_id,
                r.valid_time,
                r.high.len(),
                r.low.len()
            )));
        }
        let mut series: BTreeMap<(LeadTime, LocationId), Vec<&ReforecastCase>> = BTreeMap::new();
        for r in reforecasts {
            series.entry((r.lead_time, r.location_id.clone())).or_default().push(r);
        }
        for s in series.values_mut() {
            s.sort_by_key(|r| r.valid_time);
        }

        let mut neighbours = BTreeMap::new();
        let leads: Vec<LeadTime> = {
            let mut l: Vec<LeadTime> = series.keys().map(|k| k.0).collect();
            l.dedup();
            l
        };
        for lead in leads {
            let locs: Vec<(&'a LocationId, &Vec<&ReforecastCase>)> = series
                .range((lead, LocationId(String::new()))..)
                .take_while(|(k, _)| k.0 == lead)
                .map(|(_, v)| (&v[0].location_id, v))
                .collect();
            let mut rows = Vec::with_capacity(locs.len());
            for (loc, cases) in &locs {
                let summaries: Vec<TrainingCase> = cases
                    .iter()
                    .map(|r| {
                        let total: f64 = r.high.iter().chain(&r.low).sum();
                        TrainingCase {
                            high_mean: 0.0,
                            low_mean: 0.0,
                            overall_mean: total / (2 * members) as f64,
                            observation: r.observation,
                        }
                    })
                    .collect();
                rows.push(extract_features(loc, &summaries, DEFAULT_QUANTILES.min(summaries.len()).max(1))?.features);
            }
            let scaler = Standardizer::fit(&rows);
            let points: Vec<Vec<f64>> = rows.iter().map(|r| scaler.apply(r)).collect();
            for (i, (loc, _)) in locs.iter().enumerate() {
                let mut others: Vec<(f64, usize)> = (0..locs.len())
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                        (d, j)
                    })
                    .collect();
                others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let list = others
                    .iter()
                    .take(settings.supplemental_locations)
                    .map(|&(_, j)| locs[j].0)
                    .collect();
                neighbours.insert((lead, (*loc).clone()), list);
            }
        }
        Ok(ReforecastArchive {
            series,
            neighbours,
            members,
        })
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn neighbours(&self, lead: LeadTime, location: &LocationId) -> &[&'a LocationId] {
        self.neighbours
            .get(&(lead, location.clone()))
            .map_or(&[][..], Vec::as_slice)
    }

    /// Reforecasts of `location` and its neighbours valid within `half_window` calendar
    /// days of `target` in earlier years, tagged with how many years back they are.
    fn pool(&self, lead: LeadTime, location: &LocationId, target: NaiveDate, half_window: u32) -> Vec<(i32, &'a ReforecastCase)> {
        let mut out = Vec::new();
        let own = self.series.get(&(lead, location.clone())).map(|v| &v[0].location_id);
        for loc in own.into_iter().chain(self.neighbours(lead, location).iter().copied()) {
            for r in self.series.get(&(lead, loc.clone())).into_iter().flatten() {
                let years = ((target - r.valid_time).num_days() as f64 / 365.25).round() as i32;
                if years < 1 {
                    continue;
                }
                let offset = (shift_years(target, -years) - r.valid_time).num_days();
                if offset.unsigned_abs() <= half_window as u64 {
                    out.push((years, *r));
                }
            }
        }
        out
    }
}

/// Quantile-mapping state of one resolution of one verification case.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionMap {
    /// Mapped operational members, in member order.
    pub mapped: Vec<f64>,
    /// Leave-one-year-out closest-member histograms per ensemble-mean bin.
    pub histograms: Vec<ClosestMemberHistogram>,
    pub pooled: ClosestMemberHistogram,
    /// Upper edges of all but the last ensemble-mean bin.
    pub mean_edges: Vec<f64>,
}

impl ResolutionMap {
    pub fn mean_bin(&self, mean: f64) -> usize {
        self.mean_edges.partition_point(|e| *e < mean)
    }

    /// Weights for the first `m` sorted mapped members, using the histogram of the bin of
    /// the raw ensemble mean (or the pooled one when that bin is thin).
    pub fn weights(&self, raw_mean: f64, m: usize, min_cases: u64) -> Result<MemberWeights> {
        let own = &self.histograms[self.mean_bin(raw_mean)];
        let hist = if own.total() >= min_cases { own } else { &self.pooled };
        if hist.total() == 0 {
            return Ok(MemberWeights::uniform(m));
        }
        Ok(fit_beta_weights(hist, m)?.weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmCase {
    pub high: Option<ResolutionMap>,
    pub low: Option<ResolutionMap>,
}

#[derive(Debug, Clone)]
pub struct QmOutput {
    pub lead: LeadTime,
    /// Aligned with `LeadCases::verification`.
    pub cases: Vec<QmCase>,
}

fn group_prefix(case: &ForecastCase, label: Resolution, m: u32) -> &[f64] {
    case.forecast
        .group(label)
        .map_or(&[][..], |g| &g.members()[..(m as usize).min(g.len())])
}

fn mixture_size(mixture: &MixtureConfig, label: Resolution) -> u32 {
    match label {
        Resolution::High => mixture.m_high,
        Resolution::Low => mixture.m_low,
    }
}

impl QmCase {
    pub fn resolution(&self, label: Resolution) -> Option<&ResolutionMap> {
        match label {
            Resolution::High => self.high.as_ref(),
            Resolution::Low => self.low.as_ref(),
        }
    }

    fn mapped_prefix(&self, label: Resolution, m: u32) -> Result<Vec<f64>> {
        if m == 0 {
            return Ok(Vec::new());
        }
        let map = self
            .resolution(label)
            .ok_or_else(|| Error::Data(format!("no quantile-mapped {label} members")))?;
        if map.mapped.len() < m as usize {
            return Err(Error::Data(format!(
                "{m} mapped {label} members requested, {} available",
                map.mapped.len()
            )));
        }
        let mut v = map.mapped[..m as usize].to_vec();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }

    /// Equally weighted mapped members of the mixture.
    pub fn qm_cdf(&self, mixture: &MixtureConfig) -> Result<StepCdf> {
        let mut points = self.mapped_prefix(Resolution::High, mixture.m_high)?;
        points.extend(self.mapped_prefix(Resolution::Low, mixture.m_low)?);
        StepCdf::uniform(&points)
    }

    /// Per-resolution weights by sorted rank, each group scaled by its share of members.
    pub fn weights(
        &self,
        case: &ForecastCase,
        mixture: &MixtureConfig,
        min_cases: u64,
    ) -> Result<Vec<(Resolution, Vec<f64>, MemberWeights)>> {
        let mut out = Vec::with_capacity(2);
        for label in RESOLUTIONS {
            let m = mixture_size(mixture, label);
            if m == 0 {
                continue;
            }
            let raw = group_prefix(case, label, m);
            let raw_mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
            let map = self
                .resolution(label)
                .ok_or_else(|| Error::Data(format!("no quantile-mapped {label} members")))?;
            let w = map.weights(raw_mean, m as usize, min_cases)?;
            out.push((label, self.mapped_prefix(label, m)?, w));
        }
        Ok(out)
    }

    /// Mapped members of the mixture weighted by closest-member histograms.
    pub fn qmw_cdf(&self, case: &ForecastCase, mixture: &MixtureConfig, min_cases: u64) -> Result<StepCdf> {
        let parts = self.weights(case, mixture, min_cases)?;
        let groups: Vec<(&[f64], &MemberWeights)> = parts.iter().map(|(_, m, w)| (m.as_slice(), w)).collect();
        combine_weighted_groups(&groups)
    }
}

fn map_resolution(
    case: &ForecastCase,
    label: Resolution,
    pool: &[(i32, &ReforecastCase)],
    n_members: usize,
    settings: &QmSettings,
) -> Result<Option<ResolutionMap>> {
    let Some(group) = case.forecast.group(label).filter(|g| !g.is_empty()) else {
        return Ok(None);
    };
    let context = || {
        format!(
            "{label} reforecasts for {} on {} at lead {}",
            case.forecast.location_id, case.forecast.valid_time, case.forecast.lead_time
        )
    };
    let climate = |cases: &mut dyn Iterator<Item = &(i32, &ReforecastCase)>| -> Result<(ClimCdf, ClimCdf)> {
        let mut fc = Vec::new();
        let mut obs = Vec::new();
        for (_, r) in cases {
            fc.extend_from_slice(r.members(label));
            obs.push(r.observation);
        }
        let f = ClimCdf::build_with_min(&fc, settings.min_samples);
        let o = ClimCdf::build_with_min(&obs, settings.min_samples);
        match (f, o) {
            (Ok(f), Ok(o)) => Ok((f, o)),
            (Err(Error::InsufficientData { needed, got, .. }), _) | (_, Err(Error::InsufficientData { needed, got, .. })) => {
                Err(Error::insufficient(needed, got, context()))
            }
            (Err(e), _) | (_, Err(e)) => Err(e),
        }
    };

    let (f_clim, o_clim) = climate(&mut pool.iter())?;
    let mapped: Vec<f64> = group
        .members()
        .iter()
        .map(|&f| quantile_map(f, &f_clim, &o_clim))
        .collect();

    let raw_mean = |r: &ReforecastCase| r.members(label).iter().sum::<f64>() / n_members as f64;
    let mut means: Vec<f64> = pool.iter().map(|(_, r)| raw_mean(r)).collect();
    means.sort_by(f64::total_cmp);
    let mean_edges: Vec<f64> = (1..settings.mean_bins)
        .map(|i| interpolated_quantile(&means, i as f64 / settings.mean_bins as f64))
        .collect();
    let bin_of = |m: f64| mean_edges.partition_point(|e| *e < m);

    let mut histograms: Vec<ClosestMemberHistogram> = (0..settings.mean_bins)
        .map(|b| ClosestMemberHistogram::new(n_members, Some(b)))
        .collect();
    let mut years: Vec<i32> = pool.iter().map(|p| p.0).collect();
    years.sort_unstable();
    years.dedup();
    for &year in &years {
        let Ok((f_loo, o_loo)) = climate(&mut pool.iter().filter(|p| p.0 != year)) else {
            log::debug!("skipping held-out year {year}: {}", context());
            continue;
        };
        for (_, r) in pool.iter().filter(|p| p.0 == year) {
            let adjusted = quantile_map_members(r.members(label), &f_loo, &o_loo);
            let rank = closest_member_rank(&adjusted, r.observation);
            histograms[bin_of(raw_mean(r))].counts[rank] += 1;
        }
    }
    let mut pooled = ClosestMemberHistogram::new(n_members, None);
    for h in &histograms {
        pooled.merge(h);
    }
    Ok(Some(ResolutionMap {
        mapped,
        histograms,
        pooled,
        mean_edges,
    }))
}

pub fn run_quantile_mapping(lc: &LeadCases<'_>, archive: &ReforecastArchive<'_>, settings: &QmSettings) -> Result<QmOutput> {
    let cases: Vec<QmCase> = lc
        .verification
        .par_iter()
        .map(|&i| {
            let case = lc.cases[i];
            let f = &case.forecast;
            let pool = archive.pool(lc.lead, &f.location_id, f.valid_time, settings.half_window_days);
            Ok(QmCase {
                high: map_resolution(case, Resolution::High, &pool, archive.members(), settings)?,
                low: map_resolution(case, Resolution::Low, &pool, archive.members(), settings)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QmOutput { lead: lc.lead, cases })
}

/// Closest-member histograms summed over verification cases, per (resolution, mean bin).
pub fn aggregate_histograms(output: &QmOutput) -> Vec<(Resolution, usize, Vec<u64>)> {
    let mut acc: BTreeMap<(Resolution, usize), Vec<u64>> = BTreeMap::new();
    for case in &output.cases {
        for label in RESOLUTIONS {
            if let Some(map) = case.resolution(label) {
                for (b, h) in map.histograms.iter().enumerate() {
                    let slot = acc.entry((label, b)).or_insert_with(|| vec![0; h.n_bins()]);
                    for (a, c) in slot.iter_mut().zip(&h.counts) {
                        *a += c;
                    }
                }
            }
        }
    }
    acc.into_iter().map(|((r, b), c)| (r, b, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{empirical_crps, PredictiveCdf};
    use crate::pipeline::{mixture_members, split_by_lead};
    use crate::synth::{generate, DistortionConfig, ScenarioConfig};

    fn scenario(distortion: DistortionConfig) -> ScenarioConfig {
        ScenarioConfig {
            n_locations: 10,
            n_days: 35,
            lead_days: vec![1],
            distortion,
            ..Default::default()
        }
    }

    #[test]
    fn neighbours_exclude_self_and_are_sorted() {
        let data = generate(&scenario(DistortionConfig::default())).unwrap();
        let archive = ReforecastArchive::new(&data.reforecasts, &QmSettings::default()).unwrap();
        let lead = LeadTime::from_days(1);
        for c in &data.climates {
            let n = archive.neighbours(lead, &c.location_id);
            assert_eq!(n.len(), 5);
            assert!(!n.contains(&&c.location_id));
        }
        let t = data.forecasts[0].forecast.valid_time;
        let pool = archive.pool(lead, &data.climates[0].location_id, t, 4);
        // Six locations, nine dates, three archive years.
        assert_eq!(pool.len(), 6 * 9 * 3);
    }

    #[test]
    fn mapping_removes_bias_and_weights_sum_to_one() {
        let data = generate(&scenario(DistortionConfig {
            bias: 2.0,
            ..DistortionConfig::identity()
        }))
        .unwrap();
        let leads = split_by_lead(&data.forecasts, 30).unwrap();
        let archive = ReforecastArchive::new(&data.reforecasts, &QmSettings::default()).unwrap();
        let out = run_quantile_mapping(&leads[0], &archive, &QmSettings::default()).unwrap();
        assert_eq!(out.cases.len(), leads[0].verification.len());
        let mixture = MixtureConfig::new(20, 120).unwrap();
        let (mut raw, mut mapped, mut weighted) = (0.0, 0.0, 0.0);
        for (case, q) in leads[0].verification_cases().zip(&out.cases) {
            raw += empirical_crps(&mixture_members(case, &mixture), case.observation);
            mapped += q.qm_cdf(&mixture).unwrap().crps(case.observation);
            let w = q.qmw_cdf(case, &mixture, 20).unwrap();
            assert!((w.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            weighted += w.crps(case.observation);
            let parts = q.weights(case, &mixture, 20).unwrap();
            assert_eq!(parts.len(), 2);
            assert_eq!(parts[0].2.len(), 20);
        }
        assert!(mapped < raw, "mapped {mapped} raw {raw}");
        assert!(weighted.is_finite());
    }

    #[test]
    fn histograms_count_every_pool_case_once() {
        let data = generate(&scenario(DistortionConfig::default())).unwrap();
        let leads = split_by_lead(&data.forecasts, 30).unwrap();
        let archive = ReforecastArchive::new(&data.reforecasts, &QmSettings::default()).unwrap();
        let out = run_quantile_mapping(&leads[0], &archive, &QmSettings::default()).unwrap();
        let map = out.cases[0].high.as_ref().unwrap();
        assert_eq!(map.pooled.total(), 6 * 9 * 3);
        assert_eq!(map.histograms.len(), 3);
        assert_eq!(map.mean_edges.len(), 2);
        let agg = aggregate_histograms(&out);
        assert_eq!(agg.len(), 6);
    }

    #[test]
    fn empty_archive_is_a_data_error() {
        assert!(matches!(
            ReforecastArchive::new(&[], &QmSettings::default()),
            Err(Error::Data(_))
        ));
    }
}
