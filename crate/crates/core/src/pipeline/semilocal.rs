//! Rolling-window, cluster-pooled CSG-EMOS for one (lead time, mixture).

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{mixture_summary, EmosSettings, LeadCases};
use crate::cluster::{effective_k, extract_features, kmeans, Standardizer};
use crate::dist::CsgParams;
use crate::emos::{fit_summaries, free_parameter_count, EmosCoefficients, FitOptions, TrainingCase};
use crate::ensemble::{window_range, LeadTime, LocationId, MixtureConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub mixture: MixtureConfig,
    pub cluster_id: usize,
    pub target_date: NaiveDate,
    pub lead_time: LeadTime,
    pub coefficients: EmosCoefficients,
    pub train_crps: f64,
    pub n_cases: usize,
    pub iterations: usize,
    pub warm_start: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub mixture: MixtureConfig,
    pub lead_time: LeadTime,
    pub target_date: NaiveDate,
    pub location_id: LocationId,
    pub cluster_id: usize,
}

#[derive(Debug, Clone)]
pub struct EmosOutput {
    pub mixture: MixtureConfig,
    pub lead: LeadTime,
    pub coefficients: Vec<CoefficientRecord>,
    pub clusters: Vec<ClusterRecord>,
    /// Predictive distributions aligned with `LeadCases::verification`; empty when fitting
    /// was not requested.
    pub predictions: Vec<CsgParams>,
}

fn destandardize(s: &Standardizer, z: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(&s.means)
        .zip(&s.sds)
        .map(|((z, m), sd)| m + z * sd)
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters the locations of every target date's training window and, if `fit` is set,
/// fits one model per cluster and predicts that date's cases.
pub fn run_semilocal(
    lc: &LeadCases<'_>,
    mixture: &MixtureConfig,
    settings: &EmosSettings,
    seed: u64,
    fit: bool,
) -> Result<EmosOutput> {
    let summaries: Vec<TrainingCase> = lc
        .cases
        .iter()
        .map(|c| mixture_summary(c, mixture))
        .collect::<Result<_>>()?;
    let cold = FitOptions {
        cases_per_parameter: settings.cases_per_parameter,
        ..FitOptions::default()
    };
    let warm = FitOptions {
        cases_per_parameter: settings.cases_per_parameter,
        ..FitOptions::warm()
    };

    let needed = settings.cases_per_parameter * free_parameter_count(mixture);
    let mut out = EmosOutput {
        mixture: *mixture,
        lead: lc.lead,
        coefficients: Vec::new(),
        clusters: Vec::new(),
        predictions: Vec::new(),
    };
    // Raw-feature centroids and fits of the previous target date.
    let mut previous: Vec<(Vec<f64>, EmosCoefficients)> = Vec::new();

    for &target in &lc.target_dates {
        let mut by_location: BTreeMap<&LocationId, Vec<TrainingCase>> = BTreeMap::new();
        for i in window_range(&lc.dates, target, settings.window_days) {
            by_location
                .entry(&lc.cases[i].forecast.location_id)
                .or_default()
                .push(summaries[i]);
        }
        let features = by_location
            .iter()
            .map(|(loc, cases)| extract_features(loc, cases, settings.quantiles))
            .collect::<Result<Vec<_>>>()?;
        let k = effective_k(settings.clusters, features.len());
        let mut model = kmeans(&features, k, seed)?;
        model.merge_small(|loc| by_location.get(loc).map_or(0, Vec::len), needed);
        out.clusters
            .extend(model.assignment.iter().map(|(loc, &c)| ClusterRecord {
                mixture: *mixture,
                lead_time: lc.lead,
                target_date: target,
                location_id: loc.clone(),
                cluster_id: c,
            }));
        if !fit {
            continue;
        }

        let mut pools: Vec<Vec<TrainingCase>> = vec![Vec::new(); model.k];
        for (loc, cases) in &by_location {
            pools[model.cluster_of(loc)?].extend_from_slice(cases);
        }
        let mut fits = Vec::with_capacity(model.k);
        let mut current = Vec::with_capacity(model.k);
        for (c, pool) in pools.iter().enumerate() {
            let centroid = destandardize(&model.standardizer, &model.centroids[c]);
            let init = if settings.warm_start {
                previous
                    .iter()
                    .min_by(|a, b| sq_dist(&a.0, &centroid).total_cmp(&sq_dist(&b.0, &centroid)))
                    .map(|p| p.1)
            } else {
                None
            };
            let opts = if init.is_some() { &warm } else { &cold };
            let report = fit_summaries(pool, mixture, init, opts).map_err(|e| match e {
                Error::InsufficientData { needed, got, .. } => Error::insufficient(
                    needed,
                    got,
                    format!("cases in cluster {c} for {target}, lead {}, mixture {mixture}", lc.lead),
                ),
                other => other,
            })?;
            out.coefficients.push(CoefficientRecord {
                mixture: *mixture,
                cluster_id: c,
                target_date: target,
                lead_time: lc.lead,
                coefficients: report.coefficients,
                train_crps: report.train_mean_crps,
                n_cases: report.n_cases,
                iterations: report.iterations,
                warm_start: init.is_some(),
                converged: report.converged,
            });
            fits.push(report.coefficients);
            current.push((centroid, report.coefficients));
        }
        previous = current;

        for i in lc.date_range(target) {
            let loc = &lc.cases[i].forecast.location_id;
            let c = model.cluster_of(loc)?;
            out.predictions.push(summaries[i].predictive(&fits[c]));
        }
    }
    Ok(out)
}
