//! Verification of raw, EMOS, QM and QM+W forecasts per (lead time, mixture).

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mixture_members, EmosOutput, LeadCases, PipelineSettings, QmOutput};
use crate::dist::{PredictiveCdf, StepCdf};
use crate::ensemble::{LeadTime, MixtureConfig};
use crate::error::{Error, Result};
use crate::verify::{
    brier_score, mean_score_ci, reliability, skill_score_ci, station_tests, BootstrapOptions, ConfidenceInterval,
    ScoreEntry, ScoreKind, ScoreSeries,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Raw,
    Emos,
    Qm,
    #[serde(rename = "qmw")]
    QmW,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Raw, Method::Emos, Method::Qm, Method::QmW];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Emos => "emos",
            Method::Qm => "qm",
            Method::QmW => "qmw",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub lead_time: LeadTime,
    pub mixture: MixtureConfig,
    /// `crps`, `bs`, `crpss` or `bss`; skill scores are relative to the raw ensemble.
    pub score_kind: String,
    pub threshold: Option<f64>,
    pub mean: f64,
    /// Missing when the series is too short to bootstrap.
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub method: Method,
    pub mixture: MixtureConfig,
    pub lead_time: LeadTime,
    pub threshold: f64,
    pub bin: usize,
    pub mean_prob: Option<f64>,
    pub obs_freq: Option<f64>,
    pub count: usize,
    pub log10_freq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub method: Method,
    pub reference: Method,
    pub mixture: MixtureConfig,
    pub lead_time: LeadTime,
    pub score_kind: ScoreKind,
    pub threshold: Option<f64>,
    pub stations: usize,
    pub significant: usize,
    pub share: f64,
    /// Significant stations where `method` scored better than the reference.
    pub significant_better: usize,
    pub skipped: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: Method,
    pub mixture: MixtureConfig,
    pub lead_time: LeadTime,
    pub mean_crps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub fits: usize,
    pub converged: usize,
    pub warm_started: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: Vec<ReportRow>,
    pub reliability: Vec<ReliabilityRow>,
    pub significance: Vec<SignificanceRow>,
    pub curves: Vec<CurvePoint>,
    pub fits: FitSummary,
}

impl Evaluation {
    /// Mean CRPS of `method` for one (lead, mixture), if it was evaluated.
    pub fn mean_crps(&self, method: Method, lead: LeadTime, mixture: &MixtureConfig) -> Option<f64> {
        self.curves
            .iter()
            .find(|c| c.method == method && c.lead_time == lead && c.mixture == *mixture)
            .map(|c| c.mean_crps)
    }
}

enum Forecast {
    Csg(crate::dist::CsgParams),
    Step(StepCdf),
}

impl Forecast {
    fn as_cdf(&self) -> &dyn PredictiveCdf {
        match self {
            Forecast::Csg(p) => p,
            Forecast::Step(s) => s,
        }
    }
}

struct UnitResult {
    report: Vec<ReportRow>,
    reliability: Vec<ReliabilityRow>,
    significance: Vec<SignificanceRow>,
    curves: Vec<CurvePoint>,
}

fn optional_ci(result: Result<ConfidenceInterval>) -> Result<Option<ConfidenceInterval>> {
    match result {
        Ok(ci) => Ok(Some(ci)),
        Err(Error::InsufficientSeries { needed, got }) => {
            log::warn!("series of {got} dates is too short to bootstrap (need {needed}); CI omitted");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn evaluate_unit(
    lc: &LeadCases<'_>,
    mixture: &MixtureConfig,
    emos: Option<&EmosOutput>,
    qm: Option<&QmOutput>,
    settings: &PipelineSettings,
) -> Result<UnitResult> {
    let v = &settings.verify;
    let min_hist = settings.qm.min_histogram_cases;
    let mut methods = vec![Method::Raw];
    if emos.is_some_and(|e| !e.predictions.is_empty()) {
        methods.push(Method::Emos);
    }
    if qm.is_some() {
        methods.extend([Method::Qm, Method::QmW]);
    }
    let n_scores = 1 + v.thresholds.len();
    // entries[method][score]
    let mut entries: Vec<Vec<Vec<ScoreEntry>>> = vec![vec![Vec::with_capacity(lc.verification.len()); n_scores]; methods.len()];
    // pairs[method][threshold]
    let mut pairs: Vec<Vec<Vec<(f64, bool)>>> = vec![vec![Vec::with_capacity(lc.verification.len()); v.thresholds.len()]; methods.len()];

    for (k, case) in lc.verification_cases().enumerate() {
        let y = case.observation;
        for (mi, method) in methods.iter().enumerate() {
            let forecast = match method {
                Method::Raw => Forecast::Step(StepCdf::uniform(&mixture_members(case, mixture))?),
                Method::Emos => Forecast::Csg(emos.expect("EMOS output present").predictions[k]),
                Method::Qm => Forecast::Step(qm.expect("QM output present").cases[k].qm_cdf(mixture)?),
                Method::QmW => Forecast::Step(qm.expect("QM output present").cases[k].qmw_cdf(case, mixture, min_hist)?),
            };
            let f = forecast.as_cdf();
            let entry = |value: f64| ScoreEntry {
                location_id: case.forecast.location_id.clone(),
                valid_time: case.forecast.valid_time,
                value,
            };
            entries[mi][0].push(entry(f.crps(y)));
            for (ti, &t) in v.thresholds.iter().enumerate() {
                entries[mi][1 + ti].push(entry(brier_score(f, t, y)));
                pairs[mi][ti].push(((1.0 - f.cdf(t)).clamp(0.0, 1.0), y > t));
            }
        }
    }

    let series: Vec<Vec<ScoreSeries>> = entries
        .into_iter()
        .map(|per_score| {
            per_score
                .into_iter()
                .enumerate()
                .map(|(si, e)| {
                    if si == 0 {
                        ScoreSeries::new(ScoreKind::Crps, None, e)
                    } else {
                        ScoreSeries::new(ScoreKind::Brier, Some(v.thresholds[si - 1]), e)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let boot = BootstrapOptions {
        n_boot: v.n_boot,
        mean_block_length: v.block_length,
        seed: settings.seed,
        level: v.level,
    };
    let mut out = UnitResult {
        report: Vec::new(),
        reliability: Vec::new(),
        significance: Vec::new(),
        curves: Vec::new(),
    };
    for (mi, &method) in methods.iter().enumerate() {
        for (si, s) in series[mi].iter().enumerate() {
            let kind = s.kind.as_str();
            let ci = optional_ci(mean_score_ci(s, &boot))?;
            out.report.push(ReportRow {
                method,
                lead_time: lc.lead,
                mixture: *mixture,
                score_kind: kind.into(),
                threshold: s.threshold,
                mean: s.mean(),
                ci_lo: ci.map(|c| c.lo),
                ci_hi: ci.map(|c| c.hi),
            });
            if si == 0 {
                out.curves.push(CurvePoint {
                    method,
                    mixture: *mixture,
                    lead_time: lc.lead,
                    mean_crps: s.mean(),
                });
            }
            let reference = &series[0][si];
            let skill_kind = if si == 0 { "crpss" } else { "bss" };
            match skill_score_ci(s, reference, &boot) {
                Err(Error::ZeroReference) => {
                    log::warn!("{skill_kind} of {method} undefined at lead {} for {mixture}: zero reference score", lc.lead)
                }
                result => {
                    let ci = optional_ci(result)?;
                    let mean = crate::verify::crpss(s.mean(), reference.mean())?;
                    out.report.push(ReportRow {
                        method,
                        lead_time: lc.lead,
                        mixture: *mixture,
                        score_kind: skill_kind.into(),
                        threshold: s.threshold,
                        mean,
                        ci_lo: ci.map(|c| c.lo),
                        ci_hi: ci.map(|c| c.hi),
                    });
                }
            }
            if method != Method::Raw {
                let tests = station_tests(s, reference, lc.lead.days().max(1) as usize, v.fdr)?;
                let better = tests
                    .locations
                    .iter()
                    .zip(&tests.results)
                    .filter(|(loc, r)| tests.rejected.contains(*loc) && r.statistic < 0.0)
                    .count();
                out.significance.push(SignificanceRow {
                    method,
                    reference: Method::Raw,
                    mixture: *mixture,
                    lead_time: lc.lead,
                    score_kind: s.kind,
                    threshold: s.threshold,
                    stations: tests.locations.len(),
                    significant: tests.rejected.len(),
                    share: tests.significant_share(),
                    significant_better: better,
                    skipped: tests.skipped,
                    degenerate: tests.results.iter().filter(|r| r.degenerate).count(),
                });
            }
        }
        for (ti, &t) in v.thresholds.iter().enumerate() {
            let diagram = reliability(&pairs[mi][ti], v.reliability_bins)?;
            out.reliability
                .extend(diagram.bins.iter().enumerate().map(|(b, bin)| ReliabilityRow {
                    method,
                    mixture: *mixture,
                    lead_time: lc.lead,
                    threshold: t,
                    bin: b,
                    mean_prob: bin.mean_prob,
                    obs_freq: bin.obs_freq,
                    count: bin.count,
                    log10_freq: bin.log10_freq,
                }));
        }
    }
    Ok(out)
}

/// Scores every method for every (lead, mixture). `emos` must be in the order produced by
/// [`super::run_emos_stage`]; `qm` in lead order.
pub fn evaluate(
    leads: &[LeadCases<'_>],
    emos: &[EmosOutput],
    qm: Option<&[QmOutput]>,
    settings: &PipelineSettings,
) -> Result<Evaluation> {
    let units: Vec<(usize, usize)> = (0..leads.len())
        .flat_map(|l| (0..settings.mixtures.len()).map(move |m| (l, m)))
        .collect();
    let results: Vec<UnitResult> = units
        .par_iter()
        .map(|&(l, m)| {
            let mixture = &settings.mixtures[m];
            let e = emos
                .iter()
                .find(|e| e.lead == leads[l].lead && e.mixture == *mixture);
            let q = qm.and_then(|q| q.iter().find(|q| q.lead == leads[l].lead));
            evaluate_unit(&leads[l], mixture, e, q, settings)
        })
        .collect::<Result<_>>()?;
    let mut eval = Evaluation::default();
    for r in results {
        eval.report.extend(r.report);
        eval.reliability.extend(r.reliability);
        eval.significance.extend(r.significance);
        eval.curves.extend(r.curves);
    }
    for e in emos {
        eval.fits.fits += e.coefficients.len();
        eval.fits.converged += e.coefficients.iter().filter(|c| c.converged).count();
        eval.fits.warm_started += e.coefficients.iter().filter(|c| c.warm_start).count();
    }
    Ok(eval)
}
