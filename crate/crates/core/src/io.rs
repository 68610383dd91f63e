//! CSV and JSON ingestion and export.
//!
//! Forecasts and reforecasts share one long format, one row per member:
//! `location_id,valid_time,lead_time_h,obs_mm,group,member_idx,value_mm`.
//! Observations may also come from a companion `location_id,valid_time,obs_mm` file, which
//! takes precedence over the `obs_mm` column. Cases without an observation are dropped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::emos::EmosCoefficients;
use crate::ensemble::{EnsembleForecast, ForecastCase, LeadTime, LocationId, MemberGroup, MixtureConfig, ReforecastCase, Resolution};
use crate::error::{Error, Result};
use crate::pipeline::mapping::{aggregate_histograms, RESOLUTIONS};
use crate::pipeline::scoring::{CurvePoint, Evaluation, FitSummary, ReliabilityRow, ReportRow, SignificanceRow};
use crate::pipeline::{ClusterRecord, CoefficientRecord, LeadCases, QmOutput};

pub type ObservationMap = BTreeMap<(LocationId, NaiveDate), f64>;

#[derive(Debug, Serialize, Deserialize)]
struct MemberRow {
    location_id: String,
    valid_time: NaiveDate,
    lead_time_h: u32,
    obs_mm: Option<f64>,
    group: String,
    member_idx: usize,
    value_mm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRow {
    location_id: String,
    valid_time: NaiveDate,
    obs_mm: Option<f64>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn data_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Data(format!("line {}: {}", p.line(), e.kind_description())),
        None => Error::Data(e.to_string()),
    }
}

trait KindDescription {
    fn kind_description(&self) -> String;
}

impl KindDescription for csv::Error {
    fn kind_description(&self) -> String {
        match self.kind() {
            csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
            _ => self.to_string(),
        }
    }
}

fn check_amount(what: &str, v: f64, loc: &str, date: NaiveDate) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} {v} for {loc} on {date} is not a finite non-negative amount")))
    }
}

#[derive(Default)]
struct Accum {
    obs: Option<f64>,
    high: Vec<Option<f64>>,
    low: Vec<Option<f64>>,
}

type CaseKey = (LocationId, NaiveDate, LeadTime);

fn accumulate<R: Read>(reader: R) -> Result<BTreeMap<CaseKey, Accum>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut cases: BTreeMap<CaseKey, Accum> = BTreeMap::new();
    for row in rdr.deserialize::<MemberRow>() {
        let row = row.map_err(data_error)?;
        let group = Resolution::parse(&row.group)
            .ok_or_else(|| Error::Data(format!("unknown member group {:?}", row.group)))?;
        check_amount("member value", row.value_mm, &row.location_id, row.valid_time)?;
        if row.lead_time_h == 0 {
            return Err(Error::Data(format!("zero lead time for {} on {}", row.location_id, row.valid_time)));
        }
        if let Some(o) = row.obs_mm {
            check_amount("observation", o, &row.location_id, row.valid_time)?;
        }
        let key = (LocationId(row.location_id), row.valid_time, LeadTime(row.lead_time_h));
        let acc = cases.entry(key).or_default();
        if let Some(o) = row.obs_mm {
            match acc.obs {
                Some(prev) if prev != o => {
                    return Err(Error::Data(format!(
                        "conflicting observations {prev} and {o} within one forecast case"
                    )))
                }
                _ => acc.obs = Some(o),
            }
        }
        let slots = match group {
            Resolution::High => &mut acc.high,
            Resolution::Low => &mut acc.low,
        };
        if slots.len() <= row.member_idx {
            slots.resize(row.member_idx + 1, None);
        }
        if slots[row.member_idx].replace(row.value_mm).is_some() {
            return Err(Error::Data(format!("duplicate {group} member {}", row.member_idx)));
        }
    }
    Ok(cases)
}

fn members(key: &CaseKey, label: Resolution, slots: Vec<Option<f64>>) -> Result<Vec<f64>> {
    slots
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| {
                Error::Data(format!(
                    "{label} member {i} missing for {} on {} at lead {}",
                    key.0, key.1, key.2
                ))
            })
        })
        .collect()
}

fn resolve_obs(key: &CaseKey, acc_obs: Option<f64>, observations: Option<&ObservationMap>) -> Option<f64> {
    observations
        .and_then(|m| m.get(&(key.0.clone(), key.1)).copied())
        .or(acc_obs)
}

pub fn read_observations_from<R: Read>(reader: R) -> Result<ObservationMap> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    let mut missing = 0usize;
    for row in rdr.deserialize::<ObservationRow>() {
        let row = row.map_err(data_error)?;
        let Some(o) = row.obs_mm else {
            missing += 1;
            continue;
        };
        check_amount("observation", o, &row.location_id, row.valid_time)?;
        if out.insert((LocationId(row.location_id.clone()), row.valid_time), o).is_some() {
            return Err(Error::Data(format!("duplicate observation for {} on {}", row.location_id, row.valid_time)));
        }
    }
    if missing > 0 {
        log::info!("skipped {missing} empty observation rows");
    }
    Ok(out)
}

pub fn read_observations(path: &Path) -> Result<ObservationMap> {
    read_observations_from(open(path)?)
}

pub fn read_forecasts_from<R: Read>(reader: R, observations: Option<&ObservationMap>) -> Result<Vec<ForecastCase>> {
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (key, acc) in accumulate(reader)? {
        let Some(obs) = resolve_obs(&key, acc.obs, observations) else {
            dropped += 1;
            continue;
        };
        let high = members(&key, Resolution::High, acc.high)?;
        let low = members(&key, Resolution::Low, acc.low)?;
        let mut groups = Vec::with_capacity(2);
        for (label, m) in [(Resolution::High, high), (Resolution::Low, low)] {
            if !m.is_empty() {
                groups.push(MemberGroup::new(label, m)?);
            }
        }
        let (loc, date, lead) = key;
        out.push(ForecastCase::new(EnsembleForecast::new(loc, date, lead, groups)?, obs)?);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} forecast cases without an observation");
    }
    Ok(out)
}

pub fn read_forecasts(path: &Path, observations: Option<&Path>) -> Result<Vec<ForecastCase>> {
    let obs = observations.map(read_observations).transpose()?;
    read_forecasts_from(open(path)?, obs.as_ref())
}

pub fn read_reforecasts_from<R: Read>(reader: R, observations: Option<&ObservationMap>) -> Result<Vec<ReforecastCase>> {
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (key, acc) in accumulate(reader)? {
        let Some(observation) = resolve_obs(&key, acc.obs, observations) else {
            dropped += 1;
            continue;
        };
        let high = members(&key, Resolution::High, acc.high)?;
        let low = members(&key, Resolution::Low, acc.low)?;
        let (location_id, valid_time, lead_time) = key;
        out.push(ReforecastCase {
            location_id,
            valid_time,
            lead_time,
            observation,
            high,
            low,
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} reforecast cases without an observation");
    }
    Ok(out)
}

pub fn read_reforecasts(path: &Path, observations: Option<&Path>) -> Result<Vec<ReforecastCase>> {
    let obs = observations.map(read_observations).transpose()?;
    read_reforecasts_from(open(path)?, obs.as_ref())
}

fn write_members<W: Write>(
    wtr: &mut csv::Writer<W>,
    loc: &LocationId,
    date: NaiveDate,
    lead: LeadTime,
    obs: f64,
    group: Resolution,
    values: &[f64],
) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        wtr.serialize(MemberRow {
            location_id: loc.0.clone(),
            valid_time: date,
            lead_time_h: lead.hours(),
            obs_mm: Some(obs),
            group: group.as_str().into(),
            member_idx: i,
            value_mm: v,
        })?;
    }
    Ok(())
}

pub fn write_forecasts_to<W: Write>(writer: W, cases: &[ForecastCase]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for c in cases {
        let f = &c.forecast;
        for g in f.groups() {
            write_members(&mut wtr, &f.location_id, f.valid_time, f.lead_time, c.observation, g.label, g.members())?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_forecasts(path: &Path, cases: &[ForecastCase]) -> Result<()> {
    write_forecasts_to(create(path)?, cases)
}

pub fn write_reforecasts_to<W: Write>(writer: W, cases: &[ReforecastCase]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in cases {
        for label in RESOLUTIONS {
            write_members(&mut wtr, &r.location_id, r.valid_time, r.lead_time, r.observation, label, r.members(label))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_reforecasts(path: &Path, cases: &[ReforecastCase]) -> Result<()> {
    write_reforecasts_to(create(path)?, cases)
}

/// One observation per (location, date), taken from the first case seen.
pub fn write_observations_to<W: Write>(writer: W, cases: &[ForecastCase]) -> Result<()> {
    let obs: ObservationMap = cases
        .iter()
        .map(|c| ((c.forecast.location_id.clone(), c.forecast.valid_time), c.observation))
        .collect();
    let mut wtr = csv::Writer::from_writer(writer);
    for ((loc, date), o) in obs {
        wtr.serialize(ObservationRow {
            location_id: loc.0,
            valid_time: date,
            obs_mm: Some(o),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_observations(path: &Path, cases: &[ForecastCase]) -> Result<()> {
    write_observations_to(create(path)?, cases)
}

/// Writes `rows` as CSV with a header, even when there are no rows.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    wtr.write_record(header)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub mixture: String,
    pub cluster_id: usize,
    pub target_date: NaiveDate,
    pub lead_time_h: u32,
    pub a: f64,
    pub b_high: f64,
    pub b_low: f64,
    pub c: f64,
    pub d: f64,
    pub delta: f64,
    pub train_crps: f64,
    pub n_cases: usize,
    pub converged: bool,
}

const COEFFICIENT_HEADER: [&str; 13] = [
    "mixture", "cluster_id", "target_date", "lead_time_h", "a", "b_high", "b_low", "c", "d", "delta", "train_crps",
    "n_cases", "converged",
];

impl From<&CoefficientRecord> for CoefficientRow {
    fn from(r: &CoefficientRecord) -> Self {
        let k = &r.coefficients;
        CoefficientRow {
            mixture: r.mixture.label(),
            cluster_id: r.cluster_id,
            target_date: r.target_date,
            lead_time_h: r.lead_time.hours(),
            a: k.a,
            b_high: k.b_high,
            b_low: k.b_low,
            c: k.c,
            d: k.d,
            delta: k.delta,
            train_crps: r.train_crps,
            n_cases: r.n_cases,
            converged: r.converged,
        }
    }
}

impl CoefficientRow {
    pub fn coefficients(&self) -> EmosCoefficients {
        EmosCoefficients {
            a: self.a,
            b_high: self.b_high,
            b_low: self.b_low,
            c: self.c,
            d: self.d,
            delta: self.delta,
        }
    }

    pub fn mixture(&self) -> Result<MixtureConfig> {
        self.mixture.parse()
    }
}

pub fn write_coefficients<'a>(path: &Path, records: impl IntoIterator<Item = &'a CoefficientRecord>) -> Result<()> {
    write_csv(path, &COEFFICIENT_HEADER, records.into_iter().map(CoefficientRow::from))
}

pub fn read_coefficients(path: &Path) -> Result<Vec<CoefficientRow>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    rdr.deserialize().map(|r| r.map_err(data_error)).collect()
}

#[derive(Serialize)]
struct ClusterRow<'a> {
    mixture: String,
    lead_time_h: u32,
    target_date: NaiveDate,
    location_id: &'a str,
    cluster_id: usize,
}

pub fn write_clusters<'a>(path: &Path, records: impl IntoIterator<Item = &'a ClusterRecord>) -> Result<()> {
    write_csv(
        path,
        &["mixture", "lead_time_h", "target_date", "location_id", "cluster_id"],
        records.into_iter().map(|r| ClusterRow {
            mixture: r.mixture.label(),
            lead_time_h: r.lead_time.hours(),
            target_date: r.target_date,
            location_id: &r.location_id.0,
            cluster_id: r.cluster_id,
        }),
    )
}

/// Closest-member histograms summed over the verification cases of every lead.
pub fn write_histograms(path: &Path, outputs: &[QmOutput]) -> Result<()> {
    let mut rows = Vec::new();
    for out in outputs {
        for (label, mean_bin, counts) in aggregate_histograms(out) {
            rows.extend(
                counts
                    .into_iter()
                    .enumerate()
                    .map(|(bin, count)| (out.lead.hours(), label.as_str(), mean_bin, bin, count)),
            );
        }
    }
    write_csv(path, &["lead_time_h", "group", "mean_bin", "bin", "count"], rows)
}

/// Mapped members of every verification case, in the ingestion format.
pub fn write_qm_forecasts(path: &Path, leads: &[LeadCases<'_>], outputs: &[QmOutput]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    for (lc, out) in leads.iter().zip(outputs) {
        for (case, qm) in lc.verification_cases().zip(&out.cases) {
            let f = &case.forecast;
            for label in RESOLUTIONS {
                if let Some(map) = qm.resolution(label) {
                    write_members(&mut wtr, &f.location_id, f.valid_time, f.lead_time, case.observation, label, &map.mapped)?;
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct WeightRow<'a> {
    mixture: String,
    location_id: &'a str,
    valid_time: NaiveDate,
    lead_time_h: u32,
    group: &'static str,
    member_rank: usize,
    weight: f64,
}

/// QM+W member weights by rank within each group, scaled so they sum to one per
/// (mixture, case). Unless `all_dates` is set only the first verification date of each
/// lead is written; a full dump has one row per member per case per mixture.
pub fn write_weights(
    path: &Path,
    leads: &[LeadCases<'_>],
    outputs: &[QmOutput],
    mixtures: &[MixtureConfig],
    min_histogram_cases: u64,
    all_dates: bool,
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    wtr.write_record([
        "mixture", "location_id", "valid_time", "lead_time_h", "group", "member_rank", "weight",
    ])?;
    for (lc, out) in leads.iter().zip(outputs) {
        let first = lc.target_dates.first().copied();
        for mixture in mixtures {
            let total = mixture.total_members() as f64;
            for (case, qm) in lc.verification_cases().zip(&out.cases) {
                let f = &case.forecast;
                if !all_dates && Some(f.valid_time) != first {
                    continue;
                }
                for (label, mapped, w) in qm.weights(case, mixture, min_histogram_cases)? {
                    let share = mapped.len() as f64 / total;
                    for (rank, &x) in w.as_slice().iter().enumerate() {
                        wtr.serialize(WeightRow {
                            mixture: mixture.label(),
                            location_id: &f.location_id.0,
                            valid_time: f.valid_time,
                            lead_time_h: f.lead_time.hours(),
                            group: label.as_str(),
                            member_rank: rank,
                            weight: x * share,
                        })?;
                    }
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ReportCsvRow<'a> {
    method: &'static str,
    lead_time_h: u32,
    mixture: String,
    score_kind: &'a str,
    threshold: Option<f64>,
    mean: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_csv(
        path,
        &["method", "lead_time_h", "mixture", "score_kind", "threshold", "mean", "ci_lo", "ci_hi"],
        rows.iter().map(|r| ReportCsvRow {
            method: r.method.as_str(),
            lead_time_h: r.lead_time.hours(),
            mixture: r.mixture.label(),
            score_kind: &r.score_kind,
            threshold: r.threshold,
            mean: r.mean,
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
        }),
    )
}

#[derive(Serialize)]
struct ReliabilityCsvRow {
    method: &'static str,
    mixture: String,
    lead_time_h: u32,
    threshold: f64,
    bin: usize,
    mean_prob: Option<f64>,
    obs_freq: Option<f64>,
    count: usize,
    log10_freq: Option<f64>,
}

pub fn write_reliability(path: &Path, rows: &[ReliabilityRow]) -> Result<()> {
    write_csv(
        path,
        &[
            "method", "mixture", "lead_time_h", "threshold", "bin", "mean_prob", "obs_freq", "count", "log10_freq",
        ],
        rows.iter().map(|r| ReliabilityCsvRow {
            method: r.method.as_str(),
            mixture: r.mixture.label(),
            lead_time_h: r.lead_time.hours(),
            threshold: r.threshold,
            bin: r.bin,
            mean_prob: r.mean_prob,
            obs_freq: r.obs_freq,
            count: r.count,
            log10_freq: r.log10_freq,
        }),
    )
}

pub fn write_curves(path: &Path, rows: &[CurvePoint]) -> Result<()> {
    write_csv(
        path,
        &["method", "mixture", "lead_time_h", "mean_crps"],
        rows.iter()
            .map(|r| (r.method.as_str(), r.mixture.label(), r.lead_time.hours(), r.mean_crps)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceSummary {
    pub method: String,
    pub reference: String,
    pub mixture: String,
    pub lead_time_h: u32,
    pub score_kind: String,
    pub threshold: Option<f64>,
    pub stations: usize,
    pub significant: usize,
    pub significant_share: f64,
    pub significant_better: usize,
    pub skipped: usize,
    pub degenerate: usize,
}

impl From<&SignificanceRow> for SignificanceSummary {
    fn from(r: &SignificanceRow) -> Self {
        SignificanceSummary {
            method: r.method.as_str().into(),
            reference: r.reference.as_str().into(),
            mixture: r.mixture.label(),
            lead_time_h: r.lead_time.hours(),
            score_kind: r.score_kind.as_str().into(),
            threshold: r.threshold,
            stations: r.stations,
            significant: r.significant,
            significant_share: r.share,
            significant_better: r.significant_better,
            skipped: r.skipped,
            degenerate: r.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_verification_cases: usize,
    pub fits: FitSummary,
    pub significance: Vec<SignificanceSummary>,
}

impl Summary {
    pub fn new(leads: &[LeadCases<'_>], eval: &Evaluation) -> Self {
        Summary {
            n_verification_cases: leads.iter().map(|l| l.verification.len()).sum(),
            fits: eval.fits.clone(),
            significance: eval.significance.iter().map(SignificanceSummary::from).collect(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
