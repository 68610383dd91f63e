//! Forecast cases, dual-resolution mixtures and rolling training windows.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocationId(pub String);

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LocationId {
    fn from(s: &str) -> Self {
        LocationId(s.to_string())
    }
}

/// Forecast lead time in hours.
///
/// Accumulations run 06 UTC to 06 UTC from a 00 UTC start, so lead day `d`
/// ends at `24 d + 6` hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LeadTime(pub u32);

impl LeadTime {
    pub fn from_days(days: u32) -> Self {
        LeadTime(24 * days + 6)
    }

    pub fn hours(self) -> u32 {
        self.0
    }

    pub fn days(self) -> u32 {
        self.0 / 24
    }
}

impl fmt::Display for LeadTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}h", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    High,
    Low,
}

impl Resolution {
    pub fn as_str(self) -> &'static str {
        match self {
            Resolution::High => "high",
            Resolution::Low => "low",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "high" | "H" | "h" => Some(Resolution::High),
            "low" | "L" | "l" => Some(Resolution::Low),
            _ => None,
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Exchangeable members of one resolution. Empty groups are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberGroup {
    pub label: Resolution,
    members: Vec<f64>,
}

impl MemberGroup {
    pub fn new(label: Resolution, members: Vec<f64>) -> Result<Self> {
        if let Some(bad) = members.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidForecast(format!(
                "{label} member value {bad} is not a finite non-negative amount"
            )));
        }
        Ok(MemberGroup { label, members })
    }

    pub fn members(&self) -> &[f64] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.members.is_empty() {
            None
        } else {
            Some(self.members.iter().sum::<f64>() / self.members.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleForecast {
    pub location_id: LocationId,
    pub valid_time: NaiveDate,
    pub lead_time: LeadTime,
    groups: Vec<MemberGroup>,
}

/// Per-group means of the non-empty groups together with the overall mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMeans {
    pub groups: Vec<(Resolution, f64)>,
    pub overall: f64,
}

impl GroupMeans {
    pub fn get(&self, label: Resolution) -> Option<f64> {
        self.groups
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, m)| *m)
    }
}

impl EnsembleForecast {
    pub fn new(
        location_id: LocationId,
        valid_time: NaiveDate,
        lead_time: LeadTime,
        groups: Vec<MemberGroup>,
    ) -> Result<Self> {
        if lead_time.0 == 0 {
            return Err(Error::InvalidForecast("lead time must be positive".into()));
        }
        if groups.iter().all(MemberGroup::is_empty) {
            return Err(Error::InvalidForecast(format!(
                "forecast for {location_id} on {valid_time} has no members"
            )));
        }
        Ok(EnsembleForecast {
            location_id,
            valid_time,
            lead_time,
            groups,
        })
    }

    pub fn groups(&self) -> &[MemberGroup] {
        &self.groups
    }

    pub fn group(&self, label: Resolution) -> Option<&MemberGroup> {
        self.groups.iter().find(|g| g.label == label)
    }

    pub fn member_count(&self) -> usize {
        self.groups.iter().map(MemberGroup::len).sum()
    }

    pub fn members(&self) -> impl Iterator<Item = f64> + '_ {
        self.groups.iter().flat_map(|g| g.members.iter().copied())
    }

    pub fn group_means(&self) -> GroupMeans {
        let groups = self
            .groups
            .iter()
            .filter_map(|g| g.mean().map(|m| (g.label, m)))
            .collect();
        let total: f64 = self.members().sum();
        GroupMeans {
            groups,
            overall: total / self.member_count() as f64,
        }
    }

    /// Restricts the forecast to the first `m_high` high- and `m_low` low-resolution members.
    pub fn select(&self, mixture: &MixtureConfig) -> Result<EnsembleForecast> {
        let mut groups = Vec::with_capacity(2);
        for (label, count) in [
            (Resolution::High, mixture.m_high as usize),
            (Resolution::Low, mixture.m_low as usize),
        ] {
            let available = self.group(label).map_or(0, MemberGroup::len);
            if available < count {
                return Err(Error::InvalidForecast(format!(
                    "mixture {mixture} needs {count} {label} members, forecast has {available}"
                )));
            }
            if count > 0 {
                let members = self.group(label).map(|g| g.members[..count].to_vec());
                groups.push(MemberGroup {
                    label,
                    members: members.unwrap_or_default(),
                });
            }
        }
        EnsembleForecast::new(
            self.location_id.clone(),
            self.valid_time,
            self.lead_time,
            groups,
        )
    }
}

/// Dual-resolution ensemble composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub m_high: u32,
    pub m_low: u32,
    /// Cost of one high-resolution member in low-resolution member units.
    #[serde(default = "default_cost_ratio")]
    pub cost_ratio: u32,
}

pub const DEFAULT_COST_RATIO: u32 = 4;

fn default_cost_ratio() -> u32 {
    DEFAULT_COST_RATIO
}

/// The equal-cost mixtures studied for a 50-member high-resolution budget.
pub const REFERENCE_MIXTURES: [(u32, u32); 5] = [(50, 0), (40, 40), (20, 120), (10, 160), (0, 200)];

impl MixtureConfig {
    pub fn new(m_high: u32, m_low: u32) -> Result<Self> {
        Self::with_cost_ratio(m_high, m_low, DEFAULT_COST_RATIO)
    }

    pub fn with_cost_ratio(m_high: u32, m_low: u32, cost_ratio: u32) -> Result<Self> {
        if m_high + m_low == 0 {
            return Err(Error::EmptyMixture { m_high, m_low });
        }
        if cost_ratio == 0 {
            return Err(Error::Config("cost ratio must be positive".into()));
        }
        Ok(MixtureConfig {
            m_high,
            m_low,
            cost_ratio,
        })
    }

    pub fn reference_set() -> Vec<MixtureConfig> {
        REFERENCE_MIXTURES
            .iter()
            .map(|&(h, l)| MixtureConfig::new(h, l).expect("reference mixtures are non-empty"))
            .collect()
    }

    /// Cost in high-resolution member units, as an exact fraction `(numerator, cost_ratio)`.
    pub fn cost_fraction(&self) -> (u64, u64) {
        (
            self.m_high as u64 * self.cost_ratio as u64 + self.m_low as u64,
            self.cost_ratio as u64,
        )
    }

    pub fn cost(&self) -> f64 {
        let (n, d) = self.cost_fraction();
        n as f64 / d as f64
    }

    pub fn is_pure_high(&self) -> bool {
        self.m_low == 0
    }

    pub fn is_pure_low(&self) -> bool {
        self.m_high == 0
    }

    pub fn total_members(&self) -> u32 {
        self.m_high + self.m_low
    }

    pub fn label(&self) -> String {
        format!("({},{})", self.m_high, self.m_low)
    }
}

impl fmt::Display for MixtureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.m_high, self.m_low)
    }
}

/// Parses `(h,l)` or `h,l`, with the default cost ratio.
impl std::str::FromStr for MixtureConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let bad = || Error::Config(format!("invalid mixture {s:?}, expected (m_high,m_low)"));
        let (h, l) = inner.split_once(',').ok_or_else(bad)?;
        let h = h.trim().parse().map_err(|_| bad())?;
        let l = l.trim().parse().map_err(|_| bad())?;
        MixtureConfig::new(h, l)
    }
}

/// True iff the mixture costs exactly `budget` high-resolution members.
pub fn validate_mixture(cfg: &MixtureConfig, budget: u32) -> bool {
    let (n, d) = cfg.cost_fraction();
    n == budget as u64 * d
}

pub fn cost_equivalent(a: &MixtureConfig, b: &MixtureConfig) -> bool {
    let (na, da) = a.cost_fraction();
    let (nb, db) = b.cost_fraction();
    na * db == nb * da
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastCase {
    pub forecast: EnsembleForecast,
    pub observation: f64,
}

impl ForecastCase {
    pub fn new(forecast: EnsembleForecast, observation: f64) -> Result<Self> {
        if !observation.is_finite() || observation < 0.0 {
            return Err(Error::InvalidForecast(format!(
                "observation {observation} is not a finite non-negative amount"
            )));
        }
        Ok(ForecastCase {
            forecast,
            observation,
        })
    }
}

/// Archived forecast with a small ensemble per resolution, used to build quantile-mapping
/// climatologies and closest-member histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReforecastCase {
    pub location_id: LocationId,
    pub valid_time: NaiveDate,
    pub lead_time: LeadTime,
    pub observation: f64,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
}

impl ReforecastCase {
    pub fn members(&self, resolution: Resolution) -> &[f64] {
        match resolution {
            Resolution::High => &self.high,
            Resolution::Low => &self.low,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOptions {
    pub length_days: u32,
    pub allow_partial_windows: bool,
    /// Pool all locations into one window per date; otherwise one window per (date, location).
    pub pool_locations: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        WindowOptions {
            length_days: 30,
            allow_partial_windows: false,
            pool_locations: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingWindow {
    pub target_date: NaiveDate,
    pub length_days: u32,
    /// Set when the window was built for a single location.
    pub location: Option<LocationId>,
    pub cases: Vec<ForecastCase>,
}

impl RollingWindow {
    /// First calendar day covered by a window ending the day before `target`.
    pub fn start_date(target: NaiveDate, length_days: u32) -> NaiveDate {
        target - Days::new(length_days as u64)
    }

    pub fn contains_date(&self, date: NaiveDate) -> bool {
        date < self.target_date && date >= Self::start_date(self.target_date, self.length_days)
    }
}

/// Indices into `dates` (sorted ascending) whose date lies in `[target - length, target)`.
pub fn window_range(dates: &[NaiveDate], target: NaiveDate, length_days: u32) -> std::ops::Range<usize> {
    let start = RollingWindow::start_date(target, length_days);
    let lo = dates.partition_point(|d| *d < start);
    let hi = dates.partition_point(|d| *d < target);
    lo..hi
}

/// Builds one rolling training window per verification date from the cases of the
/// `length_days` calendar days strictly preceding it. Callers wanting per-lead-time
/// windows filter the dataset by lead time first.
pub fn assemble_windows(
    dataset: &[ForecastCase],
    verification_dates: &[NaiveDate],
    options: WindowOptions,
) -> Result<Vec<RollingWindow>> {
    if options.length_days == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (&dataset[a].forecast, &dataset[b].forecast);
        fa.valid_time
            .cmp(&fb.valid_time)
            .then_with(|| fa.location_id.cmp(&fb.location_id))
            .then_with(|| fa.lead_time.cmp(&fb.lead_time))
    });
    let dates: Vec<NaiveDate> = order
        .iter()
        .map(|&i| dataset[i].forecast.valid_time)
        .collect();
    let earliest = dates.first().copied();

    let mut windows = Vec::new();
    for &target in verification_dates {
        let start = RollingWindow::start_date(target, options.length_days);
        let range = window_range(&dates, target, options.length_days);
        if range.is_empty() {
            return Err(Error::EmptyWindow { target });
        }
        if !options.allow_partial_windows && earliest.is_some_and(|e| e > start) {
            return Err(Error::insufficient(
                options.length_days as usize,
                (target - earliest.unwrap_or(start)).num_days().max(0) as usize,
                format!("days of history before {target}"),
            ));
        }
        let selected = order[range].iter().map(|&i| &dataset[i]);
        if options.pool_locations {
            windows.push(RollingWindow {
                target_date: target,
                length_days: options.length_days,
                location: None,
                cases: selected.cloned().collect(),
            });
        } else {
            let mut by_location: BTreeMap<&LocationId, Vec<ForecastCase>> = BTreeMap::new();
            for case in selected {
                by_location
                    .entry(&case.forecast.location_id)
                    .or_default()
                    .push(case.clone());
            }
            for (location, cases) in by_location {
                windows.push(RollingWindow {
                    target_date: target,
                    length_days: options.length_days,
                    location: Some(location.clone()),
                    cases,
                });
            }
        }
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn day(n: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2016, 6, 1).unwrap() + Days::new(n)
    }

    fn forecast(loc: &str, date: NaiveDate, high: Vec<f64>, low: Vec<f64>) -> EnsembleForecast {
        EnsembleForecast::new(
            loc.into(),
            date,
            LeadTime::from_days(1),
            vec![
                MemberGroup::new(Resolution::High, high).unwrap(),
                MemberGroup::new(Resolution::Low, low).unwrap(),
            ],
        )
        .unwrap()
    }

    fn case(loc: &str, n: u64) -> ForecastCase {
        ForecastCase::new(forecast(loc, day(n), vec![1.0], vec![]), 0.5).unwrap()
    }

    #[test]
    fn reference_mixtures_cost_fifty() {
        for &(h, l) in &REFERENCE_MIXTURES {
            assert!(validate_mixture(&MixtureConfig::new(h, l).unwrap(), 50));
        }
        assert!(validate_mixture(&MixtureConfig::new(40, 40).unwrap(), 50));
        assert!(!validate_mixture(&MixtureConfig::new(20, 121).unwrap(), 50));
        assert!(matches!(
            MixtureConfig::new(0, 0),
            Err(Error::EmptyMixture { .. })
        ));
    }

    #[test]
    fn only_cost_line_mixtures_validate() {
        for h in 0..=50u32 {
            for l in (0..=200u32).step_by(4) {
                let Ok(cfg) = MixtureConfig::new(h, l) else {
                    continue;
                };
                assert_eq!(validate_mixture(&cfg, 50), 4 * h + l == 200, "({h},{l})");
            }
        }
    }

    #[test]
    fn group_means_example() {
        let f = forecast("A", day(0), vec![2.0, 4.0], vec![0.0, 0.0, 0.0, 4.0]);
        let m = f.group_means();
        assert_eq!(m.get(Resolution::High), Some(3.0));
        assert_eq!(m.get(Resolution::Low), Some(1.0));
        assert!((m.overall - 5.0 / 3.0).abs() < 1e-15);

        let single = forecast("A", day(0), vec![7.0], vec![]);
        let m = single.group_means();
        assert_eq!(m.groups, vec![(Resolution::High, 7.0)]);
        assert_eq!(m.overall, 7.0);
    }

    #[test]
    fn invalid_members_rejected() {
        assert!(MemberGroup::new(Resolution::High, vec![1.0, -0.1]).is_err());
        assert!(MemberGroup::new(Resolution::High, vec![f64::NAN]).is_err());
        assert!(EnsembleForecast::new(
            "A".into(),
            day(0),
            LeadTime(30),
            vec![MemberGroup::new(Resolution::High, vec![]).unwrap()]
        )
        .is_err());
        let f = forecast("A", day(0), vec![1.0], vec![]);
        assert!(ForecastCase::new(f, -1.0).is_err());
    }

    #[test]
    fn select_takes_leading_members() {
        let f = forecast("A", day(0), vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0, 7.0]);
        let mix = MixtureConfig::new(2, 4).unwrap();
        let s = f.select(&mix).unwrap();
        assert_eq!(s.group(Resolution::High).unwrap().members(), &[1.0, 2.0]);
        assert_eq!(s.member_count(), 6);
        let pure = f.select(&MixtureConfig::new(0, 3).unwrap()).unwrap();
        assert!(pure.group(Resolution::High).is_none());
        assert!(f.select(&MixtureConfig::new(4, 0).unwrap()).is_err());
    }

    #[test]
    fn lead_days_round_trip() {
        for d in [1, 3, 5, 7, 10] {
            assert_eq!(LeadTime::from_days(d).days(), d);
        }
        assert_eq!(LeadTime::from_days(1).hours(), 30);
        assert_eq!(LeadTime::from_days(10).hours(), 246);
    }

    #[test]
    fn window_holds_preceding_days() {
        let data: Vec<_> = (0..40).map(|n| case("A", n)).collect();
        let w = assemble_windows(&data, &[day(39)], WindowOptions::default()).unwrap();
        let dates: Vec<_> = w[0].cases.iter().map(|c| c.forecast.valid_time).collect();
        assert_eq!(dates, (9..39).map(day).collect::<Vec<_>>());
    }

    #[test]
    fn short_history_policy() {
        let data: Vec<_> = (0..40).map(|n| case("A", n)).collect();
        assert!(assemble_windows(&data, &[day(4)], WindowOptions::default()).is_err());
        let partial = WindowOptions {
            allow_partial_windows: true,
            ..WindowOptions::default()
        };
        let w = assemble_windows(&data, &[day(4)], partial).unwrap();
        assert_eq!(w[0].cases.len(), 4);
        assert!(matches!(
            assemble_windows(&data, &[day(0)], partial),
            Err(Error::EmptyWindow { .. })
        ));
    }

    #[test]
    fn pooling_flag() {
        let data: Vec<_> = (0..40)
            .flat_map(|n| [case("A", n), case("B", n)])
            .collect();
        let pooled = assemble_windows(&data, &[day(35)], WindowOptions::default()).unwrap();
        assert_eq!(pooled.len(), 1);
        assert_eq!(pooled[0].cases.len(), 60);
        let split = WindowOptions {
            pool_locations: false,
            ..WindowOptions::default()
        };
        let per_loc = assemble_windows(&data, &[day(35)], split).unwrap();
        assert_eq!(per_loc.len(), 2);
        assert_eq!(per_loc[1].location, Some("B".into()));
        assert!(per_loc.iter().all(|w| w.cases.len() == 30));
    }

    proptest! {
        #[test]
        fn group_means_permutation_invariant(mut high in prop::collection::vec(0.0f64..50.0, 1..20),
                                             mut low in prop::collection::vec(0.0f64..50.0, 0..20),
                                             rot in 0usize..20) {
            let a = forecast("A", day(0), high.clone(), low.clone()).group_means();
            let k = rot % high.len();
            high.rotate_left(k);
            high.reverse();
            low.reverse();
            let b = forecast("A", day(0), high, low).group_means();
            for ((la, ma), (lb, mb)) in a.groups.iter().zip(&b.groups) {
                prop_assert_eq!(la, lb);
                prop_assert!((ma - mb).abs() < 1e-12);
            }
            prop_assert!((a.overall - b.overall).abs() < 1e-12);
        }

        #[test]
        fn window_cases_predate_target(offsets in prop::collection::vec(0u64..120, 1..200),
                                       target in 31u64..130, len in 1u32..40) {
            let data: Vec<_> = offsets.iter().map(|&n| case("A", n)).collect();
            let opts = WindowOptions { length_days: len, allow_partial_windows: true, pool_locations: true };
            if let Ok(ws) = assemble_windows(&data, &[day(target)], opts) {
                for c in &ws[0].cases {
                    prop_assert!(c.forecast.valid_time < day(target));
                    prop_assert!(ws[0].contains_date(c.forecast.valid_time));
                }
                let expected = offsets.iter().filter(|&&n| n < target && n + len as u64 >= target).count();
                prop_assert_eq!(ws[0].cases.len(), expected);
            }
        }
    }
}
