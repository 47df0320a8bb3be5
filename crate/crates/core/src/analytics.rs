//! Batch analytics over query records.
//!
//! Everything here is a pure function of its input stream. Day boundaries are
//! UTC unless a [`DayClock`] with a fixed offset is supplied. Proportions on
//! days with no traffic are undefined (`None`), never zero.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Utc, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::org::{Group, OrgGroups};
use crate::query_log::QueryRecord;
use crate::threat_intel::Class;

pub const ALL_SCOPE: &str = "ALL";
pub const DEFAULT_SPIKE_FLOOR: f64 = 10.0;
pub const MIN_WEEKDAY_PROFILE_DAYS: usize = 14;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("org `{0}` has no group binding")]
    UnknownOrg(String),
    #[error("group `{0}` has no data")]
    MissingGroup(Group),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl AnalyticsError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalyticsError::UnknownOrg(_) => "UNKNOWN_ORG",
            AnalyticsError::MissingGroup(_) => "MISSING_GROUP",
            AnalyticsError::Precondition(_) => "PRECONDITION",
        }
    }
}

/// Maps timestamps to calendar days at a fixed UTC offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DayClock {
    pub offset_minutes: i32,
}

impl DayClock {
    pub const UTC: DayClock = DayClock { offset_minutes: 0 };

    pub fn date_of(&self, ts: DateTime<Utc>) -> NaiveDate {
        (ts + Duration::minutes(i64::from(self.offset_minutes))).date_naive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyAggregate {
    pub date: NaiveDate,
    pub org_id: String,
    pub total: u64,
    pub malicious: u64,
    pub grey: u64,
    pub benign: u64,
    pub distinct_qnames: u64,
}

impl DailyAggregate {
    pub fn count(&self, class: Class) -> u64 {
        match class {
            Class::Malicious => self.malicious,
            Class::Grey => self.grey,
            Class::Benign => self.benign,
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.malicious + self.grey + self.benign == self.total
    }
}

pub fn daily_aggregate<I, R>(records: I) -> Vec<DailyAggregate>
where
    I: IntoIterator<Item = R>,
    R: Borrow<QueryRecord>,
{
    daily_aggregate_with(records, DayClock::UTC)
}

/// One aggregate per (org, date) with at least one record, sorted by date then org.
pub fn daily_aggregate_with<I, R>(records: I, clock: DayClock) -> Vec<DailyAggregate>
where
    I: IntoIterator<Item = R>,
    R: Borrow<QueryRecord>,
{
    let mut cells: HashMap<(NaiveDate, String), ([u64; 3], HashSet<String>)> = HashMap::new();
    for r in records {
        let r = r.borrow();
        let key = (clock.date_of(r.ts), r.org_id.clone());
        let (counts, names) = cells.entry(key).or_default();
        counts[r.class as usize] += 1;
        if !names.contains(&r.qname) {
            names.insert(r.qname.clone());
        }
    }
    let mut out: Vec<DailyAggregate> = cells
        .into_iter()
        .map(|((date, org_id), (c, names))| DailyAggregate {
            date,
            org_id,
            total: c.iter().sum(),
            benign: c[Class::Benign as usize],
            grey: c[Class::Grey as usize],
            malicious: c[Class::Malicious as usize],
            distinct_qnames: names.len() as u64,
        })
        .collect();
    out.sort_by(|a, b| (a.date, &a.org_id).cmp(&(b.date, &b.org_id)));
    out
}

/// Dense list of dates from the first to the last aggregate.
pub fn date_range(aggs: &[DailyAggregate]) -> Vec<NaiveDate> {
    let lo = aggs.iter().map(|a| a.date).min();
    let hi = aggs.iter().map(|a| a.date).max();
    match (lo, hi) {
        (Some(lo), Some(hi)) => lo.iter_days().take_while(|d| *d <= hi).collect(),
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Org,
    Group,
    All,
}

impl FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "org" => Ok(GroupBy::Org),
            "group" => Ok(GroupBy::Group),
            "all" => Ok(GroupBy::All),
            other => Err(format!("unknown grouping `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionPoint {
    pub date: NaiveDate,
    pub scope: String,
    /// `None` when the scope had no traffic that day.
    pub value: Option<f64>,
}

impl ProportionPoint {
    pub fn defined(&self) -> bool {
        self.value.is_some()
    }
}

fn scope_key(org: &str, by: GroupBy, groups: &OrgGroups) -> Result<String, AnalyticsError> {
    Ok(match by {
        GroupBy::Org => org.to_string(),
        GroupBy::All => ALL_SCOPE.to_string(),
        GroupBy::Group => groups
            .group_of(org)
            .ok_or_else(|| AnalyticsError::UnknownOrg(org.to_string()))?
            .to_string(),
    })
}

/// Pooled class proportion per (scope, date): Σclass / Σtotal over the
/// scope's orgs. Every scope gets a point for every date in the data range.
pub fn proportion_series(
    aggs: &[DailyAggregate],
    class: Class,
    by: GroupBy,
    groups: &OrgGroups,
) -> Result<Vec<ProportionPoint>, AnalyticsError> {
    let mut sums: BTreeMap<String, BTreeMap<NaiveDate, (u64, u64)>> = BTreeMap::new();
    for a in aggs {
        let scope = scope_key(&a.org_id, by, groups)?;
        let cell = sums.entry(scope).or_default().entry(a.date).or_default();
        cell.0 += a.count(class);
        cell.1 += a.total;
    }
    let dates = date_range(aggs);
    let mut out = Vec::with_capacity(dates.len() * sums.len());
    for (scope, by_date) in &sums {
        for d in &dates {
            let value = match by_date.get(d) {
                Some(&(n, total)) if total > 0 => Some(n as f64 / total as f64),
                _ => None,
            };
            out.push(ProportionPoint { date: *d, scope: scope.clone(), value });
        }
    }
    Ok(out)
}

/// Top `n` names by count, descending, ties broken by name. Excluded names are
/// removed before ranking.
pub fn top_domains<I, R>(records: I, n: usize, exclude: &HashSet<String>) -> Result<Vec<(String, u64)>, AnalyticsError>
where
    I: IntoIterator<Item = R>,
    R: Borrow<QueryRecord>,
{
    if n == 0 {
        return Err(AnalyticsError::Precondition("n must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for r in records {
        let r = r.borrow();
        if exclude.contains(&r.qname) {
            continue;
        }
        match counts.get_mut(&r.qname) {
            Some(c) => *c += 1,
            None => {
                counts.insert(r.qname.clone(), 1);
            }
        }
    }
    Ok(rank_counts(counts, n))
}

pub fn rank_counts(counts: HashMap<String, u64>, n: usize) -> Vec<(String, u64)> {
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(n);
    ranked
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeriesKey {
    pub qname: String,
    /// `None` for the unsplit series.
    pub org: Option<String>,
}

/// Daily counts per requested name, dense over the observed date range.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DomainSeries {
    pub dates: Vec<NaiveDate>,
    pub series: BTreeMap<SeriesKey, Vec<u64>>,
}

pub fn domain_series<I, R>(
    records: I,
    qnames: &BTreeSet<String>,
    by_org: bool,
) -> Result<DomainSeries, AnalyticsError>
where
    I: IntoIterator<Item = R>,
    R: Borrow<QueryRecord>,
{
    domain_series_with(records, qnames, by_org, DayClock::UTC)
}

pub fn domain_series_with<I, R>(
    records: I,
    qnames: &BTreeSet<String>,
    by_org: bool,
    clock: DayClock,
) -> Result<DomainSeries, AnalyticsError>
where
    I: IntoIterator<Item = R>,
    R: Borrow<QueryRecord>,
{
    if qnames.is_empty() {
        return Err(AnalyticsError::Precondition("at least one qname is required".into()));
    }
    let mut lo: Option<NaiveDate> = None;
    let mut hi: Option<NaiveDate> = None;
    let mut hits: HashMap<SeriesKey, HashMap<NaiveDate, u64>> = HashMap::new();
    for r in records {
        let r = r.borrow();
        let d = clock.date_of(r.ts);
        lo = Some(lo.map_or(d, |l| l.min(d)));
        hi = Some(hi.map_or(d, |h| h.max(d)));
        if !qnames.contains(&r.qname) {
            continue;
        }
        let org = by_org.then(|| r.org_id.clone());
        *hits
            .entry(SeriesKey { qname: r.qname.clone(), org })
            .or_default()
            .entry(d)
            .or_default() += 1;
    }
    let dates: Vec<NaiveDate> = match (lo, hi) {
        (Some(lo), Some(hi)) => lo.iter_days().take_while(|d| *d <= hi).collect(),
        _ => Vec::new(),
    };
    let mut series = BTreeMap::new();
    if !by_org {
        for q in qnames {
            series.insert(SeriesKey { qname: q.clone(), org: None }, vec![0; dates.len()]);
        }
    }
    for (key, per_day) in hits {
        let row = dates.iter().map(|d| per_day.get(d).copied().unwrap_or(0)).collect();
        series.insert(key, row);
    }
    Ok(DomainSeries { dates, series })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MaliciousCount,
    GreyCount,
    MaliciousProportion,
    GreyProportion,
    TotalCount,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MaliciousCount => "malicious_count",
            Metric::GreyCount => "grey_count",
            Metric::MaliciousProportion => "malicious_proportion",
            Metric::GreyProportion => "grey_proportion",
            Metric::TotalCount => "total_count",
        }
    }

    fn value(self, malicious: u64, grey: u64, total: u64) -> Option<f64> {
        let prop = |n: u64| (total > 0).then(|| n as f64 / total as f64);
        match self {
            Metric::MaliciousCount => Some(malicious as f64),
            Metric::GreyCount => Some(grey as f64),
            Metric::TotalCount => Some(total as f64),
            Metric::MaliciousProportion => prop(malicious),
            Metric::GreyProportion => prop(grey),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "malicious_count" | "malicious" => Ok(Metric::MaliciousCount),
            "grey_count" | "grey" => Ok(Metric::GreyCount),
            "malicious_proportion" => Ok(Metric::MaliciousProportion),
            "grey_proportion" => Ok(Metric::GreyProportion),
            "total_count" | "total" => Ok(Metric::TotalCount),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Daily metric values for one scope (`ALL`, an org id, or a group name),
/// dense over the data range. Counts are 0 on empty days; proportions are
/// `None`.
pub fn metric_series(
    aggs: &[DailyAggregate],
    metric: Metric,
    scope: &str,
    groups: &OrgGroups,
) -> Vec<(NaiveDate, Option<f64>)> {
    let in_scope = |org: &str| {
        scope == ALL_SCOPE || scope == org || groups.group_of(org).is_some_and(|g| g.as_str() == scope)
    };
    let mut cells: BTreeMap<NaiveDate, (u64, u64, u64)> = BTreeMap::new();
    for a in aggs.iter().filter(|a| in_scope(&a.org_id)) {
        let c = cells.entry(a.date).or_default();
        c.0 += a.malicious;
        c.1 += a.grey;
        c.2 += a.total;
    }
    date_range(aggs)
        .into_iter()
        .map(|d| {
            let (m, g, t) = cells.get(&d).copied().unwrap_or_default();
            (d, metric.value(m, g, t))
        })
        .collect()
}

/// Only the defined points of a series.
pub fn defined_points(series: &[(NaiveDate, Option<f64>)]) -> Vec<(NaiveDate, f64)> {
    series.iter().filter_map(|(d, v)| v.map(|v| (*d, v))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpikeMode {
    /// Value at least `ratio` times the maximum of every other day.
    GlobalPeak,
    /// Value at least `ratio` times the median of the preceding window.
    RollingMedian,
}

impl FromStr for SpikeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "globalpeak" | "peak" => Ok(SpikeMode::GlobalPeak),
            "rollingmedian" | "median" => Ok(SpikeMode::RollingMedian),
            other => Err(format!("unknown spike mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeConfig {
    pub ratio: f64,
    pub mode: SpikeMode,
    pub window: usize,
    /// With a zero median baseline a day is flagged only above this floor.
    pub floor: f64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        SpikeConfig { ratio: 2.0, mode: SpikeMode::GlobalPeak, window: 7, floor: DEFAULT_SPIKE_FLOOR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeFinding {
    pub date: NaiveDate,
    pub scope: String,
    pub metric: Metric,
    pub value: f64,
    pub baseline: f64,
    /// `value / baseline`; infinite when the baseline is zero.
    pub ratio: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn detect_spikes(
    series: &[(NaiveDate, f64)],
    scope: &str,
    metric: Metric,
    cfg: &SpikeConfig,
) -> Result<Vec<SpikeFinding>, AnalyticsError> {
    if !(cfg.ratio >= 1.0) {
        return Err(AnalyticsError::Precondition(format!("spike ratio {} must be >= 1", cfg.ratio)));
    }
    let finding = |i: usize, baseline: f64| {
        let (date, value) = series[i];
        SpikeFinding { date, scope: scope.to_string(), metric, value, baseline, ratio: value / baseline }
    };
    let mut out = Vec::new();
    match cfg.mode {
        SpikeMode::GlobalPeak => {
            if series.len() < 2 {
                return Err(AnalyticsError::Precondition("global peak needs at least 2 days".into()));
            }
            // Largest and second-largest give max-of-others for every index.
            let mut top = (f64::NEG_INFINITY, usize::MAX);
            let mut second = f64::NEG_INFINITY;
            for (i, (_, v)) in series.iter().enumerate() {
                if *v > top.0 {
                    second = top.0;
                    top = (*v, i);
                } else if *v > second {
                    second = *v;
                }
            }
            for (i, (_, v)) in series.iter().enumerate() {
                let others = if i == top.1 { second } else { top.0 };
                let flagged = if others > 0.0 { *v >= cfg.ratio * others } else { *v > 0.0 };
                if flagged {
                    out.push(finding(i, others));
                }
            }
        }
        SpikeMode::RollingMedian => {
            if cfg.window == 0 || series.len() < cfg.window + 1 {
                return Err(AnalyticsError::Precondition(format!(
                    "rolling median needs at least window+1 = {} days",
                    cfg.window + 1
                )));
            }
            for i in cfg.window..series.len() {
                let mut win: Vec<f64> = series[i - cfg.window..i].iter().map(|p| p.1).collect();
                let base = median(&mut win);
                let v = series[i].1;
                let flagged = if base > 0.0 { v >= cfg.ratio * base } else { v > 0.0 && v > cfg.floor };
                if flagged {
                    out.push(finding(i, base));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekdayProfile {
    pub scope: String,
    /// Mean per weekday, Monday first; `None` for weekdays absent from the data.
    pub means: [Option<f64>; 7],
    pub workweek_ratio: Option<f64>,
}

impl WeekdayProfile {
    pub fn workweek_ratio_defined(&self) -> bool {
        self.workweek_ratio.is_some()
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-weekday means and the Mon–Fri : Sat–Sun ratio over defined days.
pub fn weekday_profile(series: &[(NaiveDate, f64)], scope: &str) -> Result<WeekdayProfile, AnalyticsError> {
    if series.len() < MIN_WEEKDAY_PROFILE_DAYS {
        return Err(AnalyticsError::Precondition(format!(
            "weekday profile needs at least {MIN_WEEKDAY_PROFILE_DAYS} days, got {}",
            series.len()
        )));
    }
    let mut by_day: [Vec<f64>; 7] = Default::default();
    for (d, v) in series {
        by_day[d.weekday().num_days_from_monday() as usize].push(*v);
    }
    let means = std::array::from_fn(|i| mean(&by_day[i]));
    let workdays: Vec<f64> = by_day[..5].iter().flatten().copied().collect();
    let weekend: Vec<f64> = by_day[5..].iter().flatten().copied().collect();
    let workweek_ratio = match (mean(&workdays), mean(&weekend)) {
        (Some(w), Some(e)) if e > 0.0 => Some(w / e),
        _ => None,
    };
    Ok(WeekdayProfile { scope: scope.to_string(), means, workweek_ratio })
}

pub fn is_weekend(d: NaiveDate) -> bool {
    matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDaily {
    pub date: NaiveDate,
    pub group: Group,
    pub total: u64,
    pub malicious: u64,
    pub grey: u64,
    pub benign: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    pub orgs: Vec<String>,
    pub total: u64,
    pub defined_days: usize,
    pub mean_malicious_proportion: Option<f64>,
    pub mean_grey_proportion: Option<f64>,
    /// Days with traffic but no malicious requests.
    pub zero_malicious_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub daily: Vec<GroupDaily>,
    pub malicious: Vec<ProportionPoint>,
    pub grey: Vec<ProportionPoint>,
    pub summaries: Vec<GroupSummary>,
}

impl GroupReport {
    pub fn summary(&self, group: Group) -> Option<&GroupSummary> {
        self.summaries.iter().find(|s| s.group == group)
    }
}

/// Control-vs-treatment comparison: pooled daily counts and proportions per
/// group, with mean daily proportions as the summary.
pub fn group_report(aggs: &[DailyAggregate], groups: &OrgGroups) -> Result<GroupReport, AnalyticsError> {
    let mut cells: BTreeMap<(NaiveDate, Group), GroupDaily> = BTreeMap::new();
    let mut members: BTreeMap<Group, BTreeSet<String>> = BTreeMap::new();
    for a in aggs {
        let group = groups.group_of(&a.org_id).ok_or_else(|| AnalyticsError::UnknownOrg(a.org_id.clone()))?;
        members.entry(group).or_default().insert(a.org_id.clone());
        let c = cells.entry((a.date, group)).or_insert(GroupDaily {
            date: a.date,
            group,
            total: 0,
            malicious: 0,
            grey: 0,
            benign: 0,
        });
        c.total += a.total;
        c.malicious += a.malicious;
        c.grey += a.grey;
        c.benign += a.benign;
    }
    for g in [Group::Control, Group::Treatment] {
        if !members.contains_key(&g) {
            return Err(AnalyticsError::MissingGroup(g));
        }
    }
    let malicious = proportion_series(aggs, Class::Malicious, GroupBy::Group, groups)?;
    let grey = proportion_series(aggs, Class::Grey, GroupBy::Group, groups)?;
    let summaries = members
        .iter()
        .map(|(g, orgs)| {
            let days: Vec<&GroupDaily> = cells.values().filter(|c| c.group == *g).collect();
            let defined: Vec<&&GroupDaily> = days.iter().filter(|c| c.total > 0).collect();
            let props = |f: fn(&GroupDaily) -> u64| {
                let v: Vec<f64> = defined.iter().map(|c| f(c) as f64 / c.total as f64).collect();
                mean(&v)
            };
            GroupSummary {
                group: *g,
                orgs: orgs.iter().cloned().collect(),
                total: days.iter().map(|c| c.total).sum(),
                defined_days: defined.len(),
                mean_malicious_proportion: props(|c| c.malicious),
                mean_grey_proportion: props(|c| c.grey),
                zero_malicious_days: defined.iter().filter(|c| c.malicious == 0).count(),
            }
        })
        .collect();
    Ok(GroupReport { daily: cells.into_values().collect(), malicious, grey, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query_log::Action;
    use chrono::TimeZone;

    fn rec(day: u32, org: &str, qname: &str, class: Class) -> QueryRecord {
        QueryRecord {
            ts: Utc.with_ymd_and_hms(2018, 9, day, 10, 0, 0).unwrap(),
            org_id: org.into(),
            qname: qname.into(),
            qtype: 1,
            class,
            action: Action::Forwarded,
            rcode: 0,
            matched_domain: (class != Class::Benign).then(|| qname.into()),
            tags: None,
        }
    }

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2018, 9, day).unwrap()
    }

    #[test]
    fn aggregates_one_of_each() {
        let recs = [
            rec(3, "x", "a", Class::Benign),
            rec(3, "x", "b", Class::Grey),
            rec(3, "x", "b", Class::Malicious),
        ];
        let aggs = daily_aggregate(&recs);
        assert_eq!(aggs.len(), 1);
        let a = &aggs[0];
        assert_eq!((a.total, a.benign, a.grey, a.malicious, a.distinct_qnames), (3, 1, 1, 1, 2));
        assert!(daily_aggregate(Vec::<QueryRecord>::new()).is_empty());
    }

    #[test]
    fn clock_offset_moves_day() {
        let mut r = rec(3, "x", "a", Class::Benign);
        r.ts = Utc.with_ymd_and_hms(2018, 9, 3, 23, 30, 0).unwrap();
        let aggs = daily_aggregate_with([&r], DayClock { offset_minutes: 60 });
        assert_eq!(aggs[0].date, d(4));
    }

    #[test]
    fn single_org_proportion() {
        let mut recs: Vec<_> = (0..8).map(|_| rec(3, "x", "a", Class::Benign)).collect();
        recs.push(rec(3, "x", "m", Class::Malicious));
        recs.push(rec(3, "x", "m", Class::Malicious));
        let aggs = daily_aggregate(&recs);
        let p = proportion_series(&aggs, Class::Malicious, GroupBy::Org, &OrgGroups::new()).unwrap();
        assert_eq!(p[0].value, Some(0.2));
    }

    #[test]
    fn pooled_group_proportion_and_gaps() {
        let groups: OrgGroups = [("red", Group::Control), ("yellow", Group::Control)].into_iter().collect();
        let mut recs: Vec<_> = (0..5).map(|_| rec(3, "red", "a", Class::Benign)).collect();
        recs.extend((0..4).map(|_| rec(3, "yellow", "a", Class::Benign)));
        recs.push(rec(3, "yellow", "m", Class::Malicious));
        recs.push(rec(5, "red", "a", Class::Benign));
        let aggs = daily_aggregate(&recs);
        let p = proportion_series(&aggs, Class::Malicious, GroupBy::Group, &groups).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].value, Some(0.1));
        assert_eq!(p[1].date, d(4));
        assert!(!p[1].defined());
        assert_eq!(p[2].value, Some(0.0));
        let err = proportion_series(&aggs, Class::Grey, GroupBy::Group, &OrgGroups::new()).unwrap_err();
        assert!(matches!(err, AnalyticsError::UnknownOrg(_)));
    }

    #[test]
    fn top_domains_tie_break_and_exclusion() {
        let mut recs = Vec::new();
        for (q, n) in [("a", 3), ("b", 3), ("c", 1)] {
            recs.extend((0..n).map(|_| rec(3, "x", q, Class::Benign)));
        }
        let none = HashSet::new();
        assert_eq!(top_domains(&recs, 2, &none).unwrap(), vec![("a".into(), 3), ("b".into(), 3)]);
        assert_eq!(top_domains(&recs, 10, &none).unwrap().len(), 3);
        let ex: HashSet<String> = ["a".to_string()].into();
        assert_eq!(top_domains(&recs, 1, &ex).unwrap(), vec![("b".into(), 3)]);
        assert!(top_domains(&recs, 0, &none).is_err());
    }

    #[test]
    fn domain_series_zero_fill_and_split() {
        let recs = [
            rec(3, "x", "q", Class::Benign),
            rec(5, "x", "q", Class::Benign),
            rec(5, "y", "q", Class::Benign),
            rec(4, "y", "other", Class::Benign),
        ];
        let names: BTreeSet<String> = ["q".to_string()].into();
        let s = domain_series(&recs, &names, false).unwrap();
        assert_eq!(s.dates, vec![d(3), d(4), d(5)]);
        assert_eq!(s.series[&SeriesKey { qname: "q".into(), org: None }], vec![1, 0, 2]);
        let split = domain_series(&recs, &names, true).unwrap();
        let sum: Vec<u64> = (0..3).map(|i| split.series.values().map(|v| v[i]).sum()).collect();
        assert_eq!(sum, vec![1, 0, 2]);
        assert!(domain_series(&recs, &BTreeSet::new(), false).is_err());
    }

    fn series(vals: &[f64]) -> Vec<(NaiveDate, f64)> {
        vals.iter().enumerate().map(|(i, v)| (d(1) + Duration::days(i as i64), *v)).collect()
    }

    #[test]
    fn global_peak() {
        let cfg = SpikeConfig::default();
        let f = detect_spikes(&series(&[5.0, 5.0, 5.0, 20.0]), ALL_SCOPE, Metric::MaliciousCount, &cfg).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].date, d(4));
        assert_eq!(f[0].ratio, 4.0);
        assert!(detect_spikes(&series(&[3.0; 10]), ALL_SCOPE, Metric::MaliciousCount, &cfg).unwrap().is_empty());
        // exactly double: flagged at 2, not at 2.01
        let s = series(&[7.0, 10.0, 20.0, 4.0]);
        assert_eq!(detect_spikes(&s, "x", Metric::MaliciousCount, &cfg).unwrap().len(), 1);
        let strict = SpikeConfig { ratio: 2.01, ..cfg };
        assert!(detect_spikes(&s, "x", Metric::MaliciousCount, &strict).unwrap().is_empty());
        assert!(detect_spikes(&series(&[1.0]), "x", Metric::MaliciousCount, &cfg).is_err());
    }

    #[test]
    fn rolling_median() {
        let cfg = SpikeConfig { mode: SpikeMode::RollingMedian, window: 3, ..SpikeConfig::default() };
        let s = series(&[4.0, 5.0, 6.0, 12.0, 5.0, 5.0, 30.0]);
        let f = detect_spikes(&s, "x", Metric::GreyCount, &cfg).unwrap();
        let dates: Vec<_> = f.iter().map(|x| x.date).collect();
        assert_eq!(dates, vec![d(4), d(7)]);
        let zeros = series(&[0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 11.0]);
        let f = detect_spikes(&zeros, "x", Metric::GreyCount, &cfg).unwrap();
        assert_eq!(f.len(), 1);
        assert!(f[0].ratio.is_infinite());
        assert!(detect_spikes(&series(&[1.0, 2.0, 3.0]), "x", Metric::GreyCount, &cfg).is_err());
    }

    #[test]
    fn weekday_ratio() {
        // 2018-09-03 is a Monday
        let s: Vec<(NaiveDate, f64)> = (0..28)
            .map(|i| {
                let day = NaiveDate::from_ymd_opt(2018, 9, 3).unwrap() + Duration::days(i);
                (day, if is_weekend(day) { 10.0 } else { 100.0 })
            })
            .collect();
        let p = weekday_profile(&s, "green").unwrap();
        assert_eq!(p.workweek_ratio, Some(10.0));
        assert_eq!(p.means[0], Some(100.0));
        let zeroed: Vec<_> = s.iter().map(|(d, v)| (*d, if is_weekend(*d) { 0.0 } else { *v })).collect();
        let p = weekday_profile(&zeroed, "green").unwrap();
        assert!(!p.workweek_ratio_defined());
        assert_eq!(p.means[6], Some(0.0));
        assert!(weekday_profile(&s[..13], "x").is_err());
    }

    #[test]
    fn symmetric_groups_have_equal_summaries() {
        let groups: OrgGroups = [("red", Group::Control), ("green", Group::Treatment)].into_iter().collect();
        let mut recs = Vec::new();
        for org in ["red", "green"] {
            recs.push(rec(3, org, "a", Class::Benign));
            recs.push(rec(3, org, "m", Class::Malicious));
            recs.push(rec(4, org, "g", Class::Grey));
        }
        let report = group_report(&daily_aggregate(&recs), &groups).unwrap();
        let c = report.summary(Group::Control).unwrap();
        let t = report.summary(Group::Treatment).unwrap();
        assert_eq!(c.mean_malicious_proportion, t.mean_malicious_proportion);
        assert_eq!(c.mean_grey_proportion, Some(0.5));
        assert_eq!(c.zero_malicious_days, 1);
        let only_red: OrgGroups = [("red", Group::Control)].into_iter().collect();
        let red_aggs: Vec<_> = daily_aggregate(&recs).into_iter().filter(|a| a.org_id == "red").collect();
        assert_eq!(group_report(&red_aggs, &only_red), Err(AnalyticsError::MissingGroup(Group::Treatment)));
    }
}
