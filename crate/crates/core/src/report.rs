//! The figure bundle: one CSV per series table, one static SVG per figure,
//! plus rankings and a JSON summary.
//!
//! | file                              | content                                        |
//! |-----------------------------------|------------------------------------------------|
//! | `total_requests`                  | daily totals, all orgs and per org             |
//! | `benign_vs_malicious`             | daily benign / grey / malicious / total counts |
//! | `malicious_proportion`            | daily malicious share over all orgs            |
//! | `top_domains`                     | daily counts of the top-N names                |
//! | `top_domains_excluded`            | same, after removing excluded names            |
//! | `org_breakdown`                   | per-org benign / malicious / total counts      |
//! | `org_grey_proportion`             | per-org grey share                             |
//! | `group_malicious_proportion`      | control vs treatment malicious share           |
//! | `group_grey_proportion`           | control vs treatment grey share                |
//! | `adware_domains_by_org`           | tracked grey names per org (`qname@org`)       |
//! | `rankings.csv`, `summary.json`    | top-N lists; group summaries, spikes, weekly   |

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;
use thiserror::Error;

use crate::analytics::{
    self, daily_aggregate_with, defined_points, detect_spikes, domain_series_with, group_report, metric_series,
    proportion_series, rank_counts, weekday_profile, AnalyticsError, DailyAggregate, DayClock, DomainSeries,
    GroupBy, GroupReport, Metric, SeriesKey, SpikeConfig, SpikeFinding, WeekdayProfile, ALL_SCOPE,
};
use crate::org::OrgGroups;
use crate::query_log::QueryRecord;
use crate::threat_intel::Class;

pub const SERIES_HEADER: [&str; 5] = ["date", "scope", "metric", "value", "defined"];
pub const REQUEST_COUNT: &str = "request_count";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad series csv {path}: {reason}")]
    BadCsv { path: PathBuf, reason: String },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

impl ReportError {
    pub fn code(&self) -> &'static str {
        match self {
            ReportError::Io { .. } => "IO_ERROR",
            ReportError::BadCsv { .. } => "BAD_CSV",
            ReportError::Analytics(e) => e.code(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub top_n: usize,
    pub exclude: BTreeSet<String>,
    /// Names tracked per org; when `None`, the `tracked_n` most requested grey names.
    pub tracked: Option<BTreeSet<String>>,
    pub tracked_n: usize,
    pub clock: DayClock,
    pub spike: SpikeConfig,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            top_n: 10,
            exclude: BTreeSet::new(),
            tracked: None,
            tracked_n: 2,
            clock: DayClock::UTC,
            spike: SpikeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub svg: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Formats { csv: true, svg: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub date: NaiveDate,
    pub scope: String,
    pub metric: String,
    /// `None` marks an undefined point; never written as 0.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub name: &'static str,
    pub title: &'static str,
    pub rows: Vec<SeriesRow>,
    /// Draw one panel per scope instead of overlaying every line.
    pub grid: bool,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub aggregates: Vec<DailyAggregate>,
    pub orgs: Vec<String>,
    pub group: Option<GroupReport>,
    pub rankings: Vec<(String, u64)>,
    pub rankings_excluded: Vec<(String, u64)>,
    pub exclude: BTreeSet<String>,
    pub tracked: BTreeSet<String>,
    /// Per-org daily counts for every ranked and tracked name.
    pub domains: DomainSeries,
    pub spikes: Vec<SpikeFinding>,
    pub weekly: Vec<WeekdayProfile>,
    pub warnings: Vec<String>,
}

/// Builds the report from a re-iterable record source (read twice).
pub fn build_report<F, I, R>(source: F, groups: &OrgGroups, opts: &ReportOptions) -> Result<Report, AnalyticsError>
where
    F: Fn() -> I,
    I: IntoIterator<Item = R>,
    R: Borrow<QueryRecord>,
{
    if opts.top_n == 0 {
        return Err(AnalyticsError::Precondition("top_n must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut grey_counts: HashMap<String, u64> = HashMap::new();
    let aggregates = daily_aggregate_with(
        source().into_iter().inspect(|r| {
            let r: &QueryRecord = r.borrow();
            bump(&mut counts, &r.qname);
            if r.class == Class::Grey {
                bump(&mut grey_counts, &r.qname);
            }
        }),
        opts.clock,
    );
    let rankings = rank_counts(counts.clone(), opts.top_n);
    let excluded_counts: HashMap<String, u64> =
        counts.into_iter().filter(|(q, _)| !opts.exclude.contains(q)).collect();
    let rankings_excluded = rank_counts(excluded_counts, opts.top_n);
    let tracked = opts
        .tracked
        .clone()
        .unwrap_or_else(|| rank_counts(grey_counts, opts.tracked_n.max(1)).into_iter().map(|(q, _)| q).collect());

    let names: BTreeSet<String> = rankings
        .iter()
        .chain(&rankings_excluded)
        .map(|(q, _)| q.clone())
        .chain(tracked.iter().cloned())
        .collect();
    let domains = if names.is_empty() {
        DomainSeries::default()
    } else {
        domain_series_with(source(), &names, true, opts.clock)?
    };

    let mut warnings = Vec::new();
    let group = match group_report(&aggregates, groups) {
        Ok(g) => Some(g),
        Err(e) => {
            if !aggregates.is_empty() {
                warnings.push(format!("group comparison skipped: {e}"));
            }
            None
        }
    };
    let orgs: Vec<String> = aggregates.iter().map(|a| a.org_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();

    let mut spikes = Vec::new();
    let all_malicious = defined_points(&metric_series(&aggregates, Metric::MaliciousCount, ALL_SCOPE, groups));
    if all_malicious.len() >= 2 {
        spikes = detect_spikes(&all_malicious, ALL_SCOPE, Metric::MaliciousCount, &opts.spike)?;
    }
    let mut weekly = Vec::new();
    for scope in std::iter::once(ALL_SCOPE.to_string()).chain(orgs.iter().cloned()) {
        let series = defined_points(&metric_series(&aggregates, Metric::GreyCount, &scope, groups));
        if let Ok(p) = weekday_profile(&series, &scope) {
            weekly.push(p);
        }
    }
    Ok(Report {
        aggregates,
        orgs,
        group,
        rankings,
        rankings_excluded,
        exclude: opts.exclude.clone(),
        tracked,
        domains,
        spikes,
        weekly,
        warnings,
    })
}

fn bump(counts: &mut HashMap<String, u64>, key: &str) {
    match counts.get_mut(key) {
        Some(c) => *c += 1,
        None => {
            counts.insert(key.to_string(), 1);
        }
    }
}

fn rows_for(aggs: &[DailyAggregate], groups: &OrgGroups, scope: &str, metrics: &[(Metric, &str)]) -> Vec<SeriesRow> {
    let mut out = Vec::new();
    for (metric, label) in metrics {
        for (date, value) in metric_series(aggs, *metric, scope, groups) {
            out.push(SeriesRow { date, scope: scope.to_string(), metric: label.to_string(), value });
        }
    }
    out
}

fn benign_rows(aggs: &[DailyAggregate], scope: Option<&str>) -> Vec<SeriesRow> {
    let mut per_day: BTreeMap<NaiveDate, u64> = BTreeMap::new();
    for a in aggs.iter().filter(|a| scope.is_none_or(|s| s == a.org_id)) {
        *per_day.entry(a.date).or_default() += a.benign;
    }
    analytics::date_range(aggs)
        .into_iter()
        .map(|d| SeriesRow {
            date: d,
            scope: scope.unwrap_or(ALL_SCOPE).to_string(),
            metric: "benign_count".into(),
            value: Some(per_day.get(&d).copied().unwrap_or(0) as f64),
        })
        .collect()
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.aggregates.is_empty()
    }

    /// Unsplit daily counts of `qname`, summed over orgs.
    pub fn domain_total(&self, qname: &str) -> Vec<u64> {
        let mut out = vec![0; self.domains.dates.len()];
        for (key, row) in &self.domains.series {
            if key.qname == qname {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out
    }

    fn domain_rows(&self, names: &[(String, u64)]) -> Vec<SeriesRow> {
        let mut out = Vec::new();
        for (q, _) in names {
            let totals = self.domain_total(q);
            for (d, v) in self.domains.dates.iter().zip(totals) {
                out.push(SeriesRow { date: *d, scope: q.clone(), metric: REQUEST_COUNT.into(), value: Some(v as f64) });
            }
        }
        out
    }

    fn tracked_rows(&self) -> Vec<SeriesRow> {
        let mut out = Vec::new();
        for (SeriesKey { qname, org }, row) in &self.domains.series {
            let Some(org) = org else { continue };
            if !self.tracked.contains(qname) {
                continue;
            }
            for (d, v) in self.domains.dates.iter().zip(row) {
                out.push(SeriesRow {
                    date: *d,
                    scope: format!("{qname}@{org}"),
                    metric: REQUEST_COUNT.into(),
                    value: Some(*v as f64),
                });
            }
        }
        out
    }

    fn group_rows(&self, class: Class) -> Vec<SeriesRow> {
        let Some(g) = &self.group else { return Vec::new() };
        let (points, metric) = match class {
            Class::Malicious => (&g.malicious, Metric::MaliciousProportion),
            _ => (&g.grey, Metric::GreyProportion),
        };
        points
            .iter()
            .map(|p| SeriesRow { date: p.date, scope: p.scope.clone(), metric: metric.to_string(), value: p.value })
            .collect()
    }

    /// Every series table of the bundle, in a stable order.
    pub fn tables(&self, groups: &OrgGroups) -> Vec<SeriesTable> {
        let aggs = &self.aggregates;
        let table = |name, title, rows, grid| SeriesTable { name, title, rows, grid };
        let mut totals = rows_for(aggs, groups, ALL_SCOPE, &[(Metric::TotalCount, "total_count")]);
        let mut breakdown = Vec::new();
        let mut org_grey = Vec::new();
        for org in &self.orgs {
            totals.extend(rows_for(aggs, groups, org, &[(Metric::TotalCount, "total_count")]));
            breakdown.extend(benign_rows(aggs, Some(org)));
            breakdown.extend(rows_for(
                aggs,
                groups,
                org,
                &[(Metric::MaliciousCount, "malicious_count"), (Metric::TotalCount, "total_count")],
            ));
            org_grey.extend(rows_for(aggs, groups, org, &[(Metric::GreyProportion, "grey_proportion")]));
        }
        let mut bvm = benign_rows(aggs, None);
        bvm.extend(rows_for(
            aggs,
            groups,
            ALL_SCOPE,
            &[
                (Metric::GreyCount, "grey_count"),
                (Metric::MaliciousCount, "malicious_count"),
                (Metric::TotalCount, "total_count"),
            ],
        ));
        vec![
            table("total_requests", "Total requests per day", totals, false),
            table("benign_vs_malicious", "Benign, grey and malicious requests per day", bvm, false),
            table(
                "malicious_proportion",
                "Share of requests that are malicious",
                rows_for(aggs, groups, ALL_SCOPE, &[(Metric::MaliciousProportion, "malicious_proportion")]),
                false,
            ),
            table("top_domains", "Most requested names", self.domain_rows(&self.rankings), false),
            table(
                "top_domains_excluded",
                "Most requested names, excluded names removed",
                self.domain_rows(&self.rankings_excluded),
                false,
            ),
            table("org_breakdown", "Benign, malicious and total requests by org", breakdown, true),
            table("org_grey_proportion", "Share of requests that are grey, by org", org_grey, true),
            table(
                "group_malicious_proportion",
                "Malicious share: control vs treatment",
                self.group_rows(Class::Malicious),
                false,
            ),
            table("group_grey_proportion", "Grey share: control vs treatment", self.group_rows(Class::Grey), false),
            table("adware_domains_by_org", "Tracked grey names by org", self.tracked_rows(), true),
        ]
    }

    /// Proportion-by-org points straight from the aggregates, for callers that want structs.
    pub fn org_proportions(&self, class: Class, groups: &OrgGroups) -> Vec<analytics::ProportionPoint> {
        proportion_series(&self.aggregates, class, GroupBy::Org, groups).unwrap_or_default()
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    method_note: &'static str,
    days: usize,
    orgs: &'a [String],
    total_requests: u64,
    per_class: BTreeMap<&'static str, u64>,
    groups: Vec<&'a analytics::GroupSummary>,
    top_domains: &'a [(String, u64)],
    top_domains_excluded: &'a [(String, u64)],
    excluded: &'a BTreeSet<String>,
    tracked: &'a BTreeSet<String>,
    spikes: &'a [SpikeFinding],
    weekly_grey: &'a [WeekdayProfile],
    warnings: &'a [String],
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn write_series_csv(path: &Path, rows: &[SeriesRow]) -> Result<(), ReportError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| ReportError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) };
    w.write_record(SERIES_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.date.to_string(),
            r.scope.clone(),
            r.metric.clone(),
            r.value.map(fmt_value).unwrap_or_default(),
            r.value.is_some().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_series_csv(path: &Path) -> Result<Vec<SeriesRow>, ReportError> {
    let bad = |reason: String| ReportError::BadCsv { path: path.to_path_buf(), reason };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != SERIES_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        let date = rec[0].parse().map_err(|_| bad(format!("line {line}: bad date")))?;
        let defined: bool = rec[4].parse().map_err(|_| bad(format!("line {line}: bad defined flag")))?;
        let value = if defined {
            Some(rec[3].parse().map_err(|_| bad(format!("line {line}: bad value")))?)
        } else {
            if !rec[3].is_empty() {
                return Err(bad(format!("line {line}: undefined point carries a value")));
            }
            None
        };
        out.push(SeriesRow { date, scope: rec[1].to_string(), metric: rec[2].to_string(), value });
    }
    Ok(out)
}

fn write_rankings(path: &Path, report: &Report) -> Result<(), ReportError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| ReportError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) };
    w.write_record(["list", "rank", "qname", "count"]).map_err(csv_err)?;
    for (list, ranked) in [("all", &report.rankings), ("excluded", &report.rankings_excluded)] {
        for (i, (q, c)) in ranked.iter().enumerate() {
            w.write_record([list, &(i + 1).to_string(), q, &c.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Writes the bundle into `out_dir`; returns the files written.
pub fn emit_report(
    report: &Report,
    groups: &OrgGroups,
    out_dir: &Path,
    formats: Formats,
) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for t in report.tables(groups) {
        if formats.csv {
            let p = out_dir.join(format!("{}.csv", t.name));
            write_series_csv(&p, &t.rows)?;
            written.push(p);
        }
        if formats.svg && !t.rows.is_empty() {
            let p = out_dir.join(format!("{}.svg", t.name));
            fs::write(&p, render_svg(&t)).map_err(io_err(&p))?;
            written.push(p);
        }
    }
    if formats.csv {
        let p = out_dir.join("rankings.csv");
        write_rankings(&p, report)?;
        written.push(p);
    }
    let summary = Summary {
        method_note: "descriptive counts and shares; no causal claim",
        days: analytics::date_range(&report.aggregates).len(),
        orgs: &report.orgs,
        total_requests: report.aggregates.iter().map(|a| a.total).sum(),
        per_class: Class::ALL
            .iter()
            .map(|c| (c.as_str(), report.aggregates.iter().map(|a| a.count(*c)).sum()))
            .collect(),
        groups: report.group.as_ref().map(|g| g.summaries.iter().collect()).unwrap_or_default(),
        top_domains: &report.rankings,
        top_domains_excluded: &report.rankings_excluded,
        excluded: &report.exclude,
        tracked: &report.tracked,
        spikes: &report.spikes,
        weekly_grey: &report.weekly,
        warnings: &report.warnings,
    };
    let p = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&p, json + "\n").map_err(io_err(&p))?;
    written.push(p);
    Ok(written)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

type Lines = BTreeMap<String, Vec<(NaiveDate, Option<f64>)>>;

/// Lines keyed by whichever of scope and metric varies across `rows`.
fn lines_of<'a>(rows: impl Iterator<Item = &'a SeriesRow> + Clone) -> Lines {
    let scopes: HashSet<&str> = rows.clone().map(|r| r.scope.as_str()).collect();
    let metrics: HashSet<&str> = rows.clone().map(|r| r.metric.as_str()).collect();
    let mut lines: Lines = BTreeMap::new();
    for r in rows {
        let label = match (scopes.len() > 1, metrics.len() > 1) {
            (true, true) => format!("{} {}", r.scope, r.metric),
            (true, false) => r.scope.clone(),
            _ => r.metric.clone(),
        };
        lines.entry(label).or_default().push((r.date, r.value));
    }
    lines
}

/// One panel: axes, polylines broken at undefined points, legend.
fn panel(svg: &mut String, x0: f64, y0: f64, w: f64, h: f64, title: &str, lines: &Lines) {
    let dates: BTreeSet<NaiveDate> = lines.values().flatten().map(|p| p.0).collect();
    let (Some(first), Some(last)) = (dates.first().copied(), dates.last().copied()) else { return };
    let span = (last - first).num_days().max(1) as f64;
    let ymax = lines.values().flatten().filter_map(|p| p.1).fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let (left, bottom, top) = (60.0, 30.0, 24.0);
    let pw = w - left - 10.0;
    let ph = h - bottom - top;
    let px = |d: NaiveDate| x0 + left + (d - first).num_days() as f64 / span * pw;
    let py = |v: f64| y0 + top + ph - v / ymax * ph;
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="13" font-weight="bold">{}</text>"#, x0 + left, y0 + 16.0, escape(title));
    let _ = writeln!(
        svg,
        r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#999"/>"##,
        x0 + left,
        y0 + top
    );
    for frac in [0.0, 0.5, 1.0] {
        let v = ymax * frac;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
            x0 + left - 4.0,
            py(v) + 3.0,
            if ymax <= 1.0 { format!("{v:.3}") } else { format!("{v:.0}") }
        );
    }
    for (d, anchor) in [(first, "start"), (last, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="{anchor}">{d}</text>"#,
            px(d),
            y0 + h - 12.0
        );
    }
    for (i, (label, pts)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, svg: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                    seg.join(" ")
                );
            } else if let Some(p) = seg.first() {
                let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="1.5" fill="{color}"/>"#);
            }
            seg.clear();
        };
        for (d, v) in pts {
            match v {
                Some(v) => segment.push(format!("{:.1},{:.1}", px(*d), py(*v))),
                None => flush(&mut segment, svg),
            }
        }
        flush(&mut segment, svg);
        let ly = y0 + top + 12.0 + i as f64 * 13.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="10" fill="{color}">{}</text>"#,
            x0 + left + 6.0,
            escape(label)
        );
    }
}

/// Self-contained static SVG for one table.
pub fn render_svg(table: &SeriesTable) -> String {
    let mut svg = String::new();
    if table.grid {
        let scopes: BTreeSet<&str> = table.rows.iter().map(|r| r.scope.as_str()).collect();
        let cols = 2usize;
        let rows = scopes.len().div_ceil(cols).max(1);
        let (pw, ph) = (480.0, 220.0);
        let (w, h) = (pw * cols as f64, ph * rows as f64 + 30.0);
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="10" y="20" font-size="15" font-weight="bold">{}</text>"#, escape(table.title));
        for (i, scope) in scopes.iter().enumerate() {
            let lines = lines_of(table.rows.iter().filter(|r| r.scope == *scope));
            let (cx, cy) = ((i % cols) as f64 * pw, 30.0 + (i / cols) as f64 * ph);
            panel(&mut svg, cx, cy, pw, ph, scope, &lines);
        }
    } else {
        let (w, h) = (960.0, 420.0);
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let lines = lines_of(table.rows.iter());
        panel(&mut svg, 0.0, 0.0, w, h, table.title, &lines);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Control/treatment membership of the default synthetic orgs; used when no
/// service config names the groups.
pub fn groups_or_default(groups: Option<OrgGroups>) -> OrgGroups {
    groups.unwrap_or_else(crate::traffic_synth::default_groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::org::Group;
    use crate::query_log::Action;
    use chrono::{TimeZone, Utc};

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

    fn groups() -> OrgGroups {
        [("red", Group::Control), ("green", Group::Treatment)].into_iter().collect()
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_report(Vec::<QueryRecord>::new, &groups(), &ReportOptions::default()).unwrap();
        let files = emit_report(&r, &groups(), dir.path(), Formats::default()).unwrap();
        assert!(files.iter().all(|f| f.extension().unwrap() != "svg"));
        let text = fs::read_to_string(dir.path().join("total_requests.csv")).unwrap();
        assert_eq!(text, "date,scope,metric,value,defined\n");
    }

    #[test]
    fn csv_round_trip_keeps_undefined() {
        let recs = vec![
            rec(1, "red", "a.example", Class::Benign),
            rec(3, "red", "g.example", Class::Grey),
            rec(3, "green", "a.example", Class::Benign),
        ];
        let r = build_report(|| recs.iter(), &groups(), &ReportOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, &groups(), dir.path(), Formats::default()).unwrap();
        for t in r.tables(&groups()) {
            let back = read_series_csv(&dir.path().join(format!("{}.csv", t.name))).unwrap();
            assert_eq!(back, t.rows, "{}", t.name);
        }
        let grey = r.tables(&groups()).into_iter().find(|t| t.name == "org_grey_proportion").unwrap();
        // Sept 2 has no traffic at all: undefined, not zero.
        let sep2 = NaiveDate::from_ymd_opt(2018, 9, 2).unwrap();
        assert!(grey.rows.iter().filter(|r| r.date == sep2).all(|r| r.value.is_none()));
        assert!(dir.path().join("group_grey_proportion.svg").exists());
    }

    #[test]
    fn exclusion_and_tracking() {
        let mut recs = Vec::new();
        for _ in 0..50 {
            recs.push(rec(2, "green", "burst.example", Class::Benign));
        }
        for d in 1..=4 {
            recs.push(rec(d, "green", "steady.example", Class::Benign));
            recs.push(rec(d, "red", "ads.example", Class::Grey));
        }
        let opts = ReportOptions { exclude: ["burst.example".to_string()].into(), ..ReportOptions::default() };
        let r = build_report(|| recs.iter(), &groups(), &opts).unwrap();
        assert_eq!(r.rankings[0].0, "burst.example");
        assert!(r.rankings_excluded.iter().all(|(q, _)| q != "burst.example"));
        assert_eq!(r.tracked, ["ads.example".to_string()].into());
        assert_eq!(r.domain_total("steady.example"), vec![1, 1, 1, 1]);
    }
}
