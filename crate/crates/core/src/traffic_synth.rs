//! Deterministic synthetic DNS traffic.
//!
//! Per org and day, each class gets an independent Poisson count whose mean is
//! the sum over users of `rate × weekday factor × class share`. Bad-egg users
//! shift their own class mix (on working days only); episodes and the
//! intervention scale class emission rates directly. Names and timestamps are
//! drawn afterwards from a separate random stream, so class counts are the same
//! whether or not records are materialised.
//!
//! Every random stream is a ChaCha generator keyed by a SHA-256 of the master
//! seed and a label such as `counts|green|2018-09-17`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{NaiveDate, NaiveTime, TimeZone, Utc};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::is_weekend;
use crate::dns_wire::{self, DomainName, QueryView, RCODE_NXDOMAIN, RCODE_SERVFAIL};
use crate::org::{Group, OrgGroups};
use crate::query_log::{Action, QueryRecord};
use crate::threat_intel::{Class, Status, ThreatEntry};

const WORKDAY_START_SECS: u32 = 8 * 3600;
const WORKDAY_LEN_SECS: u32 = 10 * 3600;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid profile `{org}`: {reason}")]
    InvalidProfile { org: String, reason: String },
    #[error("empty date range {0}..={1}")]
    EmptyRange(NaiveDate, NaiveDate),
    #[error("cannot read scenario {path}: {reason}")]
    Scenario { path: String, reason: String },
    #[error("no endpoint for org `{0}`")]
    NoEndpoint(String),
    #[error("target unreachable: {0}")]
    Unreachable(#[from] std::io::Error),
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::InvalidProfile { .. } => "INVALID_PROFILE",
            SynthError::EmptyRange(..) => "EMPTY_RANGE",
            SynthError::Scenario { .. } => "SCENARIO",
            SynthError::NoEndpoint(_) => "NO_ENDPOINT",
            SynthError::Unreachable(_) => "UNREACHABLE",
        }
    }
}

/// One pool name. Grey and malicious names also define the matching feed entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolName {
    pub qname: String,
    pub weight: f64,
    #[serde(default = "default_status")]
    pub status: Status,
    #[serde(default)]
    pub tags: Vec<String>,
}

fn default_status() -> Status {
    Status::Allowed
}

impl PoolName {
    fn benign(qname: &str, weight: f64) -> Self {
        PoolName { qname: qname.into(), weight, status: Status::Allowed, tags: Vec::new() }
    }

    fn listed(qname: &str, weight: f64, status: Status, tags: &[&str]) -> Self {
        PoolName {
            qname: qname.into(),
            weight,
            status,
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainPools {
    pub benign: Vec<PoolName>,
    pub grey: Vec<PoolName>,
    pub malicious: Vec<PoolName>,
}

impl DomainPools {
    fn pool(&self, class: Class) -> &[PoolName] {
        match class {
            Class::Benign => &self.benign,
            Class::Grey => &self.grey,
            Class::Malicious => &self.malicious,
        }
    }

    fn class_weights(&self) -> [f64; 3] {
        Class::ALL.map(|c| self.pool(c).iter().map(|p| p.weight).sum())
    }
}

/// A user whose class mix is skewed; active on working days only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadEgg {
    pub user: usize,
    pub grey_multiplier: f64,
    pub malicious_multiplier: f64,
}

/// A single name requested in bulk on `n_days` randomly chosen days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub qname: String,
    pub n_days: usize,
    pub min_per_day: u64,
    pub max_per_day: u64,
}

/// A temporary change in grey/malicious emission, e.g. a week of adware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub start: NaiveDate,
    pub n_days: u32,
    pub grey_multiplier: f64,
    pub malicious_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub date: NaiveDate,
    pub grey_multiplier: f64,
    pub malicious_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub org_id: String,
    pub group: Group,
    pub n_users: usize,
    pub per_user_daily_rate: f64,
    pub weekday_amplitude: f64,
    pub pools: DomainPools,
    #[serde(default)]
    pub bad_eggs: Vec<BadEgg>,
    #[serde(default)]
    pub bursts: Vec<Burst>,
    #[serde(default)]
    pub episodes: Vec<Episode>,
    #[serde(default)]
    pub intervention: Option<Intervention>,
}

/// Constructed all-org malicious peak: on `date`, `org` gets enough extra
/// malicious queries that the day's total equals `factor` times the largest
/// malicious total of any other day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakInjection {
    pub date: NaiveDate,
    pub org_id: String,
    pub factor: f64,
    pub qnames: Vec<PoolName>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub start: NaiveDate,
    pub end: NaiveDate,
    #[serde(rename = "profile")]
    pub profiles: Vec<SynthProfile>,
    #[serde(default)]
    pub peak: Option<PeakInjection>,
}

impl SynthProfile {
    pub fn validate(&self, range_days: usize) -> Result<(), SynthError> {
        let bad = |reason: String| Err(SynthError::InvalidProfile { org: self.org_id.clone(), reason });
        if !crate::query_log::valid_org_id(&self.org_id) {
            return bad("org id must be [A-Za-z0-9_-]+".into());
        }
        if self.n_users == 0 || !(self.per_user_daily_rate > 0.0) || !(self.weekday_amplitude > 0.0) {
            return bad("users, rate and weekday amplitude must be positive".into());
        }
        for class in Class::ALL {
            for p in self.pools.pool(class) {
                if !(p.weight >= 0.0) || !p.weight.is_finite() {
                    return bad(format!("weight of {} must be finite and >= 0", p.qname));
                }
                if let Err(e) = p.qname.parse::<DomainName>() {
                    return bad(format!("pool name {}: {e}", p.qname));
                }
            }
        }
        if self.pools.class_weights().iter().sum::<f64>() <= 0.0 {
            return bad("pools carry no weight".into());
        }
        let positive = |m: f64| m > 0.0 && m.is_finite();
        for egg in &self.bad_eggs {
            if egg.user >= self.n_users {
                return bad(format!("bad egg user {} out of range", egg.user));
            }
            if !positive(egg.grey_multiplier) || !positive(egg.malicious_multiplier) {
                return bad("bad egg multipliers must be positive".into());
            }
        }
        for b in &self.bursts {
            if b.n_days > range_days || b.min_per_day > b.max_per_day {
                return bad(format!("burst {} does not fit the range", b.qname));
            }
        }
        for e in &self.episodes {
            if !positive(e.grey_multiplier) || !positive(e.malicious_multiplier) {
                return bad("episode multipliers must be positive".into());
            }
        }
        if let Some(i) = &self.intervention {
            if !positive(i.grey_multiplier) || !positive(i.malicious_multiplier) {
                return bad("intervention multipliers must be positive".into());
            }
        }
        Ok(())
    }

    fn class_multipliers(&self, date: NaiveDate) -> [f64; 3] {
        let mut m = [1.0; 3];
        for e in &self.episodes {
            let end = e.start + chrono::Duration::days(i64::from(e.n_days));
            if date >= e.start && date < end {
                m[Class::Grey as usize] *= e.grey_multiplier;
                m[Class::Malicious as usize] *= e.malicious_multiplier;
            }
        }
        if let Some(i) = &self.intervention {
            if date >= i.date {
                m[Class::Grey as usize] *= i.grey_multiplier;
                m[Class::Malicious as usize] *= i.malicious_multiplier;
            }
        }
        m
    }

    /// Mean daily count per class (benign, grey, malicious), excluding bursts.
    pub fn expected_class_rates(&self, date: NaiveDate) -> [f64; 3] {
        let weekend = is_weekend(date);
        let per_user = self.per_user_daily_rate * if weekend { 1.0 } else { self.weekday_amplitude };
        let base = self.pools.class_weights();
        let mut rates = [0.0; 3];
        for user in 0..self.n_users {
            let mut w = base;
            if !weekend {
                for egg in self.bad_eggs.iter().filter(|e| e.user == user) {
                    w[Class::Grey as usize] *= egg.grey_multiplier;
                    w[Class::Malicious as usize] *= egg.malicious_multiplier;
                }
            }
            let sum: f64 = w.iter().sum();
            for c in 0..3 {
                rates[c] += per_user * w[c] / sum;
            }
        }
        let mult = self.class_multipliers(date);
        for c in 0..3 {
            rates[c] *= mult[c];
        }
        rates
    }
}

fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    // Constructor only fails for non-positive or non-finite means.
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

/// Class counts for one org and day, plus any burst volume.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OrgDayCounts {
    pub date: NaiveDate,
    pub org_id: String,
    /// Benign, grey, malicious from ordinary user traffic.
    pub classes: [u64; 3],
    /// (burst index, volume) pairs; burst names are benign.
    pub bursts: Vec<(usize, u64)>,
    /// Extra malicious queries from the constructed peak.
    pub peak: u64,
}

impl OrgDayCounts {
    pub fn total(&self) -> u64 {
        self.classes.iter().sum::<u64>() + self.bursts.iter().map(|b| b.1).sum::<u64>() + self.peak
    }

    pub fn count(&self, class: Class) -> u64 {
        match class {
            Class::Benign => self.classes[0] + self.bursts.iter().map(|b| b.1).sum::<u64>(),
            Class::Grey => self.classes[1],
            Class::Malicious => self.classes[2] + self.peak,
        }
    }
}

/// All per-day counts of a scenario. Records are materialised lazily from it.
#[derive(Debug, Clone)]
pub struct Plan {
    scenario: Arc<Scenario>,
    seed: u64,
    /// Indexed [day][profile].
    days: Vec<Vec<OrgDayCounts>>,
}

pub fn date_span(start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
    start.iter_days().take_while(|d| *d <= end).collect()
}

fn burst_schedule(profile: &SynthProfile, dates: &[NaiveDate], seed: u64) -> HashMap<NaiveDate, Vec<(usize, u64)>> {
    let mut rng = stream_rng(seed, &format!("bursts|{}", profile.org_id));
    let mut out: HashMap<NaiveDate, Vec<(usize, u64)>> = HashMap::new();
    for (bi, burst) in profile.bursts.iter().enumerate() {
        let mut picks = rand::seq::index::sample(&mut rng, dates.len(), burst.n_days).into_vec();
        picks.sort_unstable();
        for idx in picks {
            let volume = rng.random_range(burst.min_per_day..=burst.max_per_day);
            out.entry(dates[idx]).or_default().push((bi, volume));
        }
    }
    out
}

pub fn plan(scenario: &Scenario, seed: u64) -> Result<Plan, SynthError> {
    let dates = date_span(scenario.start, scenario.end);
    if dates.is_empty() {
        return Err(SynthError::EmptyRange(scenario.start, scenario.end));
    }
    for p in &scenario.profiles {
        p.validate(dates.len())?;
    }
    let schedules: Vec<_> = scenario.profiles.iter().map(|p| burst_schedule(p, &dates, seed)).collect();
    let mut days: Vec<Vec<OrgDayCounts>> = dates
        .iter()
        .map(|date| {
            scenario
                .profiles
                .iter()
                .zip(&schedules)
                .map(|(p, sched)| {
                    let mut rng = stream_rng(seed, &format!("counts|{}|{date}", p.org_id));
                    let rates = p.expected_class_rates(*date);
                    OrgDayCounts {
                        date: *date,
                        org_id: p.org_id.clone(),
                        classes: rates.map(|r| poisson(&mut rng, r)),
                        bursts: sched.get(date).cloned().unwrap_or_default(),
                        peak: 0,
                    }
                })
                .collect()
        })
        .collect();
    if let Some(peak) = &scenario.peak {
        let day_idx = dates.iter().position(|d| *d == peak.date);
        let org_idx = scenario.profiles.iter().position(|p| p.org_id == peak.org_id);
        if let (Some(di), Some(oi)) = (day_idx, org_idx) {
            let malicious = |row: &Vec<OrgDayCounts>| row.iter().map(|c| c.count(Class::Malicious)).sum::<u64>();
            let max_other = days
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != di)
                .map(|(_, row)| malicious(row))
                .max()
                .unwrap_or(0);
            let target = (peak.factor * max_other as f64).ceil() as u64;
            let current = malicious(&days[di]);
            days[di][oi].peak = target.saturating_sub(current);
        }
    }
    Ok(Plan { scenario: Arc::new(scenario.clone()), seed, days })
}

impl Plan {
    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn counts(&self) -> impl Iterator<Item = &OrgDayCounts> {
        self.days.iter().flatten()
    }

    pub fn total(&self) -> u64 {
        self.counts().map(|c| c.total()).sum()
    }

    fn tag_lookup(&self) -> HashMap<String, Vec<String>> {
        synthetic_feed(&self.scenario)
            .into_iter()
            .map(|e| (e.domain.to_string(), e.tags.into_iter().collect()))
            .collect()
    }

    /// Records for one day across all orgs, sorted by timestamp then org.
    fn day_records(&self, day: usize, tags: &HashMap<String, Vec<String>>) -> Vec<QueryRecord> {
        let mut out = Vec::new();
        for (profile, counts) in self.scenario.profiles.iter().zip(&self.days[day]) {
            let date = counts.date;
            let mut rng = stream_rng(self.seed, &format!("names|{}|{date}", profile.org_id));
            let midnight = Utc.from_utc_datetime(&date.and_time(NaiveTime::MIN));
            let mut emit = |rng: &mut ChaCha8Rng, qname: &str, class: Class| {
                let secs = WORKDAY_START_SECS + rng.random_range(0..WORKDAY_LEN_SECS);
                let (action, rcode) = if class == Class::Malicious {
                    (Action::Blocked, RCODE_NXDOMAIN)
                } else {
                    (Action::Forwarded, 0)
                };
                let listed = class != Class::Benign;
                out.push(QueryRecord {
                    ts: midnight + chrono::Duration::seconds(i64::from(secs)),
                    org_id: profile.org_id.clone(),
                    qname: qname.to_string(),
                    qtype: dns_wire::TYPE_A,
                    class,
                    action,
                    rcode,
                    matched_domain: listed.then(|| qname.to_string()),
                    tags: if listed { tags.get(qname).cloned() } else { None },
                });
            };
            for class in Class::ALL {
                let pool = profile.pools.pool(class);
                let n = counts.classes[class as usize];
                if n == 0 {
                    continue;
                }
                let Ok(index) = WeightedIndex::new(pool.iter().map(|p| p.weight)) else {
                    continue;
                };
                for _ in 0..n {
                    let name = &pool[index.sample(&mut rng)].qname;
                    emit(&mut rng, name, class);
                }
            }
            for (bi, volume) in &counts.bursts {
                let name = &profile.bursts[*bi].qname;
                for _ in 0..*volume {
                    emit(&mut rng, name, Class::Benign);
                }
            }
            if counts.peak > 0 {
                if let Some(peak) = &self.scenario.peak {
                    if let Ok(index) = WeightedIndex::new(peak.qnames.iter().map(|p| p.weight)) {
                        for _ in 0..counts.peak {
                            let name = &peak.qnames[index.sample(&mut rng)].qname;
                            emit(&mut rng, name, Class::Malicious);
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| (a.ts, &a.org_id, &a.qname).cmp(&(b.ts, &b.org_id, &b.qname)));
        out
    }

    /// Chronologically ordered records, generated one day at a time.
    pub fn records(&self) -> impl Iterator<Item = QueryRecord> + '_ {
        let tags = self.tag_lookup();
        (0..self.days.len()).flat_map(move |d| self.day_records(d, &tags))
    }

    /// Daily proportion of `class` for one org, straight from the counts.
    pub fn proportion_series(&self, org: &str, class: Class) -> Vec<crate::analytics::ProportionPoint> {
        self.counts()
            .filter(|c| c.org_id == org)
            .map(|c| proportion_point(c.date, org, c.count(class), c.total()))
            .collect()
    }

    /// Pooled daily proportion over every org in `group`.
    pub fn group_proportion_series(&self, group: Group, class: Class) -> Vec<crate::analytics::ProportionPoint> {
        let members: Vec<usize> = self
            .scenario
            .profiles
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == group)
            .map(|(i, _)| i)
            .collect();
        self.days
            .iter()
            .map(|row| {
                let n: u64 = members.iter().map(|i| row[*i].count(class)).sum();
                let t: u64 = members.iter().map(|i| row[*i].total()).sum();
                proportion_point(row[0].date, group.as_str(), n, t)
            })
            .collect()
    }
}

fn proportion_point(date: NaiveDate, scope: &str, n: u64, total: u64) -> crate::analytics::ProportionPoint {
    crate::analytics::ProportionPoint {
        date,
        scope: scope.to_string(),
        value: (total > 0).then(|| n as f64 / total as f64),
    }
}

/// Generates the whole scenario as chronologically ordered records.
pub fn generate(scenario: &Scenario, seed: u64) -> Result<Vec<QueryRecord>, SynthError> {
    Ok(plan(scenario, seed)?.records().collect())
}

/// Feed entries for every listed pool name in the scenario, so that
/// classification of generated traffic agrees with the generator's labels.
pub fn synthetic_feed(scenario: &Scenario) -> Vec<ThreatEntry> {
    let mut by_name: BTreeMap<String, ThreatEntry> = BTreeMap::new();
    let listed = scenario
        .profiles
        .iter()
        .flat_map(|p| p.pools.grey.iter().chain(&p.pools.malicious))
        .chain(scenario.peak.iter().flat_map(|p| &p.qnames));
    for p in listed {
        let Ok(domain) = p.qname.parse::<DomainName>() else { continue };
        let mut entry = ThreatEntry::new(domain, p.status, &p.tags, "synthetic");
        entry.first_seen = NaiveDate::from_ymd_opt(2018, 1, 1);
        by_name
            .entry(p.qname.clone())
            .and_modify(|e| {
                e.tags.extend(entry.tags.iter().cloned());
                e.status = e.status.max(entry.status);
            })
            .or_insert(entry);
    }
    // Listed names nobody queries, as in any real feed.
    for i in 0..200 {
        let (status, tags): (Status, &[&str]) = match i % 4 {
            0 => (Status::Convicted, &["malware", "c2"]),
            1 => (Status::Blacklisted, &["phishing"]),
            2 => (Status::Flagged, &["tracker"]),
            _ => (Status::Blacklisted, &["botnet"]),
        };
        let name = format!("unseen{i:03}.threat.invalid");
        if let Ok(domain) = name.parse() {
            by_name.insert(name, ThreatEntry::new(domain, status, tags.iter().copied(), "synthetic"));
        }
    }
    by_name.into_values().collect()
}

fn benign_pool(extra: &[(&str, f64)]) -> Vec<PoolName> {
    // Zipf-like head of well-known names plus a long synthetic tail.
    let head = [
        "www.google.com",
        "outlook.office365.com",
        "www.facebook.com",
        "mail.google.com",
        "www.youtube.com",
        "login.microsoftonline.com",
        "yandex.ru",
        "mail.ru",
        "vk.com",
        "www.bing.com",
        "clients4.google.com",
        "api.telegram.org",
        "web.whatsapp.com",
        "update.microsoft.com",
        "ocsp.digicert.com",
        "www.wikipedia.org",
        "docs.google.com",
        "drive.google.com",
        "graph.facebook.com",
        "ssl.gstatic.com",
    ];
    let mut pool: Vec<PoolName> = head
        .iter()
        .enumerate()
        .map(|(i, q)| PoolName::benign(q, 60.0 / (i as f64 + 1.0)))
        .collect();
    pool.extend((0..400).map(|i| PoolName::benign(&format!("site{i:03}.example.org"), 0.25)));
    pool.extend(extra.iter().map(|(q, w)| PoolName::benign(q, *w)));
    pool
}

fn grey_pool(yadro: f64, fwz1: f64, other: f64) -> Vec<PoolName> {
    vec![
        PoolName::listed("counter.yadro.ru", yadro, Status::Flagged, &["adware", "spyware"]),
        PoolName::listed("top-fwz1.mail.ru", fwz1, Status::Blacklisted, &["adware", "spyware"]),
        PoolName::listed("pixel.adtrack.example", other, Status::Flagged, &["tracker"]),
        PoolName::listed("toolbar-update.example", other / 2.0, Status::Flagged, &["pup"]),
    ]
}

fn malicious_pool(social: f64, other: f64) -> Vec<PoolName> {
    vec![
        PoolName::listed("www.odnoklassniki.ru", social, Status::Blacklisted, &["malware"]),
        PoolName::listed("dbk589trlnxim.cloudfront.net", social / 2.0, Status::Blacklisted, &["malware"]),
        PoolName::listed("utorrent.com", other, Status::Blacklisted, &["malware", "virus"]),
        PoolName::listed("mininova.org", other / 2.0, Status::Blacklisted, &["malware"]),
        PoolName::listed("beacon.c2-relay.example", other / 4.0, Status::Convicted, &["c2", "botnet"]),
    ]
}

fn pools(yadro: f64, fwz1: f64, grey_other: f64, social: f64, mal_other: f64) -> DomainPools {
    DomainPools {
        benign: benign_pool(&[]),
        grey: grey_pool(yadro, fwz1, grey_other),
        malicious: malicious_pool(social, mal_other),
    }
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid literal date")
}

pub const DEFAULT_START: (i32, u32, u32) = (2018, 4, 1);
pub const DEFAULT_END: (i32, u32, u32) = (2018, 11, 30);
pub const BURST_QNAME: &str = "ciip-my.sharepoint.com";

/// Six organisations: two small, clean control orgs and four larger
/// treatment orgs. Green and Blue carry adware-heavy bad-egg users, Pink has a
/// one-week adware episode, Green has short malicious episodes, and
/// Turquoise's sharepoint client produces 30 days of bulk requests.
/// Volumes are illustrative, not measured.
pub fn default_profiles() -> Vec<SynthProfile> {
    // Benign pool weight is ~205, so grey/malicious weights read as per-mille-ish shares.
    let base = |org: &str, group, n_users, rate, amp, pools| SynthProfile {
        org_id: org.into(),
        group,
        n_users,
        per_user_daily_rate: rate,
        weekday_amplitude: amp,
        pools,
        bad_eggs: Vec::new(),
        bursts: Vec::new(),
        episodes: Vec::new(),
        intervention: None,
    };
    let mut red = base("red", Group::Control, 3, 30.0, 3.0, pools(0.02, 0.02, 0.02, 0.01, 0.01));
    red.pools.benign.push(PoolName::benign("intranet.red-cso.example", 5.0));
    let yellow = base("yellow", Group::Control, 4, 30.0, 3.0, pools(0.03, 0.01, 0.02, 0.01, 0.01));

    let mut green = base("green", Group::Treatment, 14, 32.0, 4.0, pools(0.6, 0.2, 0.2, 0.2, 0.1));
    green.bad_eggs = vec![
        BadEgg { user: 0, grey_multiplier: 50.0, malicious_multiplier: 20.0 },
        BadEgg { user: 1, grey_multiplier: 25.0, malicious_multiplier: 10.0 },
    ];
    green.episodes = vec![
        Episode { start: ymd(2018, 8, 7), n_days: 3, grey_multiplier: 1.0, malicious_multiplier: 4.0 },
        Episode { start: ymd(2018, 9, 3), n_days: 2, grey_multiplier: 1.0, malicious_multiplier: 4.0 },
    ];

    let mut turquoise = base("turquoise", Group::Treatment, 12, 28.0, 4.0, pools(0.3, 0.2, 0.3, 0.05, 0.05));
    turquoise.bad_eggs = vec![BadEgg { user: 3, grey_multiplier: 30.0, malicious_multiplier: 5.0 }];
    turquoise.bursts = vec![Burst { qname: BURST_QNAME.into(), n_days: 30, min_per_day: 2000, max_per_day: 20000 }];
    turquoise.pools.benign.push(PoolName::benign(BURST_QNAME, 2.0));

    let mut blue = base("blue", Group::Treatment, 14, 30.0, 4.0, pools(0.2, 0.6, 0.2, 0.1, 0.1));
    blue.bad_eggs = vec![
        BadEgg { user: 2, grey_multiplier: 50.0, malicious_multiplier: 15.0 },
        BadEgg { user: 5, grey_multiplier: 20.0, malicious_multiplier: 5.0 },
    ];

    let mut pink = base("pink", Group::Treatment, 8, 28.0, 3.0, pools(0.1, 0.1, 0.1, 0.05, 0.05));
    pink.episodes = vec![Episode {
        start: ymd(2018, 11, 5),
        n_days: 7,
        grey_multiplier: 40.0,
        malicious_multiplier: 1.0,
    }];
    vec![red, yellow, green, turquoise, blue, pink]
}

/// Default profiles over April–November 2018 with a constructed malicious
/// peak on 2018-09-17 at exactly twice any other day.
pub fn default_scenario() -> Scenario {
    let (sy, sm, sd) = DEFAULT_START;
    let (ey, em, ed) = DEFAULT_END;
    Scenario {
        start: ymd(sy, sm, sd),
        end: ymd(ey, em, ed),
        profiles: default_profiles(),
        peak: Some(PeakInjection {
            date: ymd(2018, 9, 17),
            org_id: "green".into(),
            factor: 2.0,
            qnames: vec![
                PoolName::listed("chaturbate.org", 3.0, Status::Blacklisted, &["malware"]),
                PoolName::listed("cams.com", 2.0, Status::Blacklisted, &["malware"]),
                PoolName::listed("utorrent.com", 2.0, Status::Blacklisted, &["malware", "virus"]),
                PoolName::listed("mininova.org", 1.0, Status::Blacklisted, &["malware"]),
            ],
        }),
    }
}

/// Names of the adware domains tracked per org in reports.
pub const TRACKED_ADWARE: [&str; 2] = ["counter.yadro.ru", "top-fwz1.mail.ru"];

pub fn default_groups() -> OrgGroups {
    default_profiles().iter().map(|p| (p.org_id.clone(), p.group)).collect()
}

impl Scenario {
    pub fn groups(&self) -> OrgGroups {
        self.profiles.iter().map(|p| (p.org_id.clone(), p.group)).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Scenario { path: "<inline>".into(), reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SynthError::Scenario { path: path.display().to_string(), reason: e.to_string() })?;
        toml::from_str(&text)
            .map_err(|e| SynthError::Scenario { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }
}

/// Pacing for live replay: wall-clock time is record time divided by the speedup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Speedup {
    Unpaced,
    Factor(f64),
}

impl FromStr for Speedup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "max" | "none" => Ok(Speedup::Unpaced),
            other => match other.parse::<f64>() {
                Ok(f) if f > 0.0 && f.is_finite() => Ok(Speedup::Factor(f)),
                Ok(f) if f.is_infinite() && f > 0.0 => Ok(Speedup::Unpaced),
                _ => Err(format!("speedup must be a positive number or `inf`, got `{s}`")),
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReplayStats {
    pub sent: u64,
    pub answered: u64,
    /// NXDOMAIN answers; the firewall's default block response.
    pub blocked: u64,
    pub servfail: u64,
    pub unanswered: u64,
    pub max_latency_ms: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub speedup: Speedup,
    pub concurrency: usize,
    pub timeout: Duration,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions { speedup: Speedup::Unpaced, concurrency: 64, timeout: Duration::from_secs(3) }
    }
}

/// Sends every record as a live query to its org's endpoint and tallies the answers.
pub async fn replay<I>(
    records: I,
    endpoints: &HashMap<String, SocketAddr>,
    opts: &ReplayOptions,
) -> Result<ReplayStats, SynthError>
where
    I: IntoIterator<Item = QueryRecord>,
{
    let mut jobs = Vec::new();
    for r in records {
        let target = *endpoints.get(&r.org_id).ok_or_else(|| SynthError::NoEndpoint(r.org_id.clone()))?;
        let qname: DomainName = match r.qname.parse() {
            Ok(n) => n,
            Err(_) => continue,
        };
        jobs.push((r.ts, target, qname, r.qtype));
    }
    if jobs.is_empty() {
        return Ok(ReplayStats::default());
    }
    let first_ts = jobs[0].0;
    let started = Instant::now();
    let queue = Arc::new(tokio::sync::Mutex::new(jobs.into_iter().enumerate()));
    let mut workers = Vec::new();
    for _ in 0..opts.concurrency.max(1) {
        let queue = Arc::clone(&queue);
        let opts = opts.clone();
        workers.push(tokio::spawn(async move {
            let sock = tokio::net::UdpSocket::bind("127.0.0.1:0").await?;
            let mut stats = ReplayStats::default();
            let mut buf = vec![0u8; dns_wire::MAX_MESSAGE_LEN];
            loop {
                let Some((i, (ts, target, qname, qtype))) = queue.lock().await.next() else { break };
                if let Speedup::Factor(f) = opts.speedup {
                    let offset = (ts - first_ts).num_milliseconds().max(0) as f64 / f;
                    let due = started + Duration::from_millis(offset as u64);
                    tokio::time::sleep_until(due.into()).await;
                }
                let id = (i % 65536) as u16;
                let query = dns_wire::encode_query(&QueryView::new(id, qname, qtype));
                let sent_at = Instant::now();
                sock.send_to(&query, target).await?;
                stats.sent += 1;
                let deadline = tokio::time::Instant::from(sent_at + opts.timeout);
                let answer = loop {
                    match tokio::time::timeout_at(deadline, sock.recv_from(&mut buf)).await {
                        Ok(Ok((n, _))) => match dns_wire::parse_response_meta(&buf[..n]) {
                            Ok(meta) if meta.id == id => break Some(meta),
                            _ => continue,
                        },
                        Ok(Err(_)) | Err(_) => break None,
                    }
                };
                match answer {
                    Some(meta) => {
                        stats.answered += 1;
                        stats.max_latency_ms = stats.max_latency_ms.max(sent_at.elapsed().as_millis() as u64);
                        match meta.rcode {
                            RCODE_NXDOMAIN => stats.blocked += 1,
                            RCODE_SERVFAIL => stats.servfail += 1,
                            _ => {}
                        }
                    }
                    None => stats.unanswered += 1,
                }
            }
            Ok::<_, std::io::Error>(stats)
        }));
    }
    let mut total = ReplayStats::default();
    for w in workers {
        let s = w.await.map_err(|e| SynthError::Unreachable(std::io::Error::other(e)))??;
        total.sent += s.sent;
        total.answered += s.answered;
        total.blocked += s.blocked;
        total.servfail += s.servfail;
        total.unanswered += s.unanswered;
        total.max_latency_ms = total.max_latency_ms.max(s.max_latency_ms);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::threat_intel::merge_feeds;

    fn small_scenario() -> Scenario {
        let mut s = default_scenario();
        s.start = ymd(2018, 9, 1);
        s.end = ymd(2018, 9, 20);
        for p in &mut s.profiles {
            p.bursts.iter_mut().for_each(|b| b.n_days = 2);
        }
        s
    }

    #[test]
    fn deterministic_under_seed() {
        let s = small_scenario();
        let a = generate(&s, 7).unwrap();
        let b = generate(&s, 7).unwrap();
        assert_eq!(a, b);
        let c = generate(&s, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_are_chronological() {
        let recs = generate(&small_scenario(), 1).unwrap();
        assert!(recs.windows(2).all(|w| w[0].ts <= w[1].ts));
        assert!(recs.iter().all(|r| r.validate().is_ok()));
    }

    #[test]
    fn labels_agree_with_feed() {
        let s = small_scenario();
        let store = merge_feeds(vec![synthetic_feed(&s)]);
        for r in generate(&s, 3).unwrap() {
            let v = store.classify(&r.qname.parse().unwrap());
            assert_eq!(v.class, r.class, "{}", r.qname);
        }
    }

    #[test]
    fn record_counts_match_plan() {
        let s = small_scenario();
        let p = plan(&s, 11).unwrap();
        assert_eq!(p.records().count() as u64, p.total());
    }

    #[test]
    fn peak_is_exactly_double() {
        let s = small_scenario();
        let p = plan(&s, 5).unwrap();
        let mut per_day: BTreeMap<NaiveDate, u64> = BTreeMap::new();
        for c in p.counts() {
            *per_day.entry(c.date).or_default() += c.count(Class::Malicious);
        }
        let peak = per_day[&ymd(2018, 9, 17)];
        let max_other = per_day.iter().filter(|(d, _)| **d != ymd(2018, 9, 17)).map(|(_, v)| *v).max().unwrap();
        assert_eq!(peak, 2 * max_other);
    }

    #[test]
    fn rejects_bad_profiles() {
        let mut s = small_scenario();
        s.profiles[0].n_users = 0;
        assert!(plan(&s, 1).is_err());
        let mut s = small_scenario();
        s.profiles[2].bad_eggs[0].user = 99;
        assert!(plan(&s, 1).is_err());
        let mut s = small_scenario();
        s.end = ymd(2018, 8, 1);
        assert!(matches!(plan(&s, 1), Err(SynthError::EmptyRange(..))));
    }

    #[test]
    fn scenario_toml_roundtrip() {
        let s = default_scenario();
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn intervention_scales_grey_rate() {
        let mut p = default_profiles().remove(2);
        let d = ymd(2018, 9, 4);
        let before = p.expected_class_rates(d);
        p.intervention = Some(Intervention { date: ymd(2018, 9, 1), grey_multiplier: 0.5, malicious_multiplier: 1.0 });
        let after = p.expected_class_rates(d);
        assert!((after[1] - 0.5 * before[1]).abs() < 1e-9);
        assert_eq!(after[0], before[0]);
    }

    #[test]
    fn speedup_parse() {
        assert_eq!("inf".parse::<Speedup>().unwrap(), Speedup::Unpaced);
        assert_eq!("10".parse::<Speedup>().unwrap(), Speedup::Factor(10.0));
        assert!("0".parse::<Speedup>().is_err());
    }
}
