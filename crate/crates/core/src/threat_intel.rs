//! Threat-intelligence feeds and domain classification.
//!
//! Feeds are CSV files (`domain,status,tags,source,first_seen`). Entries from
//! all feeds are merged per exact domain and indexed in a trie keyed by the
//! reversed label path, so a lookup walks the query name from the TLD down and
//! keeps the deepest matching entry.
//!
//! An entry matches its own name and every name below it on a label boundary
//! (`evil.example` matches `a.b.evil.example`, never `notevil.example`),
//! unless it was loaded from an exact-only feed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns_wire::DomainName;

pub const DEFAULT_MALICIOUS_TAGS: &[&str] = &["malware", "botnet", "virus", "phishing", "malicious", "c2"];
pub const DEFAULT_GREY_TAGS: &[&str] = &["adware", "spyware", "tracker", "pup"];

#[derive(Debug, Error)]
pub enum IntelError {
    #[error("cannot read feed {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feed {0} has no well-formed rows")]
    EmptyFeed(String),
    #[error("feed {feed} header is missing column `{column}`")]
    MissingColumn { feed: String, column: &'static str },
    #[error("csv error in feed {feed}: {source}")]
    Csv {
        feed: String,
        #[source]
        source: csv::Error,
    },
}

impl IntelError {
    pub fn code(&self) -> &'static str {
        match self {
            IntelError::FileUnreadable { .. } => "FEED_UNREADABLE",
            IntelError::EmptyFeed(_) => "EMPTY_FEED",
            IntelError::MissingColumn { .. } => "FEED_HEADER",
            IntelError::Csv { .. } => "FEED_CSV",
        }
    }
}

/// Listing status, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Allowed,
    Flagged,
    Blacklisted,
    Convicted,
}

impl Status {
    pub const ALL: [Status; 4] = [Status::Allowed, Status::Flagged, Status::Blacklisted, Status::Convicted];

    pub fn is_hostile(self) -> bool {
        matches!(self, Status::Blacklisted | Status::Convicted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Allowed => "allowed",
            Status::Flagged => "flagged",
            Status::Blacklisted => "blacklisted",
            Status::Convicted => "convicted",
        }
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "allowed" => Ok(Status::Allowed),
            "flagged" => Ok(Status::Flagged),
            "blacklisted" => Ok(Status::Blacklisted),
            "convicted" => Ok(Status::Convicted),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Traffic class of a query, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Benign,
    Grey,
    Malicious,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Benign, Class::Grey, Class::Malicious];

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Benign => "benign",
            Class::Grey => "grey",
            Class::Malicious => "malicious",
        }
    }
}

impl FromStr for Class {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(Class::Benign),
            "grey" | "gray" => Ok(Class::Grey),
            "malicious" => Ok(Class::Malicious),
            other => Err(format!("unknown class `{other}`")),
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreatEntry {
    pub domain: DomainName,
    pub status: Status,
    pub tags: BTreeSet<String>,
    /// Feed identifiers, sorted and deduplicated.
    pub sources: Vec<String>,
    pub first_seen: Option<NaiveDate>,
    /// Match only the listed name itself, not its subdomains.
    pub exact_only: bool,
}

impl ThreatEntry {
    pub fn new<I, S>(domain: DomainName, status: Status, tags: I, source: &str) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        ThreatEntry {
            domain,
            status,
            tags: tags.into_iter().map(|t| t.as_ref().trim().to_ascii_lowercase()).collect(),
            sources: vec![source.to_string()],
            first_seen: None,
            exact_only: false,
        }
    }

    pub fn tags_joined(&self) -> String {
        self.tags.iter().cloned().collect::<Vec<_>>().join(";")
    }

    fn absorb(&mut self, other: &ThreatEntry) {
        self.status = self.status.max(other.status);
        self.tags.extend(other.tags.iter().cloned());
        self.sources.extend(other.sources.iter().cloned());
        self.sources.sort();
        self.sources.dedup();
        self.first_seen = match (self.first_seen, other.first_seen) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.exact_only &= other.exact_only;
    }
}

/// Tag vocabularies that decide the class of a matched entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    pub malicious_tags: BTreeSet<String>,
    pub grey_tags: BTreeSet<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy {
            malicious_tags: DEFAULT_MALICIOUS_TAGS.iter().map(|s| s.to_string()).collect(),
            grey_tags: DEFAULT_GREY_TAGS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Taxonomy {
    /// Hostile status plus a malicious tag is Malicious; otherwise any grey tag
    /// is Grey. Allowed entries are always Benign.
    pub fn class_of(&self, entry: &ThreatEntry) -> Class {
        if entry.status == Status::Allowed {
            return Class::Benign;
        }
        if entry.status.is_hostile() && entry.tags.iter().any(|t| self.malicious_tags.contains(t)) {
            Class::Malicious
        } else if entry.tags.iter().any(|t| self.grey_tags.contains(t)) {
            Class::Grey
        } else {
            Class::Benign
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FeedLoad {
    pub entries: Vec<ThreatEntry>,
    pub rejected: Vec<RejectedRow>,
}

/// How one feed file participates in a store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedSpec {
    pub path: PathBuf,
    pub source: String,
    pub exact_only: bool,
    /// Local override list: an entry here wins over any hostile match at
    /// equal or lesser depth.
    pub is_override: bool,
}

impl FeedSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "feed".to_string());
        FeedSpec { path, source, exact_only: false, is_override: false }
    }
}

pub fn load_feed(path: &Path, source: &str) -> Result<FeedLoad, IntelError> {
    let file = std::fs::File::open(path)
        .map_err(|e| IntelError::FileUnreadable { path: path.to_path_buf(), source: e })?;
    load_feed_reader(file, source)
}

pub fn load_feed_reader<R: Read>(reader: R, source: &str) -> Result<FeedLoad, IntelError> {
    let csv_err = |e| IntelError::Csv { feed: source.to_string(), source: e };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let missing = |column| IntelError::MissingColumn { feed: source.to_string(), column };
    let domain_col = col("domain").ok_or_else(|| missing("domain"))?;
    let status_col = col("status").ok_or_else(|| missing("status"))?;
    let tags_col = col("tags").ok_or_else(|| missing("tags"))?;
    let source_col = col("source");
    let seen_col = col("first_seen");

    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for row in rdr.records() {
        let (line, parsed) = match row {
            Ok(rec) => {
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                (line, parse_feed_row(&rec, domain_col, status_col, tags_col, source_col, seen_col, source))
            }
            Err(e) => (e.position().map(|p| p.line()).unwrap_or(0), Err(e.to_string())),
        };
        match parsed {
            Ok(entry) => entries.push(entry),
            Err(reason) => {
                log::warn!("feed {source}: skipping line {line}: {reason}");
                rejected.push(RejectedRow { line, reason });
            }
        }
    }
    if entries.is_empty() {
        return Err(IntelError::EmptyFeed(source.to_string()));
    }
    Ok(FeedLoad { entries, rejected })
}

fn parse_feed_row(
    rec: &csv::StringRecord,
    domain_col: usize,
    status_col: usize,
    tags_col: usize,
    source_col: Option<usize>,
    seen_col: Option<usize>,
    feed: &str,
) -> Result<ThreatEntry, String> {
    let field = |i: usize| rec.get(i).ok_or_else(|| format!("missing field {}", i + 1));
    let domain: DomainName = field(domain_col)?.parse().map_err(|e| format!("domain: {e}"))?;
    if domain.is_root() {
        return Err("domain: root cannot be listed".into());
    }
    let status: Status = field(status_col)?.parse()?;
    let tags: BTreeSet<String> = field(tags_col)?
        .split(';')
        .map(|t| t.trim().to_ascii_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    if status != Status::Allowed && tags.is_empty() {
        return Err(format!("{status} entry without tags"));
    }
    let row_source = source_col.and_then(|i| rec.get(i)).filter(|s| !s.is_empty()).unwrap_or(feed);
    let first_seen = match seen_col.and_then(|i| rec.get(i)).filter(|s| !s.is_empty()) {
        Some(s) => Some(NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("first_seen: {e}"))?),
        None => None,
    };
    Ok(ThreatEntry {
        domain,
        status,
        tags,
        sources: vec![row_source.to_string()],
        first_seen,
        exact_only: false,
    })
}

/// Writes entries in the feed CSV format; the inverse of `load_feed_reader`.
pub fn write_feed<W: Write>(writer: W, entries: &[ThreatEntry]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["domain", "status", "tags", "source", "first_seen"])?;
    for e in entries {
        let seen = e.first_seen.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default();
        w.write_record([
            e.domain.to_string(),
            e.status.to_string(),
            e.tags_joined(),
            e.sources.join(";"),
            seen,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: HashMap<String, u32>,
    entry: Option<u32>,
}

/// Reversed-label trie over a sorted, deduplicated entry list.
#[derive(Debug, Clone)]
struct LabelTrie {
    nodes: Vec<TrieNode>,
    entries: Vec<ThreatEntry>,
}

impl LabelTrie {
    fn build(entries: Vec<ThreatEntry>) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for (idx, entry) in entries.iter().enumerate() {
            let mut at = 0usize;
            for label in entry.domain.labels().iter().rev() {
                let next = nodes.len() as u32;
                let child = *nodes[at].children.entry(label.clone()).or_insert(next);
                if child == next {
                    nodes.push(TrieNode::default());
                }
                at = child as usize;
            }
            nodes[at].entry = Some(idx as u32);
        }
        LabelTrie { nodes, entries }
    }

    /// Deepest entry matching `name`, with its depth in labels.
    fn deepest(&self, name: &DomainName) -> Option<(&ThreatEntry, usize)> {
        let labels = name.labels();
        let mut best = None;
        let mut at = 0usize;
        for (i, label) in labels.iter().rev().enumerate() {
            match self.nodes[at].children.get(label) {
                Some(&child) => at = child as usize,
                None => break,
            }
            let depth = i + 1;
            if let Some(idx) = self.nodes[at].entry {
                let entry = &self.entries[idx as usize];
                if !entry.exact_only || depth == labels.len() {
                    best = Some((entry, depth));
                }
            }
        }
        best
    }
}

fn merge_entries<I>(feeds: I) -> Vec<ThreatEntry>
where
    I: IntoIterator<Item = Vec<ThreatEntry>>,
{
    let mut merged: BTreeMap<DomainName, ThreatEntry> = BTreeMap::new();
    for feed in feeds {
        for entry in feed {
            match merged.get_mut(&entry.domain) {
                Some(existing) => existing.absorb(&entry),
                None => {
                    let mut e = entry;
                    e.sources.sort();
                    e.sources.dedup();
                    merged.insert(e.domain.clone(), e);
                }
            }
        }
    }
    merged.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreStats {
    pub entries: usize,
    pub overrides: usize,
    pub by_status: BTreeMap<Status, usize>,
    pub by_tag: BTreeMap<String, usize>,
}

/// Immutable, merged snapshot of all loaded feeds.
#[derive(Debug, Clone)]
pub struct IntelStore {
    main: LabelTrie,
    overrides: LabelTrie,
    taxonomy: Taxonomy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict<'a> {
    pub class: Class,
    pub matched: Option<&'a ThreatEntry>,
    pub match_depth: usize,
}

impl Default for IntelStore {
    fn default() -> Self {
        IntelStore::empty()
    }
}

impl IntelStore {
    pub fn empty() -> Self {
        merge_feeds(Vec::<Vec<ThreatEntry>>::new())
    }

    pub fn entries(&self) -> &[ThreatEntry] {
        &self.main.entries
    }

    pub fn override_entries(&self) -> &[ThreatEntry] {
        &self.overrides.entries
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn len(&self) -> usize {
        self.main.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.entries.is_empty()
    }

    pub fn with_taxonomy(mut self, taxonomy: Taxonomy) -> Self {
        self.taxonomy = taxonomy;
        self
    }

    pub fn classify(&self, name: &DomainName) -> Verdict<'_> {
        let hostile = self.main.deepest(name);
        if let Some((allow, depth)) = self.overrides.deepest(name) {
            if hostile.is_none_or(|(_, d)| depth >= d) {
                return Verdict { class: Class::Benign, matched: Some(allow), match_depth: depth };
            }
        }
        match hostile {
            Some((entry, depth)) => Verdict {
                class: self.taxonomy.class_of(entry),
                matched: Some(entry),
                match_depth: depth,
            },
            None => Verdict { class: Class::Benign, matched: None, match_depth: 0 },
        }
    }

    pub fn stats(&self) -> StoreStats {
        let mut by_status: BTreeMap<Status, usize> = Status::ALL.iter().map(|s| (*s, 0)).collect();
        let mut by_tag = BTreeMap::new();
        for e in &self.main.entries {
            *by_status.entry(e.status).or_default() += 1;
            for t in &e.tags {
                *by_tag.entry(t.clone()).or_default() += 1;
            }
        }
        StoreStats {
            entries: self.main.entries.len(),
            overrides: self.overrides.entries.len(),
            by_status,
            by_tag,
        }
    }
}

/// Merges feeds into one store. The result does not depend on feed order.
pub fn merge_feeds<I>(feeds: I) -> IntelStore
where
    I: IntoIterator<Item = Vec<ThreatEntry>>,
{
    merge_feeds_with(feeds, Vec::new(), Taxonomy::default())
}

pub fn merge_feeds_with<I, O>(feeds: I, overrides: O, taxonomy: Taxonomy) -> IntelStore
where
    I: IntoIterator<Item = Vec<ThreatEntry>>,
    O: IntoIterator<Item = Vec<ThreatEntry>>,
{
    IntelStore {
        main: LabelTrie::build(merge_entries(feeds)),
        overrides: LabelTrie::build(merge_entries(overrides)),
        taxonomy,
    }
}

pub fn classify<'a>(store: &'a IntelStore, name: &DomainName) -> Verdict<'a> {
    store.classify(name)
}

pub fn store_stats(store: &IntelStore) -> StoreStats {
    store.stats()
}

/// Loads every feed in `specs` and merges them into a store.
pub fn load_store(specs: &[FeedSpec], taxonomy: Taxonomy) -> Result<IntelStore, IntelError> {
    let mut feeds = Vec::new();
    let mut overrides = Vec::new();
    for spec in specs {
        let mut load = load_feed(&spec.path, &spec.source)?;
        for e in &mut load.entries {
            e.exact_only = spec.exact_only;
        }
        if spec.is_override {
            overrides.push(load.entries);
        } else {
            feeds.push(load.entries);
        }
    }
    Ok(merge_feeds_with(feeds, overrides, taxonomy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dn(s: &str) -> DomainName {
        s.parse().unwrap()
    }

    fn entry(d: &str, status: Status, tags: &[&str]) -> ThreatEntry {
        ThreatEntry::new(dn(d), status, tags.iter().copied(), "test")
    }

    #[test]
    fn loads_adware_row() {
        let csv = "domain,status,tags,source,first_seen\n\
                   counter.yadro.ru,flagged,\"adware;spyware\",feedA,2018-04-01\n";
        let load = load_feed_reader(csv.as_bytes(), "x").unwrap();
        assert_eq!(load.entries.len(), 1);
        let e = &load.entries[0];
        assert_eq!(e.tags, ["adware", "spyware"].iter().map(|s| s.to_string()).collect());
        assert_eq!(e.sources, vec!["feedA".to_string()]);
        assert_eq!(e.first_seen, NaiveDate::from_ymd_opt(2018, 4, 1));
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let long = format!("{}.com", vec!["a".repeat(60); 5].join("."));
        assert!(long.len() > 253);
        let csv = format!(
            "domain,status,tags,source,first_seen\n\
             ok.example,convicted,malware,f,\n\
             bad.example,convicted,,f,\n\
             {long},blacklisted,malware,f,\n\
             x.example,weird,malware,f,\n\
             y.example,flagged,adware,f,notadate\n"
        );
        let load = load_feed_reader(csv.as_bytes(), "f").unwrap();
        assert_eq!(load.entries.len(), 1);
        let lines: Vec<u64> = load.rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6]);
    }

    #[test]
    fn empty_feed_is_error() {
        let csv = "domain,status,tags,source,first_seen\nbad,convicted,,f,\n";
        assert!(matches!(load_feed_reader(csv.as_bytes(), "f"), Err(IntelError::EmptyFeed(_))));
        assert!(matches!(
            load_feed_reader("name,status\n".as_bytes(), "f"),
            Err(IntelError::MissingColumn { column: "domain", .. })
        ));
        assert!(matches!(
            load_feed(Path::new("/nonexistent/feed.csv"), "f"),
            Err(IntelError::FileUnreadable { .. })
        ));
    }

    #[test]
    fn merge_unions_tags_and_keeps_max_status() {
        let a = vec![entry("d.example", Status::Blacklisted, &["malware"])];
        let mut b_entry = entry("d.example", Status::Flagged, &["adware"]);
        b_entry.sources = vec!["feedB".into()];
        let store = merge_feeds(vec![a, vec![b_entry]]);
        assert_eq!(store.len(), 1);
        let e = &store.entries()[0];
        assert_eq!(e.status, Status::Blacklisted);
        assert_eq!(e.tags_joined(), "adware;malware");
        assert_eq!(e.sources, vec!["feedB".to_string(), "test".to_string()]);
    }

    #[test]
    fn empty_store_is_benign() {
        let store = IntelStore::empty();
        let v = store.classify(&dn("anything.example"));
        assert_eq!((v.class, v.match_depth), (Class::Benign, 0));
        assert!(v.matched.is_none());
        let stats = store.stats();
        assert_eq!(stats.entries, 0);
        assert!(stats.by_status.values().all(|c| *c == 0));
        assert_eq!(stats.by_status.len(), 4);
    }

    #[test]
    fn grey_adware_entry() {
        let store = merge_feeds(vec![vec![entry("counter.yadro.ru", Status::Flagged, &["adware", "spyware"])]]);
        let v = store.classify(&dn("counter.yadro.ru"));
        assert_eq!(v.class, Class::Grey);
        assert_eq!(v.match_depth, 3);
        // hostile status with only grey tags stays grey
        let store = merge_feeds(vec![vec![entry("top-fwz1.mail.ru", Status::Blacklisted, &["adware"])]]);
        assert_eq!(store.classify(&dn("top-fwz1.mail.ru")).class, Class::Grey);
    }

    #[test]
    fn subtree_and_boundary() {
        let store = merge_feeds(vec![vec![entry("evil.example", Status::Convicted, &["malware"])]]);
        let v = store.classify(&dn("a.b.evil.example"));
        assert_eq!((v.class, v.match_depth), (Class::Malicious, 2));
        assert_eq!(store.classify(&dn("notevil.example")).class, Class::Benign);
        assert_eq!(store.classify(&dn("example")).class, Class::Benign);
    }

    #[test]
    fn longest_match_wins() {
        let store = merge_feeds(vec![vec![
            entry("ads.example", Status::Flagged, &["adware"]),
            entry("bad.ads.example", Status::Convicted, &["malware"]),
        ]]);
        assert_eq!(store.classify(&dn("x.bad.ads.example")).class, Class::Malicious);
        assert_eq!(store.classify(&dn("x.ads.example")).class, Class::Grey);
    }

    #[test]
    fn exact_only_entries() {
        let mut e = entry("only.example", Status::Convicted, &["phishing"]);
        e.exact_only = true;
        let store = merge_feeds(vec![vec![e]]);
        assert_eq!(store.classify(&dn("only.example")).class, Class::Malicious);
        assert_eq!(store.classify(&dn("sub.only.example")).class, Class::Benign);
    }

    #[test]
    fn override_wins_at_equal_or_lesser_depth() {
        let store = merge_feeds_with(
            vec![vec![
                entry("chaturbate.org", Status::Convicted, &["malware"]),
                entry("bad.cdn.example", Status::Convicted, &["malware"]),
            ]],
            vec![vec![
                entry("chaturbate.org", Status::Allowed, &[] as &[&str]),
                entry("cdn.example", Status::Allowed, &[] as &[&str]),
            ]],
            Taxonomy::default(),
        );
        let v = store.classify(&dn("www.chaturbate.org"));
        assert_eq!(v.class, Class::Benign);
        assert_eq!(v.matched.unwrap().status, Status::Allowed);
        // deeper hostile entry beats a shallower override
        assert_eq!(store.classify(&dn("bad.cdn.example")).class, Class::Malicious);
        assert_eq!(store.classify(&dn("ok.cdn.example")).class, Class::Benign);
    }

    #[test]
    fn stats_counts() {
        let store = merge_feeds(vec![vec![
            entry("a.example", Status::Convicted, &["malware"]),
            entry("b.example", Status::Convicted, &["malware", "c2"]),
            entry("c.example", Status::Flagged, &["adware"]),
        ]]);
        let s = store.stats();
        assert_eq!(s.by_status[&Status::Convicted], 2);
        assert_eq!(s.by_status[&Status::Flagged], 1);
        assert_eq!(s.by_status[&Status::Allowed], 0);
        assert_eq!(s.by_tag["malware"], 2);
        assert_eq!(s.by_status.values().sum::<usize>(), s.entries);
    }

    #[test]
    fn feed_write_read_roundtrip() {
        let mut e = entry("counter.yadro.ru", Status::Flagged, &["adware", "spyware"]);
        e.first_seen = NaiveDate::from_ymd_opt(2018, 4, 1);
        let mut buf = Vec::new();
        write_feed(&mut buf, std::slice::from_ref(&e)).unwrap();
        let load = load_feed_reader(buf.as_slice(), "x").unwrap();
        assert_eq!(load.entries, vec![e]);
    }
}
