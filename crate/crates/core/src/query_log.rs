//! Append-only query log.
//!
//! Records are JSON Lines under `<log_dir>/<org_id>/<YYYY-MM-DD>.jsonl`, one
//! object per query with the keys `ts`, `org`, `qname`, `qtype`, `class`,
//! `action`, `rcode`, `matched`, `tags`. Readers stream line by line and
//! count malformed lines instead of failing on them.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns_wire::DomainName;
use crate::threat_intel::{Class, IntelStore};

pub const FLUSH_EVERY_RECORDS: usize = 100;
pub const FLUSH_INTERVAL: Duration = Duration::from_secs(1);
pub const UNPARSEABLE_QNAME: &str = "<unparseable>";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("column `{0}` is not mapped to an input column")]
    UnmappedColumn(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LogError {
    pub fn code(&self) -> &'static str {
        match self {
            LogError::MissingDir(_) => "MISSING_DIR",
            LogError::InvalidRecord(_) => "INVALID_RECORD",
            LogError::UnmappedColumn(_) => "UNMAPPED_COLUMN",
            LogError::Io { .. } => "IO_ERROR",
            LogError::Csv(_) => "CSV_ERROR",
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        LogError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Forwarded,
    Blocked,
}

mod ts_seconds {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&ts.format("%Y-%m-%dT%H:%M:%SZ"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| super::truncate_to_second(t.with_timezone(&Utc)))
            .map_err(serde::de::Error::custom)
    }
}

/// One logged DNS query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    #[serde(with = "ts_seconds")]
    pub ts: DateTime<Utc>,
    #[serde(rename = "org")]
    pub org_id: String,
    pub qname: String,
    pub qtype: u16,
    pub class: Class,
    pub action: Action,
    pub rcode: u8,
    #[serde(rename = "matched")]
    pub matched_domain: Option<String>,
    pub tags: Option<Vec<String>>,
}

pub fn truncate_to_second(ts: DateTime<Utc>) -> DateTime<Utc> {
    ts.with_nanosecond(0).unwrap_or(ts)
}

/// Org ids double as directory names.
pub fn valid_org_id(org: &str) -> bool {
    !org.is_empty()
        && org.len() <= 64
        && org.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl QueryRecord {
    pub fn date(&self) -> NaiveDate {
        self.ts.date_naive()
    }

    pub fn validate(&self) -> Result<(), LogError> {
        if !valid_org_id(&self.org_id) {
            return Err(LogError::InvalidRecord(format!("bad org id `{}`", self.org_id)));
        }
        if self.rcode > 15 {
            return Err(LogError::InvalidRecord(format!("rcode {} out of range", self.rcode)));
        }
        if self.class != Class::Benign && self.matched_domain.is_none() {
            return Err(LogError::InvalidRecord(format!(
                "{} record for {} without matched domain",
                self.class, self.qname
            )));
        }
        if self.ts.nanosecond() != 0 {
            return Err(LogError::InvalidRecord("timestamp has sub-second precision".into()));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        // Serialization of this plain struct cannot fail.
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Routes records to per-org, per-day files. Keeps one open file per org.
pub struct LogWriter {
    dir: PathBuf,
    open: HashMap<String, (NaiveDate, BufWriter<File>)>,
    pending: usize,
    last_flush: Instant,
    written: u64,
}

impl LogWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, LogError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| LogError::io(&dir, e))?;
        Ok(LogWriter { dir, open: HashMap::new(), pending: 0, last_flush: Instant::now(), written: 0 })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn path_for(dir: &Path, org: &str, date: NaiveDate) -> PathBuf {
        dir.join(org).join(format!("{}.jsonl", date.format("%Y-%m-%d")))
    }

    fn file_for(&mut self, org: &str, date: NaiveDate) -> Result<&mut BufWriter<File>, LogError> {
        let stale = matches!(self.open.get(org), Some((d, _)) if *d != date);
        if stale {
            if let Some((d, mut w)) = self.open.remove(org) {
                w.flush().map_err(|e| LogError::io(&Self::path_for(&self.dir, org, d), e))?;
            }
        }
        if !self.open.contains_key(org) {
            let path = Self::path_for(&self.dir, org, date);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| LogError::io(parent, e))?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| LogError::io(&path, e))?;
            self.open.insert(org.to_string(), (date, BufWriter::new(file)));
        }
        Ok(&mut self.open.get_mut(org).expect("inserted above").1)
    }

    fn write_line(&mut self, record: &QueryRecord, line: &str) -> Result<(), LogError> {
        let date = record.date();
        let w = self.file_for(&record.org_id, date)?;
        w.write_all(line.as_bytes()).and_then(|_| w.write_all(b"\n")).map_err(|e| {
            LogError::io(&Self::path_for(&self.dir, &record.org_id, date), e)
        })
    }

    pub fn append(&mut self, record: &QueryRecord) -> Result<(), LogError> {
        record.validate()?;
        let line = record.to_json_line();
        if let Err(first) = self.write_line(record, &line) {
            // Reopen once before giving up.
            log::warn!("log append failed, retrying: {first}");
            self.open.remove(&record.org_id);
            self.write_line(record, &line)?;
        }
        self.written += 1;
        self.pending += 1;
        if self.pending >= FLUSH_EVERY_RECORDS || self.last_flush.elapsed() >= FLUSH_INTERVAL {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), LogError> {
        for (org, (date, w)) in self.open.iter_mut() {
            w.flush().map_err(|e| LogError::io(&Self::path_for(&self.dir, org, *date), e))?;
        }
        self.pending = 0;
        self.last_flush = Instant::now();
        Ok(())
    }
}

impl Drop for LogWriter {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::error!("failed to flush query log on close: {e}");
        }
    }
}

/// Streams records from any JSONL source, counting lines it cannot parse.
pub struct JsonlReader<R> {
    lines: io::Lines<R>,
    scanned: u64,
    skipped: u64,
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R) -> Self {
        JsonlReader { lines: reader.lines(), scanned: 0, skipped: 0 }
    }

    pub fn scanned(&self) -> u64 {
        self.scanned
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = QueryRecord;

    fn next(&mut self) -> Option<QueryRecord> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    // Invalid UTF-8 counts as a malformed line; other errors end the stream.
                    if e.kind() == io::ErrorKind::InvalidData {
                        self.scanned += 1;
                        self.skipped += 1;
                        continue;
                    }
                    log::warn!("stopping log read: {e}");
                    return None;
                }
            };
            self.scanned += 1;
            match serde_json::from_str::<QueryRecord>(&line) {
                Ok(r) => return Some(r),
                Err(_) => self.skipped += 1,
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub org: Option<String>,
    pub class: Option<Class>,
}

impl RecordFilter {
    pub fn matches(&self, r: &QueryRecord) -> bool {
        self.org.as_ref().is_none_or(|o| *o == r.org_id) && self.class.is_none_or(|c| c == r.class)
    }
}

/// Records from every log file between two dates, date-major then org order.
pub struct LogReader {
    files: std::vec::IntoIter<PathBuf>,
    current: Option<JsonlReader<BufReader<File>>>,
    filter: RecordFilter,
    scanned: u64,
    skipped: u64,
    filtered_out: u64,
}

impl LogReader {
    pub fn scanned(&self) -> u64 {
        self.scanned + self.current.as_ref().map_or(0, |c| c.scanned())
    }

    pub fn skipped(&self) -> u64 {
        self.skipped + self.current.as_ref().map_or(0, |c| c.skipped())
    }

    pub fn filtered_out(&self) -> u64 {
        self.filtered_out
    }

    fn retire_current(&mut self) {
        if let Some(c) = self.current.take() {
            self.scanned += c.scanned();
            self.skipped += c.skipped();
        }
    }
}

impl Iterator for LogReader {
    type Item = QueryRecord;

    fn next(&mut self) -> Option<QueryRecord> {
        loop {
            if let Some(cur) = self.current.as_mut() {
                match cur.next() {
                    Some(r) if self.filter.matches(&r) => return Some(r),
                    Some(_) => {
                        self.filtered_out += 1;
                        continue;
                    }
                    None => self.retire_current(),
                }
            }
            let path = self.files.next()?;
            match File::open(&path) {
                Ok(f) => self.current = Some(JsonlReader::new(BufReader::new(f))),
                Err(e) => log::warn!("skipping unreadable log file {}: {e}", path.display()),
            }
        }
    }
}

fn org_dirs(log_dir: &Path) -> Result<Vec<String>, LogError> {
    if !log_dir.is_dir() {
        return Err(LogError::MissingDir(log_dir.to_path_buf()));
    }
    let mut orgs = Vec::new();
    for entry in fs::read_dir(log_dir).map_err(|e| LogError::io(log_dir, e))? {
        let entry = entry.map_err(|e| LogError::io(log_dir, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                if valid_org_id(name) {
                    orgs.push(name.to_string());
                }
            }
        }
    }
    orgs.sort();
    Ok(orgs)
}

pub fn read_range(
    log_dir: &Path,
    from: NaiveDate,
    to: NaiveDate,
    filter: RecordFilter,
) -> Result<LogReader, LogError> {
    if from > to {
        return Err(LogError::InvalidRecord(format!("range start {from} is after end {to}")));
    }
    let orgs = org_dirs(log_dir)?;
    let mut files = Vec::new();
    for date in from.iter_days().take_while(|d| *d <= to) {
        for org in &orgs {
            if filter.org.as_ref().is_some_and(|o| o != org) {
                continue;
            }
            let path = LogWriter::path_for(log_dir, org, date);
            if path.is_file() {
                files.push(path);
            }
        }
    }
    Ok(LogReader {
        files: files.into_iter(),
        current: None,
        filter,
        scanned: 0,
        skipped: 0,
        filtered_out: 0,
    })
}

/// First and last dates that have a log file, across all orgs.
pub fn log_date_span(log_dir: &Path) -> Result<Option<(NaiveDate, NaiveDate)>, LogError> {
    let mut span: Option<(NaiveDate, NaiveDate)> = None;
    for org in org_dirs(log_dir)? {
        let dir = log_dir.join(&org);
        for entry in fs::read_dir(&dir).map_err(|e| LogError::io(&dir, e))? {
            let entry = entry.map_err(|e| LogError::io(&dir, e))?;
            let name = entry.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".jsonl")) else {
                continue;
            };
            if let Ok(d) = NaiveDate::parse_from_str(stem, "%Y-%m-%d") {
                span = Some(match span {
                    Some((lo, hi)) => (lo.min(d), hi.max(d)),
                    None => (d, d),
                });
            }
        }
    }
    Ok(span)
}

/// Every record under `log_dir`, optionally filtered.
pub fn read_all(log_dir: &Path, filter: RecordFilter) -> Result<LogReader, LogError> {
    match log_date_span(log_dir)? {
        Some((lo, hi)) => read_range(log_dir, lo, hi, filter),
        None => Ok(LogReader {
            files: Vec::new().into_iter(),
            current: None,
            filter,
            scanned: 0,
            skipped: 0,
            filtered_out: 0,
        }),
    }
}

/// Names or zero-based indices of the input columns for an external import.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub timestamp: Option<String>,
    pub org: Option<String>,
    pub qname: Option<String>,
    pub qtype: Option<String>,
    pub class: Option<String>,
    pub action: Option<String>,
    pub rcode: Option<String>,
    pub has_headers: bool,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            timestamp: Some("timestamp".into()),
            org: Some("org".into()),
            qname: Some("qname".into()),
            qtype: Some("qtype".into()),
            class: None,
            action: None,
            rcode: None,
            has_headers: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ResolvedColumns {
    ts: usize,
    org: usize,
    qname: usize,
    qtype: Option<usize>,
    class: Option<usize>,
    action: Option<usize>,
    rcode: Option<usize>,
}

fn resolve_column(
    spec: Option<&String>,
    role: &str,
    headers: Option<&csv::StringRecord>,
) -> Result<Option<usize>, LogError> {
    let Some(spec) = spec.filter(|s| !s.is_empty()) else {
        return Ok(None);
    };
    if let Ok(idx) = spec.parse::<usize>() {
        if headers.is_none_or(|h| idx < h.len()) {
            return Ok(Some(idx));
        }
        return Err(LogError::UnmappedColumn(format!("{role} (index {idx})")));
    }
    headers
        .and_then(|h| h.iter().position(|c| c.trim().eq_ignore_ascii_case(spec)))
        .map(Some)
        .ok_or_else(|| LogError::UnmappedColumn(format!("{role} (`{spec}`)")))
}

fn qtype_from_str(s: &str) -> Option<u16> {
    let s = s.trim();
    if let Ok(n) = s.parse::<u16>() {
        return Some(n);
    }
    let code = match s.to_ascii_uppercase().as_str() {
        "A" => 1,
        "NS" => 2,
        "CNAME" => 5,
        "SOA" => 6,
        "PTR" => 12,
        "MX" => 15,
        "TXT" => 16,
        "AAAA" => 28,
        "SRV" => 33,
        "DS" => 43,
        "DNSKEY" => 48,
        "SVCB" => 64,
        "HTTPS" => 65,
        "ANY" => 255,
        other => return other.strip_prefix("TYPE").and_then(|n| n.parse().ok()),
    };
    Some(code)
}

/// ISO-8601 / RFC 3339, `YYYY-MM-DD HH:MM:SS` (taken as UTC), or epoch seconds.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(truncate_to_second(t.with_timezone(&Utc)));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(truncate_to_second(Utc.from_utc_datetime(&t)));
        }
    }
    if let Ok(secs) = s.parse::<i64>() {
        return DateTime::from_timestamp(secs, 0);
    }
    s.parse::<f64>()
        .ok()
        .filter(|f| f.is_finite())
        .and_then(|f| DateTime::from_timestamp(f.floor() as i64, 0))
}

/// Classifies imported rows on the fly when no class column is mapped.
pub struct ImportReader<'a, R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    cols: ResolvedColumns,
    store: &'a IntelStore,
    imported: u64,
    skipped: u64,
}

impl<R: Read> ImportReader<'_, R> {
    pub fn imported(&self) -> u64 {
        self.imported
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    fn convert(&self, row: &csv::StringRecord) -> Result<QueryRecord, String> {
        let get = |i: usize| row.get(i).map(str::trim).ok_or_else(|| format!("missing column {i}"));
        let ts = parse_timestamp(get(self.cols.ts)?).ok_or("unparseable timestamp")?;
        let org = get(self.cols.org)?.to_string();
        if !valid_org_id(&org) {
            return Err(format!("bad org id `{org}`"));
        }
        let qname: DomainName = get(self.cols.qname)?.parse().map_err(|e| format!("qname: {e}"))?;
        let qtype = match self.cols.qtype {
            Some(i) => qtype_from_str(get(i)?).ok_or("bad qtype")?,
            None => crate::dns_wire::TYPE_A,
        };
        let verdict = self.store.classify(&qname);
        let class = match self.cols.class {
            Some(i) => get(i)?.parse::<Class>()?,
            None => verdict.class,
        };
        let action = match self.cols.action {
            Some(i) => match get(i)?.to_ascii_lowercase().as_str() {
                "blocked" | "block" => Action::Blocked,
                _ => Action::Forwarded,
            },
            None => Action::Forwarded,
        };
        let rcode = match self.cols.rcode {
            Some(i) => get(i)?.parse::<u8>().ok().filter(|r| *r <= 15).ok_or("bad rcode")?,
            None => 0,
        };
        let (matched_domain, tags) = match (class, verdict.matched) {
            (Class::Benign, _) => (None, None),
            (_, Some(e)) => (Some(e.domain.to_string()), Some(e.tags.iter().cloned().collect())),
            (_, None) => (Some(qname.to_string()), None),
        };
        Ok(QueryRecord {
            ts,
            org_id: org,
            qname: qname.to_string(),
            qtype,
            class,
            action,
            rcode,
            matched_domain,
            tags,
        })
    }
}

impl<R: Read> Iterator for ImportReader<'_, R> {
    type Item = QueryRecord;

    fn next(&mut self) -> Option<QueryRecord> {
        loop {
            let row = match self.records.next()? {
                Ok(row) => row,
                Err(e) => {
                    log::debug!("import: skipping row: {e}");
                    self.skipped += 1;
                    continue;
                }
            };
            match self.convert(&row) {
                Ok(r) => {
                    self.imported += 1;
                    return Some(r);
                }
                Err(reason) => {
                    log::debug!("import: skipping row {:?}: {reason}", row.position().map(|p| p.line()));
                    self.skipped += 1;
                }
            }
        }
    }
}

pub fn import_external_reader<'a, R: Read>(
    reader: R,
    mapping: &ColumnMap,
    store: &'a IntelStore,
) -> Result<ImportReader<'a, R>, LogError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(mapping.has_headers)
        .flexible(true)
        .from_reader(reader);
    let headers = if mapping.has_headers { Some(rdr.headers()?.clone()) } else { None };
    let h = headers.as_ref();
    let required = |spec: Option<&String>, role: &str| {
        resolve_column(spec, role, h)?.ok_or_else(|| LogError::UnmappedColumn(role.to_string()))
    };
    let cols = ResolvedColumns {
        ts: required(mapping.timestamp.as_ref(), "timestamp")?,
        org: required(mapping.org.as_ref(), "org")?,
        qname: required(mapping.qname.as_ref(), "qname")?,
        qtype: resolve_column(mapping.qtype.as_ref(), "qtype", h).unwrap_or(None),
        class: resolve_column(mapping.class.as_ref(), "class", h)?,
        action: resolve_column(mapping.action.as_ref(), "action", h)?,
        rcode: resolve_column(mapping.rcode.as_ref(), "rcode", h)?,
    };
    Ok(ImportReader { records: rdr.into_records(), cols, store, imported: 0, skipped: 0 })
}

pub fn import_external<'a>(
    path: &Path,
    mapping: &ColumnMap,
    store: &'a IntelStore,
) -> Result<ImportReader<'a, File>, LogError> {
    let file = File::open(path).map_err(|e| LogError::io(path, e))?;
    import_external_reader(file, mapping, store)
}
