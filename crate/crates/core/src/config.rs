//! Service configuration file.
//!
//! ```toml
//! log_dir = "logs"
//! feeds = ["feeds/main.csv"]
//! override_feeds = ["feeds/local-allow.csv"]
//!
//! [org.green]
//! listen = "127.0.0.1:5302"
//! group = "treatment"
//! intervention_date = "2018-10-01"
//!
//! [policy]
//! block_mode = "nxdomain"
//! grey_action = "forward"
//!
//! [upstream]
//! addr = "9.9.9.9:53"
//! timeout_ms = 2000
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use serde::Deserialize;
use thiserror::Error;

use crate::dns_wire::{BlockMode, DEFAULT_SINKHOLE_TTL};
use crate::firewall::{FirewallPolicy, GreyAction, ServiceConfig, DEFAULT_UPSTREAM_TIMEOUT, HEARTBEAT_INTERVAL};
use crate::org::{validate_bindings, Group, OrgBinding, OrgGroups};
use crate::threat_intel::{Class, FeedSpec, Status, Taxonomy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Unreadable { .. } => "CONFIG_UNREADABLE",
            ConfigError::Invalid(_) => "CONFIG",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOrg {
    listen: SocketAddr,
    group: Group,
    #[serde(default)]
    intervention_date: Option<NaiveDate>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    block_mode: Option<BlockMode>,
    grey_action: Option<GreyAction>,
    sinkhole_addr: Option<Ipv4Addr>,
    sinkhole_ttl: Option<u32>,
    block_statuses: Option<Vec<Status>>,
    block_classes: Option<Vec<Class>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUpstream {
    addr: SocketAddr,
    timeout_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTags {
    malicious: Option<Vec<String>>,
    grey: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    org: BTreeMap<String, RawOrg>,
    #[serde(default)]
    policy: RawPolicy,
    upstream: RawUpstream,
    #[serde(default)]
    feeds: Vec<PathBuf>,
    #[serde(default)]
    exact_feeds: Vec<PathBuf>,
    #[serde(default)]
    override_feeds: Vec<PathBuf>,
    log_dir: PathBuf,
    #[serde(default)]
    tags: RawTags,
    heartbeat_secs: Option<u64>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p
    }
}

/// Parses config text; `base` anchors relative paths.
pub fn parse_config(text: &str, base: &Path) -> Result<ServiceConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let bindings: Vec<OrgBinding> = raw
        .org
        .into_iter()
        .map(|(org_id, o)| OrgBinding { org_id, listen: o.listen, group: o.group, intervention_date: o.intervention_date })
        .collect();
    if bindings.is_empty() {
        return Err(ConfigError::Invalid("at least one [org.<id>] section is required".into()));
    }
    validate_bindings(&bindings).map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let mut policy = FirewallPolicy::new(raw.upstream.addr);
    policy.upstream_timeout = raw.upstream.timeout_ms.map(Duration::from_millis).unwrap_or(DEFAULT_UPSTREAM_TIMEOUT);
    let p = raw.policy;
    policy.block_mode = p.block_mode.unwrap_or_default();
    policy.grey_action = p.grey_action.unwrap_or_default();
    policy.sinkhole_addr = p.sinkhole_addr;
    policy.sinkhole_ttl = p.sinkhole_ttl.unwrap_or(DEFAULT_SINKHOLE_TTL);
    if let Some(s) = p.block_statuses {
        policy.block_statuses = s.into_iter().collect::<BTreeSet<_>>();
    }
    if let Some(c) = p.block_classes {
        policy.block_classes = c.into_iter().collect::<BTreeSet<_>>();
    }
    policy.validate().map_err(ConfigError::Invalid)?;

    let mut feeds: Vec<FeedSpec> = raw.feeds.into_iter().map(|f| FeedSpec::new(resolve(base, f))).collect();
    feeds.extend(raw.exact_feeds.into_iter().map(|f| FeedSpec { exact_only: true, ..FeedSpec::new(resolve(base, f)) }));
    feeds.extend(
        raw.override_feeds.into_iter().map(|f| FeedSpec { is_override: true, ..FeedSpec::new(resolve(base, f)) }),
    );

    let mut taxonomy = Taxonomy::default();
    let lower = |v: Vec<String>| v.into_iter().map(|t| t.trim().to_ascii_lowercase()).collect();
    if let Some(m) = raw.tags.malicious {
        taxonomy.malicious_tags = lower(m);
    }
    if let Some(g) = raw.tags.grey {
        taxonomy.grey_tags = lower(g);
    }

    Ok(ServiceConfig {
        bindings,
        policy,
        feeds,
        taxonomy,
        log_dir: resolve(base, raw.log_dir),
        heartbeat: raw.heartbeat_secs.map(Duration::from_secs).unwrap_or(HEARTBEAT_INTERVAL),
    })
}

pub fn load_config(path: &Path) -> Result<ServiceConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Unreadable { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

impl ServiceConfig {
    pub fn groups(&self) -> OrgGroups {
        OrgGroups::from_bindings(&self.bindings)
    }

    pub fn intervention_dates(&self) -> BTreeMap<String, NaiveDate> {
        self.bindings
            .iter()
            .filter_map(|b| b.intervention_date.map(|d| (b.org_id.clone(), d)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
log_dir = "logs"
feeds = ["a.csv"]
exact_feeds = ["exact.csv"]
override_feeds = ["allow.csv"]

[org.red]
listen = "127.0.0.1:5301"
group = "control"

[org.green]
listen = "127.0.0.1:5302"
group = "treatment"
intervention_date = "2018-10-01"

[policy]
block_mode = "sinkhole"
sinkhole_addr = "10.0.0.1"
grey_action = "block"

[upstream]
addr = "127.0.0.1:5353"
timeout_ms = 500
"#;

    #[test]
    fn parses_sample() {
        let c = parse_config(SAMPLE, Path::new("/etc/dnsward")).unwrap();
        assert_eq!(c.bindings.len(), 2);
        assert_eq!(c.policy.block_mode, BlockMode::Sinkhole);
        assert_eq!(c.policy.grey_action, GreyAction::Block);
        assert_eq!(c.policy.upstream_timeout, Duration::from_millis(500));
        assert_eq!(c.log_dir, PathBuf::from("/etc/dnsward/logs"));
        assert_eq!(c.feeds.len(), 3);
        assert!(c.feeds[1].exact_only && c.feeds[2].is_override);
        assert_eq!(c.groups().group_of("green"), Some(Group::Treatment));
        assert_eq!(c.intervention_dates().len(), 1);
    }

    #[test]
    fn rejects_invalid() {
        let control_with_date = SAMPLE.replace("group = \"treatment\"", "group = \"control\"");
        assert!(parse_config(&control_with_date, Path::new(".")).is_err());
        let dup = SAMPLE.replace("5302", "5301");
        assert!(parse_config(&dup, Path::new(".")).is_err());
        let no_sinkhole = SAMPLE.replace("sinkhole_addr = \"10.0.0.1\"\n", "");
        assert!(parse_config(&no_sinkhole, Path::new(".")).is_err());
        let typo = SAMPLE.replace("grey_action", "gray_action");
        assert!(parse_config(&typo, Path::new(".")).is_err());
    }
}
