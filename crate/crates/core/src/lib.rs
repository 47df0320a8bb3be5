//! DNS firewall and DNS-hygiene analytics.
//!
//! The crate is organised bottom-up:
//!
//! * [`dns_wire`]: the small DNS message codec the firewall needs.
//! * [`threat_intel`]: feed loading, merging and malicious/grey/benign classification.
//! * [`query_log`]: the per-org, per-day JSONL query log and CSV import.
//! * [`firewall`]: the per-organisation forwarding firewall service.
//! * [`analytics`]: daily aggregates, proportions, rankings, spikes, weekly patterns.
//! * [`intervention`]: interrupted-time-series effect estimation with placebo inference.
//! * [`traffic_synth`]: deterministic synthetic traffic and the matching feed.
//! * [`report`]: CSV and SVG output of the analysis bundle.

pub mod analytics;
pub mod config;
pub mod dns_wire;
pub mod firewall;
pub mod intervention;
pub mod org;
pub mod query_log;
pub mod report;
pub mod threat_intel;
pub mod traffic_synth;

pub use dns_wire::{BlockMode, DomainName, QueryView, ResponseMeta};
pub use query_log::{Action, QueryRecord};
pub use threat_intel::{Class, IntelStore, Status, ThreatEntry, Verdict};
