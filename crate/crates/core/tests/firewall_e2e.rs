//! The service against a local stub upstream, over real UDP sockets.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use dnsward::dns_wire::{encode_query, parse_query, parse_response_meta, synthesize_response, RCODE_NXDOMAIN, RCODE_SERVFAIL};
use dnsward::firewall::{self, FirewallPolicy, ServiceConfig};
use dnsward::org::{Group, OrgBinding};
use dnsward::query_log::{read_all, RecordFilter};
use dnsward::threat_intel::{write_feed, FeedSpec, Taxonomy};
use dnsward::traffic_synth::{replay, ReplayOptions};
use dnsward::{Action, Class, DomainName, QueryRecord, QueryView, Status, ThreatEntry};
use tokio::net::UdpSocket;

#[derive(Clone, Copy, PartialEq)]
enum Stub {
    Answer,
    /// Reply only with a wrong transaction id.
    WrongId,
}

/// Upstream that records every name it sees.
async fn stub(mode: Stub) -> (SocketAddr, Arc<Mutex<Vec<String>>>) {
    let sock = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let addr = sock.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    tokio::spawn(async move {
        let mut buf = [0u8; 4096];
        loop {
            let Ok((n, from)) = sock.recv_from(&mut buf).await else { return };
            let Ok(mut q) = parse_query(&buf[..n]) else { continue };
            log.lock().unwrap().push(q.qname.to_string());
            if mode == Stub::WrongId {
                q.id = q.id.wrapping_add(1);
            }
            let _ = sock.send_to(&synthesize_response(&q, 0), from).await;
        }
    });
    (addr, seen)
}

fn feed_file(dir: &Path, names: &[&str]) -> std::path::PathBuf {
    let entries: Vec<ThreatEntry> = names
        .iter()
        .map(|n| ThreatEntry::new(n.parse().unwrap(), Status::Convicted, ["malware"], "test"))
        .collect();
    let path = dir.join("feed.csv");
    write_feed(std::fs::File::create(&path).unwrap(), &entries).unwrap();
    path
}

fn config(dir: &Path, upstream: SocketAddr, orgs: &[&str], feed: std::path::PathBuf) -> ServiceConfig {
    let mut policy = FirewallPolicy::new(upstream);
    policy.upstream_timeout = Duration::from_millis(500);
    ServiceConfig {
        bindings: orgs
            .iter()
            .map(|o| OrgBinding {
                org_id: o.to_string(),
                listen: "127.0.0.1:0".parse().unwrap(),
                group: Group::Treatment,
                intervention_date: None,
            })
            .collect(),
        policy,
        feeds: vec![FeedSpec::new(feed)],
        taxonomy: Taxonomy::default(),
        log_dir: dir.join("logs"),
        heartbeat: Duration::from_secs(3600),
    }
}

fn rec(org: &str, qname: &str, i: i64) -> QueryRecord {
    QueryRecord {
        ts: Utc.with_ymd_and_hms(2018, 9, 17, 9, 0, 0).unwrap() + chrono::Duration::seconds(i),
        org_id: org.into(),
        qname: qname.into(),
        qtype: 1,
        class: Class::Benign,
        action: Action::Forwarded,
        rcode: 0,
        matched_domain: None,
        tags: None,
    }
}

async fn ask(addr: SocketAddr, name: &str, id: u16) -> (u8, Duration) {
    let sock = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let q = QueryView::new(id, name.parse::<DomainName>().unwrap(), 1);
    let t = Instant::now();
    sock.send_to(&encode_query(&q), addr).await.unwrap();
    let mut buf = [0u8; 4096];
    let (n, _) = tokio::time::timeout(Duration::from_secs(3), sock.recv_from(&mut buf)).await.unwrap().unwrap();
    let meta = parse_response_meta(&buf[..n]).unwrap();
    assert_eq!(meta.id, id);
    (meta.rcode, t.elapsed())
}

#[tokio::test(flavor = "multi_thread")]
async fn two_orgs_exactly_once_and_blocked_never_forwarded() {
    let dir = tempfile::tempdir().unwrap();
    let (up, seen) = stub(Stub::Answer).await;
    let feed = feed_file(dir.path(), &["evil.example"]);
    let handle = firewall::start(config(dir.path(), up, &["red", "green"], feed)).await.unwrap();
    let endpoints: HashMap<String, SocketAddr> = handle.local_addrs().iter().cloned().collect();

    let mut recs = Vec::new();
    for i in 0..200 {
        let org = if i % 2 == 0 { "red" } else { "green" };
        let name = if i % 10 == 0 { format!("c{i}.evil.example") } else { format!("ok{i}.example.org") };
        recs.push(rec(org, &name, i));
    }
    let stats = replay(recs.clone(), &endpoints, &ReplayOptions::default()).await.unwrap();
    assert_eq!((stats.sent, stats.answered, stats.blocked, stats.unanswered), (200, 200, 20, 0));

    let summary = handle.shutdown().await.unwrap();
    assert_eq!(summary.records_written, 200);
    let logged: Vec<QueryRecord> = read_all(&dir.path().join("logs"), RecordFilter::default()).unwrap().collect();
    assert_eq!(logged.len(), 200);
    for r in &recs {
        let hits: Vec<&QueryRecord> = logged.iter().filter(|l| l.qname == r.qname).collect();
        assert_eq!(hits.len(), 1, "{}", r.qname);
        assert_eq!(hits[0].org_id, r.org_id, "logged under the listener's org");
        let blocked = r.qname.ends_with(".evil.example");
        assert_eq!(hits[0].action == Action::Blocked, blocked);
        assert_eq!(hits[0].class == Class::Malicious, blocked);
    }
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 180);
    assert!(seen.iter().all(|n| !n.ends_with("evil.example")));
}

#[tokio::test(flavor = "multi_thread")]
async fn mismatched_upstream_id_becomes_servfail_in_time() {
    let dir = tempfile::tempdir().unwrap();
    let (up, _) = stub(Stub::WrongId).await;
    let feed = feed_file(dir.path(), &["unrelated.example"]);
    let handle = firewall::start(config(dir.path(), up, &["red"], feed)).await.unwrap();
    let (rcode, took) = ask(handle.addr_of("red").unwrap(), "www.example.org", 77).await;
    assert_eq!(rcode, RCODE_SERVFAIL);
    assert!(took < Duration::from_millis(500 + 200), "{took:?}");
    let summary = handle.shutdown().await.unwrap();
    assert_eq!(summary.records_written, 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn reload_swaps_store_between_queries() {
    let dir = tempfile::tempdir().unwrap();
    let (up, seen) = stub(Stub::Answer).await;
    let feed = feed_file(dir.path(), &["old.example"]);
    let handle = firewall::start(config(dir.path(), up, &["green"], feed)).await.unwrap();
    let addr = handle.addr_of("green").unwrap();
    assert_eq!(ask(addr, "new.example", 1).await.0, 0);
    assert_eq!(ask(addr, "old.example", 2).await.0, RCODE_NXDOMAIN);

    feed_file(dir.path(), &["new.example"]);
    assert_eq!(handle.reload().unwrap(), 1);
    assert_eq!(ask(addr, "new.example", 3).await.0, RCODE_NXDOMAIN);
    assert_eq!(ask(addr, "old.example", 4).await.0, 0);

    // A broken feed keeps the previous snapshot.
    std::fs::write(dir.path().join("feed.csv"), "not,a,feed\n").unwrap();
    assert!(handle.reload().is_err());
    assert_eq!(ask(addr, "new.example", 5).await.0, RCODE_NXDOMAIN);

    let summary = handle.shutdown().await.unwrap();
    assert_eq!(summary.records_written, 5);
    assert_eq!(*seen.lock().unwrap(), vec!["new.example".to_string(), "old.example".to_string()]);
}

#[tokio::test(flavor = "multi_thread")]
async fn replay_counts_convicted_as_blocked() {
    let dir = tempfile::tempdir().unwrap();
    let (up, _) = stub(Stub::Answer).await;
    let feed = feed_file(dir.path(), &["c2.bad.example"]);
    let handle = firewall::start(config(dir.path(), up, &["blue"], feed)).await.unwrap();
    let endpoints: HashMap<String, SocketAddr> = handle.local_addrs().iter().cloned().collect();
    let recs: Vec<QueryRecord> = (0..100)
        .map(|i| rec("blue", if i % 10 == 3 { "c2.bad.example" } else { "fine.example" }, i))
        .collect();
    let stats = replay(recs, &endpoints, &ReplayOptions::default()).await.unwrap();
    assert_eq!(stats.blocked, 10);
    assert_eq!(replay(Vec::new(), &endpoints, &ReplayOptions::default()).await.unwrap(), Default::default());
    assert_eq!(handle.shutdown().await.unwrap().records_written, 100);
}

#[tokio::test(flavor = "multi_thread")]
async fn shutdown_releases_the_port() {
    let dir = tempfile::tempdir().unwrap();
    let (up, _) = stub(Stub::Answer).await;
    let feed = feed_file(dir.path(), &["unrelated.example"]);
    let handle = firewall::start(config(dir.path(), up, &["pink"], feed)).await.unwrap();
    let addr = handle.addr_of("pink").unwrap();
    ask(addr, "a.example", 9).await;
    handle.shutdown().await.unwrap();
    // The port can be bound again once the listener is gone.
    UdpSocket::bind(addr).await.unwrap();
}
