//! Per-organisation forwarding DNS firewall.
//!
//! Each org gets an exclusive UDP listener; the org of a record is a function
//! of the listener that received it, never of the client address (which is
//! used only to route the reply and is not persisted).

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, RwLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::dns_wire::{self, BlockMode, WireError, DEFAULT_SINKHOLE_TTL, MAX_MESSAGE_LEN, RCODE_SERVFAIL};
use crate::org::{validate_bindings, BindingError, OrgBinding};
use crate::query_log::{truncate_to_second, Action, LogError, LogWriter, QueryRecord, UNPARSEABLE_QNAME};
use crate::threat_intel::{load_store, Class, FeedSpec, IntelError, IntelStore, Status, Taxonomy};

pub const DEFAULT_UPSTREAM_TIMEOUT: Duration = Duration::from_millis(2000);
pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GreyAction {
    /// Forward and log: alerting only.
    #[default]
    Forward,
    Block,
}

impl FromStr for GreyAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "forward" => Ok(GreyAction::Forward),
            "block" => Ok(GreyAction::Block),
            other => Err(format!("unknown grey action `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirewallPolicy {
    pub block_statuses: BTreeSet<Status>,
    pub block_classes: BTreeSet<Class>,
    pub grey_action: GreyAction,
    pub block_mode: BlockMode,
    pub sinkhole_addr: Option<Ipv4Addr>,
    pub sinkhole_ttl: u32,
    pub upstream: SocketAddr,
    pub upstream_timeout: Duration,
}

impl FirewallPolicy {
    pub fn new(upstream: SocketAddr) -> Self {
        FirewallPolicy {
            block_statuses: [Status::Convicted, Status::Blacklisted].into(),
            block_classes: [Class::Malicious].into(),
            grey_action: GreyAction::Forward,
            block_mode: BlockMode::Nxdomain,
            sinkhole_addr: None,
            sinkhole_ttl: DEFAULT_SINKHOLE_TTL,
            upstream,
            upstream_timeout: DEFAULT_UPSTREAM_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.upstream_timeout.is_zero() {
            return Err("upstream timeout must be positive".into());
        }
        if self.block_mode == BlockMode::Sinkhole && self.sinkhole_addr.is_none() {
            return Err("sinkhole block mode needs policy.sinkhole_addr".into());
        }
        Ok(())
    }

    /// Whether a verdict of `class` on an entry with `status` is blocked.
    pub fn blocks(&self, class: Class, status: Option<Status>) -> bool {
        if class == Class::Grey && self.grey_action == GreyAction::Block {
            return true;
        }
        self.block_classes.contains(&class) && status.is_some_and(|s| self.block_statuses.contains(&s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionOutcome {
    pub action: Action,
    pub rcode: u8,
    pub latency: Duration,
}

/// Everything `handle_query` produces for one datagram.
#[derive(Debug, Clone)]
pub struct Handled {
    /// `None` when the datagram is dropped without reply.
    pub response: Option<Vec<u8>>,
    pub record: QueryRecord,
    pub outcome: ActionOutcome,
}

fn response_rcode(resp: &[u8]) -> u8 {
    resp.get(3).map(|b| b & 0x0f).unwrap_or(RCODE_SERVFAIL)
}

fn unspecified_for(addr: &SocketAddr) -> SocketAddr {
    match addr.ip() {
        IpAddr::V4(_) => SocketAddr::new(IpAddr::V4(Ipv4Addr::UNSPECIFIED), 0),
        IpAddr::V6(_) => SocketAddr::new(IpAddr::V6(Ipv6Addr::UNSPECIFIED), 0),
    }
}

/// Relays `raw` to `upstream` and returns the first reply from it whose
/// transaction id matches. Timeouts and transport errors become SERVFAIL.
pub async fn forward_upstream(raw: &[u8], upstream: SocketAddr, timeout: Duration) -> Vec<u8> {
    let servfail = || match dns_wire::parse_query_raw(raw) {
        Ok(q) => q.servfail(),
        Err(_) => dns_wire::formerr_for(raw).unwrap_or_default(),
    };
    let Some(id) = dns_wire::peek_id(raw) else { return servfail() };
    let deadline = tokio::time::Instant::now() + timeout;
    let attempt = async {
        let sock = UdpSocket::bind(unspecified_for(&upstream)).await?;
        sock.send_to(raw, upstream).await?;
        let mut buf = vec![0u8; MAX_MESSAGE_LEN];
        loop {
            let (n, from) = sock.recv_from(&mut buf).await?;
            if from == upstream && dns_wire::peek_id(&buf[..n]) == Some(id) && n >= dns_wire::HEADER_LEN {
                buf.truncate(n);
                return Ok::<_, std::io::Error>(buf);
            }
            log::debug!("ignoring stray upstream packet from {from}");
        }
    };
    match tokio::time::timeout_at(deadline, attempt).await {
        Ok(Ok(resp)) => resp,
        Ok(Err(e)) => {
            log::debug!("upstream {upstream} error: {e}");
            servfail()
        }
        Err(_) => servfail(),
    }
}

/// Classifies, enforces policy and forwards one datagram. Always yields
/// exactly one record.
pub async fn handle_query(
    binding: &OrgBinding,
    policy: &FirewallPolicy,
    store: &IntelStore,
    raw: &[u8],
    now: DateTime<Utc>,
) -> Handled {
    let started = Instant::now();
    let ts = truncate_to_second(now);
    let parsed = match dns_wire::parse_query_raw(raw) {
        Ok(p) => p,
        Err(err) => {
            // Responses (QR set) are dropped so two responders cannot loop.
            let response = match err {
                WireError::NotAQuery => None,
                _ => dns_wire::formerr_for(raw),
            };
            let rcode = response.as_deref().map(response_rcode).unwrap_or(dns_wire::RCODE_FORMERR);
            return Handled {
                response,
                record: QueryRecord {
                    ts,
                    org_id: binding.org_id.clone(),
                    qname: UNPARSEABLE_QNAME.into(),
                    qtype: 0,
                    class: Class::Benign,
                    action: Action::Blocked,
                    rcode,
                    matched_domain: None,
                    tags: None,
                },
                outcome: ActionOutcome { action: Action::Blocked, rcode, latency: started.elapsed() },
            };
        }
    };
    let verdict = store.classify(&parsed.view.qname);
    let matched = verdict.matched;
    let (action, response) = if policy.blocks(verdict.class, matched.map(|m| m.status)) {
        let resp = parsed.block_response(policy.block_mode, policy.sinkhole_addr, policy.sinkhole_ttl);
        (Action::Blocked, resp)
    } else {
        (Action::Forwarded, forward_upstream(raw, policy.upstream, policy.upstream_timeout).await)
    };
    let rcode = response_rcode(&response);
    let listed = verdict.class != Class::Benign;
    let record = QueryRecord {
        ts,
        org_id: binding.org_id.clone(),
        qname: parsed.view.qname.to_string(),
        qtype: parsed.view.qtype,
        class: verdict.class,
        action,
        rcode,
        matched_domain: matched.filter(|_| listed).map(|m| m.domain.to_string()),
        tags: matched.filter(|m| listed && !m.tags.is_empty()).map(|m| m.tags.iter().cloned().collect()),
    };
    Handled {
        response: Some(response),
        record,
        outcome: ActionOutcome { action, rcode, latency: started.elapsed() },
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("invalid bindings: {0}")]
    Bindings(#[from] BindingError),
    #[error("no org bindings configured")]
    NoBindings,
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("cannot bind {org} on {addr}: {source}")]
    Bind { org: String, addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Intel(#[from] IntelError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl ServeError {
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::Bindings(_) | ServeError::NoBindings | ServeError::Policy(_) => "CONFIG",
            ServeError::Bind { .. } => "BIND_FAILED",
            ServeError::Intel(e) => e.code(),
            ServeError::Log(e) => e.code(),
            ServeError::Runtime(_) => "RUNTIME",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bindings: Vec<OrgBinding>,
    pub policy: FirewallPolicy,
    pub feeds: Vec<FeedSpec>,
    pub taxonomy: Taxonomy,
    pub log_dir: PathBuf,
    pub heartbeat: Duration,
}

/// Per-org counters reported in heartbeats.
#[derive(Debug, Default)]
pub struct OrgCounters {
    pub received: AtomicU64,
    pub forwarded: AtomicU64,
    pub blocked: AtomicU64,
    pub servfail: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CounterSnapshot {
    pub received: u64,
    pub forwarded: u64,
    pub blocked: u64,
    pub servfail: u64,
}

impl OrgCounters {
    fn record(&self, outcome: &ActionOutcome) {
        self.received.fetch_add(1, Ordering::Relaxed);
        match outcome.action {
            Action::Forwarded => self.forwarded.fetch_add(1, Ordering::Relaxed),
            Action::Blocked => self.blocked.fetch_add(1, Ordering::Relaxed),
        };
        if outcome.rcode == RCODE_SERVFAIL {
            self.servfail.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            received: self.received.load(Ordering::Relaxed),
            forwarded: self.forwarded.load(Ordering::Relaxed),
            blocked: self.blocked.load(Ordering::Relaxed),
            servfail: self.servfail.load(Ordering::Relaxed),
        }
    }
}

pub fn heartbeat_line(counters: &BTreeMap<String, Arc<OrgCounters>>) -> String {
    let parts: Vec<String> = counters
        .iter()
        .map(|(org, c)| {
            let s = c.snapshot();
            format!(
                "{org}: received={} forwarded={} blocked={} servfail={}",
                s.received, s.forwarded, s.blocked, s.servfail
            )
        })
        .collect();
    format!("heartbeat {}", parts.join("; "))
}

type SharedStore = Arc<RwLock<Arc<IntelStore>>>;

fn current(store: &SharedStore) -> Arc<IntelStore> {
    Arc::clone(&store.read().unwrap_or_else(|p| p.into_inner()))
}

/// A running service. Dropping it without `shutdown` aborts the listeners.
pub struct ServiceHandle {
    addrs: Vec<(String, SocketAddr)>,
    store: SharedStore,
    feeds: Vec<FeedSpec>,
    taxonomy: Taxonomy,
    counters: BTreeMap<String, Arc<OrgCounters>>,
    stop: watch::Sender<bool>,
    fatal: Arc<std::sync::Mutex<Option<LogError>>>,
    tasks: Vec<JoinHandle<()>>,
    writer: Option<std::thread::JoinHandle<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceSummary {
    pub records_written: u64,
    pub per_org: BTreeMap<String, CounterSnapshot>,
}

fn log_writer_thread(
    mut writer: LogWriter,
    rx: mpsc::Receiver<QueryRecord>,
    fatal: Arc<std::sync::Mutex<Option<LogError>>>,
    stop: watch::Sender<bool>,
) -> u64 {
    loop {
        match rx.recv_timeout(crate::query_log::FLUSH_INTERVAL) {
            Ok(record) => {
                if let Err(e) = writer.append(&record) {
                    log::error!("query log failed: {e}; shutting down");
                    *fatal.lock().unwrap_or_else(|p| p.into_inner()) = Some(e);
                    let _ = stop.send(true);
                    break;
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if let Err(e) = writer.flush() {
                    log::error!("query log flush failed: {e}");
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    if let Err(e) = writer.flush() {
        log::error!("final query log flush failed: {e}");
    }
    writer.written()
}

/// Binds every listener, loads the feeds and starts serving.
pub async fn start(config: ServiceConfig) -> Result<ServiceHandle, ServeError> {
    if config.bindings.is_empty() {
        return Err(ServeError::NoBindings);
    }
    validate_bindings(&config.bindings)?;
    config.policy.validate().map_err(ServeError::Policy)?;
    let store = load_store(&config.feeds, config.taxonomy.clone())?;
    log::info!("loaded {} threat entries from {} feeds", store.len(), config.feeds.len());
    let writer = LogWriter::new(&config.log_dir)?;

    let mut sockets = Vec::new();
    for b in &config.bindings {
        let sock = UdpSocket::bind(b.listen)
            .await
            .map_err(|source| ServeError::Bind { org: b.org_id.clone(), addr: b.listen, source })?;
        let addr = sock.local_addr().map_err(|e| ServeError::Runtime(e.to_string()))?;
        log::info!("org {} ({}) listening on {addr}", b.org_id, b.group);
        sockets.push((b.clone(), Arc::new(sock), addr));
    }

    let (stop, stop_rx) = watch::channel(false);
    let fatal = Arc::new(std::sync::Mutex::new(None));
    let (log_tx, log_rx) = mpsc::channel::<QueryRecord>();
    let writer = {
        let fatal = Arc::clone(&fatal);
        let stop = stop.clone();
        std::thread::Builder::new()
            .name("query-log".into())
            .spawn(move || log_writer_thread(writer, log_rx, fatal, stop))
            .map_err(|e| ServeError::Runtime(e.to_string()))?
    };

    let shared: SharedStore = Arc::new(RwLock::new(Arc::new(store)));
    let policy = Arc::new(config.policy.clone());
    let mut counters = BTreeMap::new();
    let mut tasks = Vec::new();
    let mut addrs = Vec::new();
    for (binding, sock, addr) in sockets {
        let c = Arc::new(OrgCounters::default());
        counters.insert(binding.org_id.clone(), Arc::clone(&c));
        addrs.push((binding.org_id.clone(), addr));
        tasks.push(tokio::spawn(listen(
            Arc::new(binding),
            sock,
            Arc::clone(&policy),
            Arc::clone(&shared),
            c,
            log_tx.clone(),
            stop_rx.clone(),
        )));
    }
    drop(log_tx);
    {
        let counters = counters.clone();
        let mut stop_rx = stop_rx.clone();
        let period = config.heartbeat;
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
            loop {
                tokio::select! {
                    _ = tick.tick() => log::info!("{}", heartbeat_line(&counters)),
                    _ = stop_rx.changed() => break,
                }
            }
        }));
    }
    Ok(ServiceHandle {
        addrs,
        store: shared,
        feeds: config.feeds,
        taxonomy: config.taxonomy,
        counters,
        stop,
        fatal,
        tasks,
        writer: Some(writer),
    })
}

/// One listener: every datagram is handled on its own task, and a sequencer
/// forwards finished records to the log in arrival order.
async fn listen(
    binding: Arc<OrgBinding>,
    sock: Arc<UdpSocket>,
    policy: Arc<FirewallPolicy>,
    store: SharedStore,
    counters: Arc<OrgCounters>,
    log_tx: mpsc::Sender<QueryRecord>,
    mut stop: watch::Receiver<bool>,
) {
    let (seq_tx, mut seq_rx) = tokio::sync::mpsc::unbounded_channel::<JoinHandle<Option<QueryRecord>>>();
    let sequencer = tokio::spawn(async move {
        while let Some(h) = seq_rx.recv().await {
            match h.await {
                Ok(Some(record)) => {
                    if log_tx.send(record).is_err() {
                        log::error!("query log writer is gone; record dropped");
                    }
                }
                Ok(None) => {}
                Err(e) => log::error!("query task failed: {e}"),
            }
        }
    });
    let mut buf = vec![0u8; MAX_MESSAGE_LEN];
    loop {
        tokio::select! {
            biased;
            _ = stop.changed() => break,
            received = sock.recv_from(&mut buf) => {
                let (n, client) = match received {
                    Ok(r) => r,
                    Err(e) => {
                        // ICMP errors from earlier replies surface here on some platforms.
                        log::debug!("recv on {} failed: {e}", binding.org_id);
                        continue;
                    }
                };
                let raw = buf[..n].to_vec();
                let now = Utc::now();
                let (binding, policy, sock, counters) =
                    (Arc::clone(&binding), Arc::clone(&policy), Arc::clone(&sock), Arc::clone(&counters));
                let snapshot = current(&store);
                let task = tokio::spawn(async move {
                    let handled = handle_query(&binding, &policy, &snapshot, &raw, now).await;
                    if let Some(resp) = &handled.response {
                        if let Err(e) = sock.send_to(resp, client).await {
                            log::debug!("reply to client failed: {e}");
                        }
                    }
                    counters.record(&handled.outcome);
                    Some(handled.record)
                });
                if seq_tx.send(task).is_err() {
                    break;
                }
            }
        }
    }
    drop(seq_tx);
    let _ = sequencer.await;
}

impl ServiceHandle {
    pub fn local_addrs(&self) -> &[(String, SocketAddr)] {
        &self.addrs
    }

    pub fn addr_of(&self, org: &str) -> Option<SocketAddr> {
        self.addrs.iter().find(|(o, _)| o == org).map(|(_, a)| *a)
    }

    pub fn store(&self) -> Arc<IntelStore> {
        current(&self.store)
    }

    /// Atomically replaces the store; queries already in flight keep the old one.
    pub fn swap_store(&self, store: IntelStore) {
        *self.store.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(store);
    }

    /// Reloads the configured feeds. On failure the current store stays in place.
    pub fn reload(&self) -> Result<usize, IntelError> {
        let store = load_store(&self.feeds, self.taxonomy.clone())?;
        let n = store.len();
        self.swap_store(store);
        log::info!("reloaded feeds: {n} entries");
        Ok(n)
    }

    pub fn counters(&self) -> BTreeMap<String, CounterSnapshot> {
        self.counters.iter().map(|(o, c)| (o.clone(), c.snapshot())).collect()
    }

    pub fn heartbeat_line(&self) -> String {
        heartbeat_line(&self.counters)
    }

    /// Resolves once a fatal error has stopped the service, or shutdown was requested.
    pub async fn stopped(&self) {
        let mut rx = self.stop.subscribe();
        while !*rx.borrow_and_update() {
            if rx.changed().await.is_err() {
                break;
            }
        }
    }

    /// Stops listening, answers in-flight queries, flushes the log.
    pub async fn shutdown(mut self) -> Result<ServiceSummary, ServeError> {
        let _ = self.stop.send(true);
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
        let written = match self.writer.take() {
            Some(w) => tokio::task::spawn_blocking(move || w.join())
                .await
                .map_err(|e| ServeError::Runtime(e.to_string()))?
                .map_err(|_| ServeError::Runtime("query log thread panicked".into()))?,
            None => 0,
        };
        if let Some(e) = self.fatal.lock().unwrap_or_else(|p| p.into_inner()).take() {
            return Err(ServeError::Log(e));
        }
        Ok(ServiceSummary { records_written: written, per_org: self.counters() })
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
    }
}

/// Runs until SIGINT/SIGTERM (or a fatal log error). SIGHUP reloads the feeds.
pub async fn serve(config: ServiceConfig) -> Result<ServiceSummary, ServeError> {
    run(start(config).await?).await
}

/// Serves on a started handle until SIGINT/SIGTERM (or a fatal log error);
/// SIGHUP reloads the feeds.
pub async fn run(handle: ServiceHandle) -> Result<ServiceSummary, ServeError> {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).map_err(|e| ServeError::Runtime(e.to_string()))?;
        let mut hup = signal(SignalKind::hangup()).map_err(|e| ServeError::Runtime(e.to_string()))?;
        loop {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => break,
                _ = term.recv() => break,
                _ = hup.recv() => {
                    if let Err(e) = handle.reload() {
                        log::error!("feed reload failed, keeping previous store: {e}");
                    }
                }
                _ = handle.stopped() => break,
            }
        }
    }
    #[cfg(not(unix))]
    {
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = handle.stopped() => {}
        }
    }
    log::info!("shutting down");
    let summary = handle.shutdown().await?;
    log::info!("wrote {} query records", summary.records_written);
    Ok(summary)
}
