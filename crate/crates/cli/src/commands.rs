use std::cell::Cell;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use dnsward::analytics::{
    daily_aggregate_with, defined_points, detect_spikes, group_report, metric_series, top_domains, weekday_profile,
    DailyAggregate, DayClock, SpikeConfig, ALL_SCOPE,
};
use dnsward::config::load_config;
use dnsward::firewall::{self, ServiceConfig};
use dnsward::intervention::{
    estimate_effect, power_analysis, write_effect_csv, write_power_csv, ItsConfig, PowerSetup, METHOD,
};
use dnsward::org::{Group, OrgGroups};
use dnsward::query_log::{
    import_external_reader, log_date_span, read_all, read_range, ColumnMap, JsonlReader, LogError, LogReader,
    LogWriter, RecordFilter,
};
use dnsward::report::{build_report, emit_report, Formats, ReportOptions};
use dnsward::threat_intel::{load_store, write_feed, FeedSpec, IntelStore, Taxonomy};
use dnsward::traffic_synth::{self, ReplayOptions, Scenario};
use dnsward::{DomainName, QueryRecord};

use crate::{
    ClassifyArgs, Cli, Command, CompareArgs, FeedArgs, FeedCommand, GenerateArgs, IngestArgs, ItsArgs, ItsFlags,
    LogArgs, PowerArgs, ReplayArgs, ReportArgs, ScenarioArgs, SpikesArgs, SynthCommand, SynthFeedArgs, TopArgs,
    WeeklyArgs,
};

pub const DEFAULT_LOG_DIR: &str = "dnsward-logs";

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.code(), e.to_string())
            }
        }
    )*};
}

coded!(
    dnsward::query_log::LogError,
    dnsward::threat_intel::IntelError,
    dnsward::config::ConfigError,
    dnsward::firewall::ServeError,
    dnsward::traffic_synth::SynthError,
    dnsward::intervention::ItsError,
    dnsward::analytics::AnalyticsError,
    dnsward::report::ReportError,
    dnsward::dns_wire::WireError
);

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new("IO_ERROR", e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Ctx {
    config: Option<ServiceConfig>,
}

impl Ctx {
    fn log_dir(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.config.as_ref().map(|c| c.log_dir.clone()))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_LOG_DIR))
    }

    fn groups(&self) -> OrgGroups {
        match &self.config {
            Some(c) => c.groups(),
            None => traffic_synth::default_groups(),
        }
    }

    fn taxonomy(&self) -> Taxonomy {
        self.config.as_ref().map(|c| c.taxonomy.clone()).unwrap_or_default()
    }

    /// Feed flags win over the config's feed list.
    fn feed_specs(&self, args: &FeedArgs) -> Vec<FeedSpec> {
        let mut specs: Vec<FeedSpec> = args.feeds.iter().map(FeedSpec::new).collect();
        specs.extend(args.exact_feeds.iter().map(|p| FeedSpec { exact_only: true, ..FeedSpec::new(p) }));
        specs.extend(args.override_feeds.iter().map(|p| FeedSpec { is_override: true, ..FeedSpec::new(p) }));
        if specs.is_empty() {
            if let Some(c) = &self.config {
                specs = c.feeds.clone();
            }
        }
        specs
    }

    fn store(&self, args: &FeedArgs, required: bool) -> Result<IntelStore> {
        let specs = self.feed_specs(args);
        if specs.is_empty() {
            if required {
                return Err(CliError::new("NO_FEEDS", "no feeds given (use --feeds or --config)"));
            }
            log::warn!("no feeds given; every name classifies benign");
        }
        Ok(load_store(&specs, self.taxonomy())?)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let ctx = Ctx { config };
    match cli.command {
        Command::Serve => serve(&ctx),
        Command::Feed(FeedCommand::Stats(a)) => feed_stats(&ctx, &a),
        Command::Classify(a) => classify(&ctx, &a),
        Command::Ingest(a) => ingest(&ctx, &a),
        Command::Report(a) => report(&ctx, &a),
        Command::Top(a) => top(&ctx, &a),
        Command::Spikes(a) => spikes(&ctx, &a),
        Command::Weekly(a) => weekly(&ctx, &a),
        Command::Compare(a) => compare(&ctx, &a),
        Command::Its(a) => its(&ctx, &a),
        Command::Power(a) => power(&a),
        Command::Synth(SynthCommand::Generate(a)) => synth_generate(&a),
        Command::Synth(SynthCommand::Feed(a)) => synth_feed(&a),
        Command::Synth(SynthCommand::Scenario(a)) => {
            print!("{}", scenario_of(&a)?.to_toml());
            Ok(())
        }
        Command::Synth(SynthCommand::Replay(a)) => replay(&ctx, &a),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("RUNTIME", e.to_string()))
}

fn serve(ctx: &Ctx) -> Result<()> {
    let config = ctx
        .config
        .clone()
        .ok_or_else(|| CliError::new("CONFIG", "serve needs --config"))?;
    let rt = runtime()?;
    let summary = rt.block_on(async {
        let handle = firewall::start(config).await?;
        {
            let mut out = io::stdout().lock();
            for (org, addr) in handle.local_addrs() {
                writeln!(out, "listening {org} {addr}")?;
            }
            out.flush()?;
        }
        Ok::<_, CliError>(firewall::run(handle).await?)
    })?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn feed_stats(ctx: &Ctx, args: &FeedArgs) -> Result<()> {
    let stats = ctx.store(args, true)?.stats();
    let mut out = io::stdout().lock();
    writeln!(out, "entries\t{}", stats.entries)?;
    writeln!(out, "overrides\t{}", stats.overrides)?;
    for (status, n) in &stats.by_status {
        writeln!(out, "status\t{status}\t{n}")?;
    }
    for (tag, n) in &stats.by_tag {
        writeln!(out, "tag\t{tag}\t{n}")?;
    }
    Ok(())
}

fn classify(ctx: &Ctx, args: &ClassifyArgs) -> Result<()> {
    let store = ctx.store(&args.feeds, true)?;
    let name: DomainName = args.name.parse()?;
    let v = store.classify(&name);
    let tags = v.matched.map(|e| e.tags_joined()).filter(|t| !t.is_empty()).unwrap_or_else(|| "-".into());
    let mut line = format!("{} {} depth={}", v.class, tags, v.match_depth);
    if let Some(e) = v.matched {
        line.push_str(&format!(" matched={}", e.domain));
    }
    println!("{line}");
    Ok(())
}

fn ingest(ctx: &Ctx, args: &IngestArgs) -> Result<()> {
    let dir = ctx.log_dir(&args.log_dir);
    let mut writer = LogWriter::new(&dir)?;
    let mut rejected = 0u64;
    let mut append = |r: QueryRecord| -> Result<()> {
        match writer.append(&r) {
            Ok(()) => Ok(()),
            Err(LogError::InvalidRecord(why)) => {
                rejected += 1;
                log::debug!("rejected record: {why}");
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    };
    let (read, skipped) = if let Some(path) = &args.csv {
        let store = ctx.store(&args.feeds, false)?;
        let mapping = ColumnMap {
            timestamp: Some(args.ts_col.clone()),
            org: Some(args.org_col.clone()),
            qname: Some(args.qname_col.clone()),
            qtype: Some(args.qtype_col.clone()),
            class: args.class_col.clone(),
            action: args.action_col.clone(),
            rcode: args.rcode_col.clone(),
            has_headers: !args.no_headers,
        };
        let file = File::open(path).map_err(|e| CliError::new("IO_ERROR", format!("{}: {e}", path.display())))?;
        let mut rows = import_external_reader(BufReader::new(file), &mapping, &store)?;
        for r in rows.by_ref() {
            append(r)?;
        }
        (rows.imported(), rows.skipped())
    } else {
        let mut lines = JsonlReader::new(io::stdin().lock());
        let mut n = 0;
        for r in lines.by_ref() {
            n += 1;
            append(r)?;
        }
        (n, lines.skipped())
    };
    writer.flush()?;
    eprintln!(
        "ingested {} records into {} ({} unreadable lines skipped, {} invalid records rejected)",
        read - rejected,
        dir.display(),
        skipped,
        rejected
    );
    Ok(())
}

/// Re-openable record stream over the log directory.
struct LogSource {
    dir: PathBuf,
    from: Option<chrono::NaiveDate>,
    to: Option<chrono::NaiveDate>,
    filter: RecordFilter,
    clock: DayClock,
    skipped: Cell<u64>,
}

impl LogSource {
    fn new(ctx: &Ctx, args: &LogArgs, filter: RecordFilter) -> Result<Self> {
        let src = LogSource {
            dir: ctx.log_dir(&args.log_dir),
            from: args.from,
            to: args.to,
            filter,
            clock: DayClock { offset_minutes: args.utc_offset },
            skipped: Cell::new(0),
        };
        src.open()?;
        Ok(src)
    }

    fn open(&self) -> std::result::Result<LogReader, LogError> {
        if self.from.is_none() && self.to.is_none() {
            return read_all(&self.dir, self.filter.clone());
        }
        match log_date_span(&self.dir)? {
            Some((lo, hi)) => read_range(&self.dir, self.from.unwrap_or(lo), self.to.unwrap_or(hi), self.filter.clone()),
            None => read_all(&self.dir, self.filter.clone()),
        }
    }

    fn records(&self) -> impl Iterator<Item = QueryRecord> + '_ {
        // Opening succeeded in `new`; a directory vanishing mid-run reads as empty.
        let mut reader = self.open().ok();
        std::iter::from_fn(move || {
            let r = reader.as_mut()?;
            let next = r.next();
            if next.is_none() {
                self.skipped.set(r.skipped());
            }
            next
        })
    }

    fn aggregates(&self) -> Vec<DailyAggregate> {
        let aggs = daily_aggregate_with(self.records(), self.clock);
        self.warn_skipped();
        aggs
    }

    fn warn_skipped(&self) {
        if self.skipped.get() > 0 {
            log::warn!("{} malformed log lines skipped", self.skipped.get());
        }
    }
}

fn check_scope(scope: &str, aggs: &[DailyAggregate]) -> Result<()> {
    let known = scope == ALL_SCOPE
        || aggs.iter().any(|a| a.org_id == scope)
        || [Group::Control, Group::Treatment].iter().any(|g| g.as_str() == scope);
    if known {
        Ok(())
    } else {
        Err(CliError::new("UNKNOWN_SCOPE", format!("`{scope}` is neither ALL, a logged org, nor a group")))
    }
}

fn report(ctx: &Ctx, args: &ReportArgs) -> Result<()> {
    let src = LogSource::new(ctx, &args.log, RecordFilter::default())?;
    let groups = ctx.groups();
    let opts = ReportOptions {
        top_n: args.top,
        exclude: args.exclude.iter().cloned().collect(),
        tracked: (!args.track.is_empty()).then(|| args.track.iter().cloned().collect()),
        clock: src.clock,
        spike: SpikeConfig { ratio: args.ratio, ..SpikeConfig::default() },
        ..ReportOptions::default()
    };
    let rep = build_report(|| src.records(), &groups, &opts)?;
    src.warn_skipped();
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    let files = emit_report(&rep, &groups, &args.out, Formats { csv: true, svg: !args.no_svg })?;
    let mut out = io::stdout().lock();
    for f in files {
        writeln!(out, "{}", f.display())?;
    }
    Ok(())
}

fn top(ctx: &Ctx, args: &TopArgs) -> Result<()> {
    let filter = RecordFilter { org: args.org.clone(), class: args.class };
    let src = LogSource::new(ctx, &args.log, filter)?;
    let exclude: HashSet<String> = args.exclude.iter().cloned().collect();
    let ranked = top_domains(src.records(), args.n, &exclude)?;
    src.warn_skipped();
    let mut out = io::stdout().lock();
    writeln!(out, "rank\tqname\tcount")?;
    for (i, (q, c)) in ranked.iter().enumerate() {
        writeln!(out, "{}\t{q}\t{c}", i + 1)?;
    }
    Ok(())
}

fn spikes(ctx: &Ctx, args: &SpikesArgs) -> Result<()> {
    let src = LogSource::new(ctx, &args.log, RecordFilter::default())?;
    let groups = ctx.groups();
    let aggs = src.aggregates();
    check_scope(&args.scope, &aggs)?;
    let series = defined_points(&metric_series(&aggs, args.metric, &args.scope, &groups));
    let cfg = SpikeConfig { ratio: args.ratio, mode: args.mode, window: args.window, floor: args.floor };
    let found = detect_spikes(&series, &args.scope, args.metric, &cfg)?;
    let mut out = io::stdout().lock();
    writeln!(out, "date,scope,metric,value,baseline,ratio")?;
    for s in found {
        writeln!(out, "{},{},{},{},{},{}", s.date, s.scope, s.metric, s.value, s.baseline, s.ratio)?;
    }
    Ok(())
}

fn weekly(ctx: &Ctx, args: &WeeklyArgs) -> Result<()> {
    let src = LogSource::new(ctx, &args.log, RecordFilter::default())?;
    let groups = ctx.groups();
    let aggs = src.aggregates();
    let scopes: Vec<String> = if args.scope.is_empty() {
        std::iter::once(ALL_SCOPE.to_string())
            .chain(aggs.iter().map(|a| a.org_id.clone()).collect::<BTreeSet<_>>())
            .collect()
    } else {
        args.scope.clone()
    };
    let mut out = io::stdout().lock();
    writeln!(out, "scope\tmetric\tmon\ttue\twed\tthu\tfri\tsat\tsun\tworkweek_ratio")?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into());
    for scope in &scopes {
        check_scope(scope, &aggs)?;
        let series = defined_points(&metric_series(&aggs, args.metric, scope, &groups));
        let p = weekday_profile(&series, scope)?;
        let means: Vec<String> = p.means.iter().map(|m| fmt(*m)).collect();
        writeln!(out, "{scope}\t{}\t{}\t{}", args.metric, means.join("\t"), fmt(p.workweek_ratio))?;
    }
    Ok(())
}

fn compare(ctx: &Ctx, args: &CompareArgs) -> Result<()> {
    let src = LogSource::new(ctx, &args.log, RecordFilter::default())?;
    let rep = group_report(&src.aggregates(), &ctx.groups())?;
    let mut out = io::stdout().lock();
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into());
    if args.daily {
        writeln!(out, "date,group,total,benign,grey,malicious")?;
        for d in &rep.daily {
            writeln!(out, "{},{},{},{},{},{}", d.date, d.group, d.total, d.benign, d.grey, d.malicious)?;
        }
        return Ok(());
    }
    writeln!(
        out,
        "group\torgs\ttotal\tdefined_days\tmean_malicious_proportion\tmean_grey_proportion\tzero_malicious_days"
    )?;
    for s in &rep.summaries {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.group,
            s.orgs.join(","),
            s.total,
            s.defined_days,
            fmt(s.mean_malicious_proportion),
            fmt(s.mean_grey_proportion),
            s.zero_malicious_days
        )?;
    }
    Ok(())
}

fn its_config(f: &ItsFlags) -> ItsConfig {
    ItsConfig {
        metric: f.metric,
        pre_window: f.pre_window,
        post_window: f.post_window,
        use_control_covariate: !f.no_control,
        weekday_dummies: !f.no_weekday,
        n_permutations: f.permutations,
        alpha: f.alpha,
        rng_seed: f.seed,
    }
}

fn its(ctx: &Ctx, args: &ItsArgs) -> Result<()> {
    let cfg = its_config(&args.its);
    cfg.validate()?;
    let date = args
        .date
        .or_else(|| ctx.config.as_ref().and_then(|c| c.intervention_dates().get(&args.org).copied()))
        .ok_or_else(|| CliError::new("MISSING_DATE", format!("no --date and no intervention_date for `{}`", args.org)))?;
    let src = LogSource::new(ctx, &args.log, RecordFilter::default())?;
    let groups = ctx.groups();
    let aggs = src.aggregates();
    check_scope(&args.org, &aggs)?;
    check_scope(&args.control, &aggs)?;
    let points = |scope: &str| -> Vec<dnsward::analytics::ProportionPoint> {
        metric_series(&aggs, cfg.metric, scope, &groups)
            .into_iter()
            .map(|(date, value)| dnsward::analytics::ProportionPoint { date, scope: scope.to_string(), value })
            .collect()
    };
    let est = estimate_effect(&points(&args.org), &points(&args.control), date, &cfg)?;
    for w in &est.warnings {
        log::warn!("{w}");
    }
    let file = File::create(&args.out).map_err(|e| CliError::new("IO_ERROR", format!("{}: {e}", args.out.display())))?;
    write_effect_csv(BufWriter::new(file), &args.org, &cfg, std::slice::from_ref(&est))
        .map_err(|e| CliError::new("IO_ERROR", e.to_string()))?;
    let doc = serde_json::json!({
        "method": METHOD,
        "scope": args.org,
        "control": args.control,
        "metric": cfg.metric.as_str(),
        "estimate": est,
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("estimate serializes"));
    Ok(())
}

fn power(args: &PowerArgs) -> Result<()> {
    let cfg = its_config(&args.its);
    let profiles = traffic_synth::default_profiles();
    let treated = profiles
        .iter()
        .find(|p| p.org_id == args.org)
        .cloned()
        .ok_or_else(|| CliError::new("UNKNOWN_SCOPE", format!("no synthetic default profile `{}`", args.org)))?;
    let controls = profiles.into_iter().filter(|p| p.group == Group::Control && p.org_id != args.org).collect();
    let setup = PowerSetup {
        treated,
        controls,
        start: args.start,
        end: args.end,
        intervention_date: args.date,
        seed: args.traffic_seed,
    };
    let rep = power_analysis(&setup, &args.grid, args.trials, &cfg)?;
    let file = File::create(&args.out).map_err(|e| CliError::new("IO_ERROR", format!("{}: {e}", args.out.display())))?;
    write_power_csv(BufWriter::new(file), &rep).map_err(|e| CliError::new("IO_ERROR", e.to_string()))?;
    let mut out = io::stdout().lock();
    writeln!(out, "multiplier\ttrials\tdetection_rate\tmean_effect\ttrue_effect\trelative_bias\tfailed")?;
    for r in &rep.rows {
        writeln!(
            out,
            "{}\t{}\t{:.3}\t{:.6}\t{:.6}\t{}\t{}",
            r.multiplier,
            r.n_trials,
            r.detection_rate,
            r.mean_effect,
            r.true_effect,
            r.relative_bias.map(|b| format!("{b:.4}")).unwrap_or_else(|| "undefined".into()),
            r.failed_trials
        )?;
    }
    Ok(())
}

fn scenario_of(args: &ScenarioArgs) -> Result<Scenario> {
    match &args.scenario {
        Some(p) => Ok(Scenario::load(p)?),
        None => Ok(traffic_synth::default_scenario()),
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::new("IO_ERROR", format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::with_capacity(1 << 16, io::stdout().lock())),
    })
}

fn synth_generate(args: &GenerateArgs) -> Result<()> {
    let plan = traffic_synth::plan(&scenario_of(&args.scenario)?, args.seed)?;
    let mut out = output(&args.out)?;
    for r in plan.records() {
        out.write_all(r.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn synth_feed(args: &SynthFeedArgs) -> Result<()> {
    let entries = traffic_synth::synthetic_feed(&scenario_of(&args.scenario)?);
    let mut out = output(&args.out)?;
    write_feed(&mut out, &entries).map_err(|e| CliError::new("IO_ERROR", e.to_string()))?;
    out.flush()?;
    Ok(())
}

fn read_jsonl(input: &Option<PathBuf>) -> Result<(Vec<QueryRecord>, u64)> {
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(BufReader::new(
            File::open(p).map_err(|e| CliError::new("IO_ERROR", format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let mut lines = JsonlReader::new(reader);
    let records: Vec<QueryRecord> = lines.by_ref().collect();
    Ok((records, lines.skipped()))
}

fn replay(ctx: &Ctx, args: &ReplayArgs) -> Result<()> {
    let mut endpoints: HashMap<String, std::net::SocketAddr> = HashMap::new();
    if let Some(c) = &ctx.config {
        for b in &c.bindings {
            endpoints.insert(b.org_id.clone(), b.listen);
        }
    }
    endpoints.extend(args.target.iter().cloned());
    if endpoints.is_empty() {
        return Err(CliError::new("NO_ENDPOINT", "no endpoints (use --target ORG=ADDR or --config)"));
    }
    let (records, skipped) = read_jsonl(&args.input)?;
    if skipped > 0 {
        log::warn!("{skipped} malformed input lines skipped");
    }
    let opts = ReplayOptions {
        speedup: args.speedup,
        concurrency: args.concurrency,
        timeout: Duration::from_millis(args.timeout_ms),
    };
    let stats = runtime()?.block_on(traffic_synth::replay(records, &endpoints, &opts))?;
    println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    Ok(())
}
