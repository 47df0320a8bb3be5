//! `dnsward`: DNS firewall and hygiene analytics.
//!
//! Exit codes: 0 success, 1 runtime error (`CODE: message` on stderr),
//! 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use dnsward::analytics::{Metric, SpikeMode};
use dnsward::traffic_synth::Speedup;
use dnsward::Class;

#[derive(Debug, Parser)]
#[command(name = "dnsward", version, about = "Per-organisation DNS firewall and DNS hygiene analytics")]
pub struct Cli {
    /// Service config file (TOML); supplies feeds, log_dir and org groups.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Diagnostic verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the firewall until SIGINT/SIGTERM; SIGHUP reloads feeds.
    Serve,
    /// Inspect threat-intel feeds.
    #[command(subcommand)]
    Feed(FeedCommand),
    /// Classify one name against the feeds.
    Classify(ClassifyArgs),
    /// Append records to the log directory from JSONL on stdin or an external CSV.
    Ingest(IngestArgs),
    /// Write the figure bundle (CSVs, SVGs, rankings, summary.json).
    Report(ReportArgs),
    /// Most requested names.
    Top(TopArgs),
    /// Flag spike days in a daily metric.
    Spikes(SpikesArgs),
    /// Per-weekday means and the workweek ratio of a daily metric.
    Weekly(WeeklyArgs),
    /// Control vs treatment group comparison.
    Compare(CompareArgs),
    /// Interrupted-time-series effect estimate at an intervention date.
    Its(ItsArgs),
    /// Simulated detection power of the effect estimator.
    Power(PowerArgs),
    /// Synthetic traffic.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Subcommand)]
pub enum FeedCommand {
    /// Status and tag histogram of the merged store.
    Stats(FeedArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FeedArgs {
    /// Feed CSV (domain,status,tags,source,first_seen); repeatable.
    #[arg(long = "feeds", value_name = "PATH", num_args = 1..)]
    pub feeds: Vec<PathBuf>,
    /// Feed whose entries match only the exact name; repeatable.
    #[arg(long = "exact-feeds", value_name = "PATH", num_args = 1..)]
    pub exact_feeds: Vec<PathBuf>,
    /// Local allow-list overriding hostile matches at equal or lesser depth; repeatable.
    #[arg(long = "override-feeds", value_name = "PATH", num_args = 1..)]
    pub override_feeds: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Domain name to classify.
    pub name: String,
    #[command(flatten)]
    pub feeds: FeedArgs,
}

#[derive(Debug, Clone, Args)]
pub struct LogArgs {
    /// Query-log directory [default: config log_dir, else dnsward-logs].
    #[arg(long, value_name = "DIR")]
    pub log_dir: Option<PathBuf>,
    /// First day to read (default: earliest log file).
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub from: Option<NaiveDate>,
    /// Last day to read (default: latest log file).
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub to: Option<NaiveDate>,
    /// Day boundary offset from UTC in minutes.
    #[arg(long, value_name = "MINUTES", default_value_t = 0, allow_hyphen_values = true)]
    pub utc_offset: i32,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["stdin", "csv"]))]
pub struct IngestArgs {
    /// Read native JSONL records from stdin.
    #[arg(long)]
    pub stdin: bool,
    /// Import an external CSV log, classifying names against the feeds.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    /// Destination log directory [default: config log_dir, else dnsward-logs].
    #[arg(long, value_name = "DIR")]
    pub log_dir: Option<PathBuf>,
    /// Column holding the timestamp (name, or index with --no-headers).
    #[arg(long, default_value = "timestamp")]
    pub ts_col: String,
    #[arg(long, default_value = "org")]
    pub org_col: String,
    #[arg(long, default_value = "qname")]
    pub qname_col: String,
    /// Optional query-type column (mnemonic or number).
    #[arg(long, default_value = "qtype")]
    pub qtype_col: String,
    /// Optional class column; when absent names are classified against the feeds.
    #[arg(long)]
    pub class_col: Option<String>,
    #[arg(long)]
    pub action_col: Option<String>,
    #[arg(long)]
    pub rcode_col: Option<String>,
    /// The CSV has no header row; columns are zero-based indices.
    #[arg(long)]
    pub no_headers: bool,
    #[command(flatten)]
    pub feeds: FeedArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub log: LogArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "dnsward-report")]
    pub out: PathBuf,
    /// Size of the top-name rankings.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Name left out of the second ranking; repeatable.
    #[arg(long, value_name = "QNAME")]
    pub exclude: Vec<String>,
    /// Name tracked per org [default: the two most requested grey names]; repeatable.
    #[arg(long, value_name = "QNAME")]
    pub track: Vec<String>,
    /// Spike threshold ratio for the summary's spike list.
    #[arg(long, default_value_t = 2.0)]
    pub ratio: f64,
    /// Write CSVs only.
    #[arg(long)]
    pub no_svg: bool,
}

#[derive(Debug, Args)]
pub struct TopArgs {
    #[command(flatten)]
    pub log: LogArgs,
    #[arg(short, long, default_value_t = 10)]
    pub n: usize,
    /// Name to leave out of the ranking; repeatable.
    #[arg(long, value_name = "QNAME")]
    pub exclude: Vec<String>,
    /// Only this org.
    #[arg(long)]
    pub org: Option<String>,
    /// Only this class (benign, grey, malicious).
    #[arg(long)]
    pub class: Option<Class>,
}

#[derive(Debug, Args)]
pub struct SpikesArgs {
    #[command(flatten)]
    pub log: LogArgs,
    /// malicious_count, grey_count, malicious_proportion, grey_proportion or total_count.
    #[arg(long, default_value = "malicious_count")]
    pub metric: Metric,
    /// ALL, an org id, or a group name.
    #[arg(long, default_value = "ALL")]
    pub scope: String,
    /// Threshold ratio r >= 1.
    #[arg(long, default_value_t = 2.0)]
    pub ratio: f64,
    /// global-peak or rolling-median.
    #[arg(long, default_value = "global-peak")]
    pub mode: SpikeMode,
    /// Rolling-median window in days.
    #[arg(long, default_value_t = 7)]
    pub window: usize,
    /// With a zero rolling median, flag only values above this floor.
    #[arg(long, default_value_t = 10.0)]
    pub floor: f64,
}

#[derive(Debug, Args)]
pub struct WeeklyArgs {
    #[command(flatten)]
    pub log: LogArgs,
    #[arg(long, default_value = "grey_count")]
    pub metric: Metric,
    /// Scope; repeatable [default: ALL and every org].
    #[arg(long)]
    pub scope: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub log: LogArgs,
    /// Print the daily per-group counts as CSV instead of the summary.
    #[arg(long)]
    pub daily: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ItsFlags {
    /// grey_proportion or malicious_proportion.
    #[arg(long, default_value = "grey_proportion")]
    pub metric: Metric,
    /// Defined days fitted before the date.
    #[arg(long, default_value_t = 90)]
    pub pre_window: usize,
    /// Days after the date whose defined points form the effect.
    #[arg(long, default_value_t = 60)]
    pub post_window: usize,
    /// Drop the control-series regressor.
    #[arg(long)]
    pub no_control: bool,
    /// Drop the weekday dummies.
    #[arg(long)]
    pub no_weekday: bool,
    /// Placebo draws.
    #[arg(long, default_value_t = 1000)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Seed of the placebo sampler.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ItsArgs {
    #[command(flatten)]
    pub log: LogArgs,
    /// Treated scope: an org id or a group name.
    #[arg(long)]
    pub org: String,
    /// Intervention date [default: the org's intervention_date in the config].
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub date: Option<NaiveDate>,
    /// Control scope.
    #[arg(long, default_value = "control")]
    pub control: String,
    #[command(flatten)]
    pub its: ItsFlags,
    /// Effect CSV written alongside the printed estimate.
    #[arg(long, value_name = "PATH", default_value = "effect.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    /// Effect multipliers (1.0 = no effect), comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.75, 0.5, 0.25])]
    pub grid: Vec<f64>,
    /// Trials per multiplier (at least 20).
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Traffic seed; trial t uses seed + t.
    #[arg(long = "traffic-seed", default_value_t = 1)]
    pub traffic_seed: u64,
    /// Treated org from the synthetic defaults.
    #[arg(long, default_value = "green")]
    pub org: String,
    /// Synthetic series start.
    #[arg(long, value_name = "YYYY-MM-DD", default_value = "2016-01-01")]
    pub start: NaiveDate,
    #[arg(long, value_name = "YYYY-MM-DD", default_value = "2018-11-30")]
    pub end: NaiveDate,
    #[arg(long, value_name = "YYYY-MM-DD", default_value = "2018-10-01")]
    pub date: NaiveDate,
    #[command(flatten)]
    pub its: ItsFlags,
    #[arg(long, value_name = "PATH", default_value = "power.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["defaults", "scenario"]))]
pub struct ScenarioArgs {
    /// Use the built-in six-org scenario.
    #[arg(long)]
    pub defaults: bool,
    /// Scenario file (TOML).
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write synthetic records as JSONL, chronologically ordered.
    Generate(GenerateArgs),
    /// Write the feed CSV matching a scenario's grey and malicious pools.
    Feed(SynthFeedArgs),
    /// Print a scenario as TOML (a starting point for custom scenarios).
    Scenario(ScenarioArgs),
    /// Send records as live queries to the orgs' endpoints.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file [default: stdout].
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthFeedArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output file [default: stdout].
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// JSONL records [default: stdin].
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Endpoint for an org as ORG=IP:PORT; repeatable. Overrides the config's listen addresses.
    #[arg(long, value_name = "ORG=ADDR", value_parser = parse_target)]
    pub target: Vec<(String, std::net::SocketAddr)>,
    /// Pacing: record-time speedup factor, or `inf` for no pacing.
    #[arg(long, default_value = "inf")]
    pub speedup: Speedup,
    /// Queries in flight.
    #[arg(long, default_value_t = 64)]
    pub concurrency: usize,
    /// Per-query answer timeout.
    #[arg(long, default_value_t = 3000)]
    pub timeout_ms: u64,
}

fn parse_target(s: &str) -> Result<(String, std::net::SocketAddr), String> {
    let (org, addr) = s.split_once('=').ok_or_else(|| format!("expected ORG=IP:PORT, got `{s}`"))?;
    let addr = addr.parse().map_err(|e| format!("bad address `{addr}`: {e}"))?;
    Ok((org.to_string(), addr))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code, e.message);
            ExitCode::from(1)
        }
    }
}
