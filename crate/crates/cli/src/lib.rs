//! `datastage` command line.
//!
//! | exit | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 1    | run finished with unresolved tasks        |
//! | 2    | usage, config or manifest error           |
//! | 3    | quota refused                             |
//! | 4    | credential failure                        |
//! | 5    | storage or journal failure                |
//!
//! Every failure also prints one `ERROR <class>: <detail>` line on stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use datastage::engine::{HttpDataNode, JournalError, StatusJournal};
use datastage::manifest::{group_replicas, parse_manifest, Manifest};
use datastage::metrics::{probe, render_node_report, render_run_summary, ProbeMatrix};
use datastage::scheduler::{AbortReason, Outcome, PlanError, RunOptions};
use datastage::session::{self, journal_path, load_samples, samples_path, SessionError};
use datastage::simnode::{parse_fleet_config, start_fleet, FleetClock};
use datastage::{
    CredentialManager, LocalIssuer, OffsetClock, Recorder, Session, SharedClock, StageConfig,
    SystemClock,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Unresolved = 1,
    Usage = 2,
    Quota = 3,
    Credential = 4,
    Storage = 5,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// A failure with its exit class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub exit: Exit,
    pub class: &'static str,
    pub detail: String,
}

impl Failure {
    fn new(exit: Exit, class: &'static str, detail: impl ToString) -> Self {
        Self {
            exit,
            class,
            detail: detail.to_string(),
        }
    }

    /// Single line: newlines in the detail are folded.
    pub fn line(&self) -> String {
        format!("ERROR {}: {}", self.class, self.detail.replace('\n', " "))
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Conflict(e) => Failure::new(Exit::Usage, "conflict", e),
            SessionError::Plan(PlanError::QuotaExceeded { .. }) => Failure::new(Exit::Quota, "quota", e),
            SessionError::Plan(e) => Failure::new(Exit::Usage, "config", e),
            SessionError::Journal(e) => Failure::new(Exit::Storage, "journal", e),
            SessionError::Samples { .. } => Failure::new(Exit::Storage, "samples", e),
        }
    }
}

impl From<JournalError> for Failure {
    fn from(e: JournalError) -> Self {
        Failure::new(Exit::Storage, "journal", e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "datastage", version, about = "Checksum-verified, resumable bulk data staging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print file, directory and byte totals for one or more manifests.
    Estimate(EstimateArgs),
    /// Plan and execute a staging run; rerun to resume.
    #[command(visible_alias = "resume")]
    Run(RunArgs),
    /// Per-state counts from the journal.
    Status(StatusArgs),
    /// Per-node throughput report from recorded samples.
    Report(ReportArgs),
    /// Measure throughput to each node.
    Probe(ProbeArgs),
    /// Run a simulated fleet in the foreground.
    Simfleet(SimfleetArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file (`key = value`); `STAGE_<KEY>` variables override it.
    #[arg(short = 'c', long = "config")]
    pub config: Option<PathBuf>,
    /// Staging directory; overrides `staging_dir` from the config.
    #[arg(short = 's', long = "staging-dir")]
    pub staging_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(short = 'm', long = "manifest", required = true, num_args = 1..)]
    pub manifests: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(short = 'm', long = "manifest", required = true, num_args = 1..)]
    pub manifests: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct StatusArgs {
    /// Also count manifest entries with no journal record.
    #[arg(short = 'm', long = "manifest", num_args = 1..)]
    pub manifests: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// CSV instead of the text table.
    #[arg(long)]
    pub csv: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Comma-separated node base URLs.
    #[arg(long, value_delimiter = ',', required = true)]
    pub nodes: Vec<String>,
    #[arg(long, default_value_t = 10_000_000)]
    pub bytes: u64,
    /// Append the samples to this staging directory's samples file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SimfleetArgs {
    #[arg(short = 'c', long = "config")]
    pub config: PathBuf,
}

fn read(path: &Path, class: &'static str) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::new(Exit::Usage, class, format!("{}: {e}", path.display())))
}

fn load_config(common: &Common, env: &[(String, String)]) -> Result<StageConfig, Failure> {
    let text = match &common.config {
        Some(p) => read(p, "config")?,
        None => String::new(),
    };
    StageConfig::load(&text, env.iter().cloned()).map_err(|e| Failure::new(Exit::Usage, "config", e))
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<Manifest>, Failure> {
    paths
        .iter()
        .map(|p| {
            parse_manifest(&read(p, "manifest")?)
                .map_err(|e| Failure::new(Exit::Usage, "manifest", format!("{}: {e}", p.display())))
        })
        .collect()
}

fn staging_dir(common: &Common, config: &StageConfig) -> Result<PathBuf, Failure> {
    common
        .staging_dir
        .clone()
        .or_else(|| config.staging_dir.clone())
        .ok_or_else(|| Failure::new(Exit::Usage, "usage", "no staging directory: pass --staging-dir or set staging_dir"))
}

fn session(config: StageConfig, dir: PathBuf) -> Result<Session, Failure> {
    let clock: SharedClock = Arc::new(SystemClock);
    let issuer = Arc::new(LocalIssuer::new(clock.clone()));
    let creds = Arc::new(CredentialManager::new(issuer, config.credential, clock));
    Ok(Session::open(config, dir, Arc::new(HttpDataNode::new()), creds)?)
}

fn stop_on_ctrl_c(opts: &RunOptions) {
    let stop = opts.stop.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            stop.store(true, Ordering::SeqCst);
        }
    });
}

/// Output sinks; stdout and stderr in the binary.
pub struct Io<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

pub async fn dispatch(cli: Cli, env: &[(String, String)], io: &mut Io<'_>) -> Exit {
    let res = match cli.command {
        Command::Estimate(a) => estimate(a, env, io).await,
        Command::Run(a) => run(a, env, io).await,
        Command::Status(a) => status(a, env, io),
        Command::Report(a) => report(a, env, io),
        Command::Probe(a) => probe_cmd(a, env, io).await,
        Command::Simfleet(a) => simfleet(a, io).await,
    };
    match res {
        Ok(exit) => exit,
        Err(f) => {
            let _ = writeln!(io.err, "{}", f.line());
            f.exit
        }
    }
}

/// Parses argv and dispatches. Usage errors exit 2 with clap's message.
pub async fn main_with(argv: Vec<String>, env: &[(String, String)], io: &mut Io<'_>) -> Exit {
    match Cli::try_parse_from(argv) {
        Ok(cli) => dispatch(cli, env, io).await,
        Err(e) if !e.use_stderr() => {
            let _ = write!(io.out, "{e}");
            Exit::Success
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(io.err, "ERROR usage: {first}");
            Exit::Usage
        }
    }
}

async fn estimate(a: EstimateArgs, env: &[(String, String)], io: &mut Io<'_>) -> Result<Exit, Failure> {
    let config = load_config(&a.common, env)?;
    let manifests = load_manifests(&a.manifests)?;
    let dir = a
        .common
        .staging_dir
        .clone()
        .or_else(|| config.staging_dir.clone())
        .unwrap_or_else(std::env::temp_dir);
    let s = session(config, dir)?;
    let (_, est) = s.estimate(&manifests).await?;
    let _ = write!(io.out, "{}", est.summary.render());
    for w in &est.warnings {
        let _ = writeln!(io.out, "warning: size probe failed for {} at {}: {}", w.relative_path, w.url, w.error);
    }
    Ok(Exit::Success)
}

async fn run(a: RunArgs, env: &[(String, String)], io: &mut Io<'_>) -> Result<Exit, Failure> {
    let config = load_config(&a.common, env)?;
    let manifests = load_manifests(&a.manifests)?;
    let dir = staging_dir(&a.common, &config)?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::new(Exit::Storage, "storage", format!("{}: {e}", dir.display())))?;
    let s = session(config, dir)?;
    let (plan, est) = s.plan(&manifests).await?;
    let _ = writeln!(io.out, "plan {}: {} tasks on {} nodes", plan.run_id, plan.tasks.len(), plan.queues.len());
    let _ = write!(io.out, "{}", est.summary.render());
    for w in &plan.warnings {
        let _ = writeln!(io.out, "warning: {w}");
    }
    let opts = RunOptions::default();
    stop_on_ctrl_c(&opts);
    let report = s.execute(plan, opts).await?;
    let _ = write!(io.out, "{}", report.render());
    let _ = write!(io.out, "{}", render_run_summary(&report.run_summary()));
    let _ = io.out.flush();

    if let Some(abort) = &report.abort {
        return Err(match abort {
            AbortReason::StorageFull(_) => Failure::new(Exit::Storage, "storage", abort),
            AbortReason::Journal(_) => Failure::new(Exit::Storage, "journal", abort),
            AbortReason::RefreshFailed(_) => Failure::new(Exit::Credential, "credential", abort),
        });
    }
    let cred_failed = report.count(Outcome::CredentialFailed);
    if cred_failed > 0 {
        return Err(Failure::new(
            Exit::Credential,
            "credential",
            format!("{cred_failed} tasks rejected by data nodes after refresh"),
        ));
    }
    if report.stopped {
        return Err(Failure::new(
            Exit::Unresolved,
            "interrupted",
            format!("{} tasks not attempted; rerun to resume", report.count(Outcome::NotAttempted)),
        ));
    }
    let unresolved = report.unresolved();
    if unresolved > 0 {
        return Err(Failure::new(Exit::Unresolved, "unresolved", format!("{unresolved} tasks unresolved")));
    }
    Ok(Exit::Success)
}

fn status(a: StatusArgs, env: &[(String, String)], io: &mut Io<'_>) -> Result<Exit, Failure> {
    let config = load_config(&a.common, env)?;
    let dir = staging_dir(&a.common, &config)?;
    let path = journal_path(&dir);
    // No journal yet means nothing has finished.
    let journal = if path.exists() {
        Some(StatusJournal::load(&path)?)
    } else {
        None
    };
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    if a.manifests.is_empty() {
        for (state, n) in journal.iter().flat_map(|j| j.state_counts()) {
            counts.insert(state.as_str(), n);
        }
    } else {
        let manifests = load_manifests(&a.manifests)?;
        let sets = group_replicas(&manifests).map_err(|e| Failure::new(Exit::Usage, "conflict", e))?;
        for set in &sets {
            let key = match journal.as_ref().and_then(|j| j.get(&set.relative_path)) {
                None => "pending",
                Some(r) if r.checksum_hex != set.checksum_hex || r.checksum_type != set.checksum_type => "stale",
                Some(r) => r.state.as_str(),
            };
            *counts.entry(key).or_default() += 1;
        }
    }
    for (k, n) in &counts {
        let _ = writeln!(io.out, "{k:<20} {n}");
    }
    let _ = writeln!(io.out, "{:<20} {}", "total", counts.values().sum::<usize>());
    Ok(Exit::Success)
}

fn report(a: ReportArgs, env: &[(String, String)], io: &mut Io<'_>) -> Result<Exit, Failure> {
    let config = load_config(&a.common, env)?;
    let dir = staging_dir(&a.common, &config)?;
    let rec = load_samples(&samples_path(&dir), config.scheduler.ewma_alpha)?;
    let r = render_node_report(&rec.aggregates());
    let _ = write!(io.out, "{}", if a.csv { r.csv } else { r.text });
    Ok(Exit::Success)
}

async fn probe_cmd(a: ProbeArgs, env: &[(String, String)], io: &mut Io<'_>) -> Result<Exit, Failure> {
    let config = load_config(&a.common, env)?;
    let clock: SharedClock = Arc::new(SystemClock);
    let creds = CredentialManager::new(
        Arc::new(LocalIssuer::new(clock.clone())),
        config.credential,
        clock.clone(),
    );
    let cred = creds
        .ensure_fresh()
        .map_err(|e| Failure::new(Exit::Credential, "credential", e))?;
    let rec = Recorder::new(config.scheduler.ewma_alpha);
    let conn = Arc::new(HttpDataNode::new());
    let m: ProbeMatrix = probe(conn, &a.nodes, a.bytes, &cred, &rec, &clock)
        .await
        .map_err(|e| Failure::new(Exit::Usage, "usage", e))?;
    let _ = write!(io.out, "{}", m.to_csv());
    if let Some(dir) = &a.record {
        session::append_samples(&samples_path(dir), &rec.samples())?;
    }
    if m.failures.is_empty() {
        Ok(Exit::Success)
    } else {
        Err(Failure::new(Exit::Unresolved, "probe", format!("{} of {} nodes failed", m.failures.len(), a.nodes.len())))
    }
}

async fn simfleet(a: SimfleetArgs, io: &mut Io<'_>) -> Result<Exit, Failure> {
    let cfg = parse_fleet_config(&read(&a.config, "config")?)
        .map_err(|e| Failure::new(Exit::Usage, "config", e))?;
    let clock: SharedClock = match cfg.clock {
        FleetClock::System => Arc::new(SystemClock),
        FleetClock::Offset => Arc::new(OffsetClock::new()),
    };
    let fleet = start_fleet(cfg.nodes, clock)
        .await
        .map_err(|e| Failure::new(Exit::Usage, "bind", e))?;
    if let Some(dir) = &cfg.manifest_dir {
        let io_err = |e: std::io::Error| Failure::new(Exit::Storage, "storage", format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io_err)?;
        for n in fleet.nodes() {
            let text = n.publish_manifest(n.name(), &[], true).expect("whole catalog");
            std::fs::write(dir.join(format!("{}.manifest", n.name())), text).map_err(io_err)?;
        }
    }
    for n in fleet.nodes() {
        let _ = writeln!(io.out, "node {} {}", n.name(), n.base_url());
    }
    let _ = writeln!(io.out, "ready");
    let _ = io.out.flush();
    let _ = tokio::signal::ctrl_c().await;
    fleet.shutdown();
    Ok(Exit::Success)
}
