//! The run coordinator. It alone owns plan state; workers each drive one
//! [`FileTask`] through [`Engine::run_task`] and hand it back.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use tokio::task::JoinSet;

use super::{Remap, TransferPlan};
use crate::credential::CredentialManager;
use crate::engine::{Engine, FileTask, StatusJournal, TaskEnd, TransferError, TransferState};
use crate::manifest::{summarize_paths, Location, NodeId};
use crate::metrics::{Recorder, RunSummary, ThroughputSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Outcome {
    Done,
    /// Recorded Done with a matching checksum by an earlier run.
    AlreadyDone,
    PersistentChecksumMismatch,
    TransportFailed,
    CredentialFailed,
    RelocationNeeded,
    /// Left over when the run was stopped or aborted.
    NotAttempted,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Done => "done",
            Outcome::AlreadyDone => "already_done",
            Outcome::PersistentChecksumMismatch => "persistent_checksum_mismatch",
            Outcome::TransportFailed => "transport_failed",
            Outcome::CredentialFailed => "credential_failed",
            Outcome::RelocationNeeded => "relocation_needed",
            Outcome::NotAttempted => "not_attempted",
        }
    }

    pub fn is_success(self) -> bool {
        matches!(self, Outcome::Done | Outcome::AlreadyDone)
    }
}

#[derive(Debug, Clone)]
pub enum RunEvent {
    Dispatched {
        task: usize,
        relative_path: String,
        node: NodeId,
    },
    Finished {
        task: usize,
        relative_path: String,
        node: NodeId,
        state: TransferState,
    },
    CredentialRejected {
        relative_path: String,
        at: DateTime<Utc>,
    },
    NodeGone {
        node: NodeId,
        relocated_to: Option<String>,
    },
}

pub type RunHook = Arc<dyn Fn(&RunEvent) + Send + Sync>;

#[derive(Clone, Default)]
pub struct RunOptions {
    /// Set to stop dispatching; in-flight tasks finish and are journaled.
    pub stop: Arc<AtomicBool>,
    pub hook: Option<RunHook>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbortReason {
    StorageFull(String),
    Journal(String),
    RefreshFailed(String),
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AbortReason::StorageFull(d) => write!(f, "storage full: {d}"),
            AbortReason::Journal(d) => write!(f, "journal write failed: {d}"),
            AbortReason::RefreshFailed(d) => write!(f, "credential refresh failed: {d}"),
        }
    }
}

/// A location that served bytes disagreeing with the manifest checksum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadSource {
    pub relative_path: String,
    pub url: String,
    pub node: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemapReason {
    NodeGone,
    ChecksumMismatch,
    TransportFailed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapRecord {
    pub relative_path: String,
    pub from: NodeId,
    pub to: Location,
    pub reason: RemapReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeRunStats {
    pub files: u64,
    pub bytes: u64,
    /// Sum of per-file transfer times: the sequential-equivalent time.
    pub transfer_sum: Duration,
    /// First dispatch to last completion on this node.
    pub wall: Duration,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_id: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub wall: Duration,
    /// Plan order.
    pub outcomes: Vec<(String, Outcome)>,
    pub bytes_transferred: u64,
    pub downloads: u64,
    pub faults: u64,
    pub bad_sources: Vec<BadSource>,
    pub alerts: Vec<String>,
    pub remaps: Vec<RemapRecord>,
    pub nodes_gone: Vec<NodeId>,
    pub credential_rejections: Vec<DateTime<Utc>>,
    pub abort: Option<AbortReason>,
    pub stopped: bool,
    pub per_node: BTreeMap<NodeId, NodeRunStats>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn counts(&self) -> BTreeMap<Outcome, usize> {
        let mut m = BTreeMap::new();
        for (_, o) in &self.outcomes {
            *m.entry(*o).or_insert(0) += 1;
        }
        m
    }

    pub fn count(&self, o: Outcome) -> usize {
        self.outcomes.iter().filter(|(_, x)| *x == o).count()
    }

    pub fn unresolved(&self) -> usize {
        self.outcomes.iter().filter(|(_, o)| !o.is_success()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.abort.is_none() && self.unresolved() == 0
    }

    pub fn outcome_of(&self, relative_path: &str) -> Option<Outcome> {
        self.outcomes
            .iter()
            .find(|(p, _)| p == relative_path)
            .map(|(_, o)| *o)
    }

    /// Files and directories count what this run transferred.
    pub fn run_summary(&self) -> RunSummary {
        let done = summarize_paths(
            self.outcomes
                .iter()
                .filter(|(_, o)| *o == Outcome::Done)
                .map(|(p, _)| (p.as_str(), None)),
        );
        RunSummary::new(
            self.run_id.clone(),
            self.started_at,
            self.finished_at.max(self.started_at),
            done.file_count,
            done.dir_count,
            self.bytes_transferred,
            self.faults,
        )
        .expect("finish is clamped to start")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run {}", self.run_id);
        for (o, n) in self.counts() {
            let _ = writeln!(out, "  {:<30} {n}", o.as_str());
        }
        let _ = writeln!(out, "{} bytes transferred", self.bytes_transferred);
        let _ = writeln!(
            out,
            "{} downloads, {} faults, wall time {:.3} s",
            self.downloads,
            self.faults,
            self.wall.as_secs_f64()
        );
        for (node, s) in &self.per_node {
            let _ = writeln!(
                out,
                "  node {node}: {} files, {} bytes, transfer time {:.3} s, wall {:.3} s",
                s.files,
                s.bytes,
                s.transfer_sum.as_secs_f64(),
                s.wall.as_secs_f64()
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        for b in &self.bad_sources {
            let _ = writeln!(out, "bad source: {} served wrong data for {}", b.url, b.relative_path);
        }
        for r in &self.remaps {
            let _ = writeln!(
                out,
                "remapped {} from {} to {} ({:?})",
                r.relative_path, r.from, r.to.url, r.reason
            );
        }
        for n in &self.nodes_gone {
            let _ = writeln!(out, "node gone: {n}");
        }
        for (p, o) in &self.outcomes {
            if !o.is_success() && *o != Outcome::NotAttempted {
                let _ = writeln!(out, "unresolved: {p} ({})", o.as_str());
            }
        }
        for a in &self.alerts {
            let _ = writeln!(out, "ALERT {a}");
        }
        if !self.credential_rejections.is_empty() {
            let _ = writeln!(
                out,
                "credential rejections: {}",
                self.credential_rejections.len()
            );
        }
        if self.stopped {
            let _ = writeln!(out, "stopped before completion; rerun to resume");
        }
        if let Some(a) = &self.abort {
            let _ = writeln!(out, "aborted: {a}; rerun to resume");
        }
        out
    }
}

#[derive(Default)]
struct NodeClock {
    first: Option<Instant>,
    last: Option<Instant>,
}

struct Coordinator {
    plan: TransferPlan,
    engine: Arc<Engine>,
    creds: Arc<CredentialManager>,
    journal: Arc<StatusJournal>,
    metrics: Arc<Recorder>,
    hook: Option<RunHook>,

    outcome: Vec<Option<Outcome>>,
    current: Vec<Option<FileTask>>,
    tried: Vec<BTreeSet<String>>,
    bad: Vec<Vec<Location>>,
    cred_failures: Vec<u32>,
    attempts_before: Vec<u32>,
    inflight: BTreeMap<NodeId, usize>,
    inflight_total: usize,
    cursor: Option<NodeId>,
    node_clock: BTreeMap<NodeId, NodeClock>,
    report: RunReport,
}

impl Coordinator {
    fn emit(&self, e: RunEvent) {
        if let Some(h) = &self.hook {
            h(&e);
        }
    }

    fn settle(&mut self, idx: usize, o: Outcome) {
        self.outcome[idx] = Some(o);
        self.current[idx] = None;
    }

    /// Round robin over nodes with queued work and a free per-node slot.
    fn next_dispatch(&mut self) -> Option<usize> {
        if self.inflight_total >= self.plan.config.global_limit {
            return None;
        }
        let p = self.plan.config.per_node_limit;
        let ready: Vec<NodeId> = self
            .plan
            .queues
            .iter()
            .filter(|(n, q)| {
                !q.is_empty()
                    && !self.plan.unavailable.contains(*n)
                    && self.inflight.get(*n).copied().unwrap_or(0) < p
            })
            .map(|(n, _)| n.clone())
            .collect();
        let node = match &self.cursor {
            Some(c) => ready.iter().find(|n| *n > c).or(ready.first()),
            None => ready.first(),
        }?
        .clone();
        let idx = self.plan.queues.get_mut(&node)?.pop_front()?;
        self.cursor = Some(node);
        Some(idx)
    }

    fn spawn(&mut self, idx: usize, set: &mut JoinSet<(usize, FileTask, TaskEnd)>) {
        let entry = self.plan.tasks[idx]
            .entry()
            .expect("queued task has a location");
        let node = entry.node_id();
        let mut task = match self.current[idx].take() {
            Some(t) if t.entry.url == entry.url && t.state.can_start() => t,
            _ => FileTask::new(entry),
        };
        self.attempts_before[idx] = task.transport_attempts + task.checksum_attempts;
        *self.inflight.entry(node.clone()).or_insert(0) += 1;
        self.inflight_total += 1;
        self.node_clock
            .entry(node.clone())
            .or_default()
            .first
            .get_or_insert_with(Instant::now);
        self.report.downloads += 1;
        self.emit(RunEvent::Dispatched {
            task: idx,
            relative_path: task.entry.relative_path.clone(),
            node,
        });
        let engine = self.engine.clone();
        let creds = self.creds.clone();
        set.spawn(async move {
            let end = engine.run_task(&mut task, &creds).await;
            (idx, task, end)
        });
    }

    fn requeue(&mut self, idx: usize, node: &NodeId) {
        self.plan
            .queues
            .entry(node.clone())
            .or_default()
            .push_front(idx);
    }

    /// Moves a task whose current location failed for good to another
    /// location, or reports that there is none.
    fn try_alternate(&mut self, idx: usize, from: &NodeId, reason: RemapReason) -> bool {
        let profiles = self.plan.profiles(&self.metrics);
        let exclude = self.tried[idx].clone();
        match self.plan.remap(idx, &exclude, &profiles) {
            Remap::Replica(to) | Remap::Relocated(to) => {
                self.report.remaps.push(RemapRecord {
                    relative_path: self.plan.tasks[idx].replicas.relative_path.clone(),
                    from: from.clone(),
                    to: to.clone(),
                    reason,
                });
                self.current[idx] = None;
                self.requeue(idx, &to.node);
                true
            }
            Remap::RelocationNeeded => false,
        }
    }

    fn finish(&mut self, idx: usize, task: FileTask, end: TaskEnd) -> Option<AbortReason> {
        let node = task.entry.node_id();
        let path = task.entry.relative_path.clone();
        let url = task.entry.url.clone();
        *self.inflight.get_mut(&node).expect("inflight node") -= 1;
        self.inflight_total -= 1;
        self.node_clock.entry(node.clone()).or_default().last = Some(Instant::now());

        let attempts = task.transport_attempts + task.checksum_attempts;
        let delta = attempts.saturating_sub(self.attempts_before[idx]) as u64;
        self.report.faults += match end {
            TaskEnd::Error(_) if delta == 0 => 1,
            _ => delta,
        };
        self.emit(RunEvent::Finished {
            task: idx,
            relative_path: path.clone(),
            node: node.clone(),
            state: task.state,
        });
        let now = self.creds.clock().now();

        match end {
            TaskEnd::Settled => match task.state {
                TransferState::Done => {
                    if let Err(e) = self.journal.record(&task, now) {
                        return Some(AbortReason::Journal(e.to_string()));
                    }
                    if !task.transfer_seconds.is_zero() {
                        let _ = self.metrics.record(ThroughputSample {
                            node_id: node.clone(),
                            bytes: task.bytes_transferred,
                            transfer: task.transfer_seconds,
                            recorded_at: now,
                        });
                    }
                    self.report.bytes_transferred += task.bytes_transferred;
                    let s = self.report.per_node.entry(node).or_default();
                    s.files += 1;
                    s.bytes += task.bytes_transferred;
                    s.transfer_sum += task.transfer_seconds;
                    for b in std::mem::take(&mut self.bad[idx]) {
                        self.report.bad_sources.push(BadSource {
                            relative_path: path.clone(),
                            url: b.url,
                            node: b.node,
                        });
                    }
                    self.settle(idx, Outcome::Done);
                }
                TransferState::PersistentChecksumMismatch => {
                    self.tried[idx].insert(url.clone());
                    self.bad[idx].push(Location {
                        url: url.clone(),
                        node: node.clone(),
                    });
                    if self.try_alternate(idx, &node, RemapReason::ChecksumMismatch) {
                        return None;
                    }
                    if let Err(e) = self.journal.record(&task, now) {
                        return Some(AbortReason::Journal(e.to_string()));
                    }
                    let sources: Vec<&str> =
                        self.bad[idx].iter().map(|l| l.url.as_str()).collect();
                    self.report.alerts.push(format!(
                        "persistent checksum mismatch for {path}: every source disagrees with the published checksum {} ({}); the published checksum may be wrong",
                        task.entry.checksum_hex,
                        sources.join(", ")
                    ));
                    self.settle(idx, Outcome::PersistentChecksumMismatch);
                }
                TransferState::FailedTransport => {
                    self.tried[idx].insert(url);
                    if !self.try_alternate(idx, &node, RemapReason::TransportFailed) {
                        self.settle(idx, Outcome::TransportFailed);
                    }
                }
                other => unreachable!("settled task in state {other:?}"),
            },
            TaskEnd::Error(TransferError::NotFound) => {
                self.tried[idx].insert(url);
                if !self.try_alternate(idx, &node, RemapReason::TransportFailed) {
                    self.settle(idx, Outcome::TransportFailed);
                }
            }
            TaskEnd::Error(TransferError::CredentialExpired) => {
                self.report.credential_rejections.push(now);
                self.emit(RunEvent::CredentialRejected {
                    relative_path: path,
                    at: now,
                });
                self.cred_failures[idx] += 1;
                if self.cred_failures[idx] > self.engine.policy().max_transport_retries {
                    self.settle(idx, Outcome::CredentialFailed);
                    return None;
                }
                if let Err(e) = self.creds.force_refresh() {
                    self.current[idx] = Some(task);
                    self.requeue(idx, &node);
                    return Some(AbortReason::RefreshFailed(e.0));
                }
                self.current[idx] = Some(task);
                self.requeue(idx, &node);
            }
            TaskEnd::Error(TransferError::NodeGone { relocated_to }) => {
                if !self.plan.unavailable.contains(&node) {
                    self.report.nodes_gone.push(node.clone());
                    self.emit(RunEvent::NodeGone {
                        node: node.clone(),
                        relocated_to: relocated_to.clone(),
                    });
                    let profiles = self.plan.profiles(&self.metrics);
                    let moved =
                        self.plan
                            .handle_node_gone(&node, relocated_to.as_deref(), &profiles);
                    for (other, r) in moved {
                        let rel = self.plan.tasks[other].replicas.relative_path.clone();
                        match r {
                            Remap::Replica(to) | Remap::Relocated(to) => {
                                self.current[other] = None;
                                self.report.remaps.push(RemapRecord {
                                    relative_path: rel,
                                    from: node.clone(),
                                    to,
                                    reason: RemapReason::NodeGone,
                                });
                            }
                            Remap::RelocationNeeded => {
                                self.settle(other, Outcome::RelocationNeeded)
                            }
                        }
                    }
                } else if let Some(hint) = relocated_to {
                    self.plan.relocations.entry(node.clone()).or_insert(hint);
                }
                self.tried[idx].insert(url);
                if !self.try_alternate(idx, &node, RemapReason::NodeGone) {
                    self.settle(idx, Outcome::RelocationNeeded);
                }
            }
            TaskEnd::Error(TransferError::StorageFull { path, source }) => {
                self.current[idx] = Some(task);
                return Some(AbortReason::StorageFull(format!(
                    "{}: {source}",
                    path.display()
                )));
            }
        }
        None
    }
}

/// Executes `plan` with at most `global_limit` transfers in flight and at
/// most `per_node_limit` per node. Credentials are checked before every
/// dispatch wave. Files already journaled Done are skipped.
pub async fn run(
    plan: TransferPlan,
    engine: Arc<Engine>,
    creds: Arc<CredentialManager>,
    journal: Arc<StatusJournal>,
    metrics: Arc<Recorder>,
    opts: RunOptions,
) -> RunReport {
    let n = plan.tasks.len();
    let clock = creds.clock().clone();
    let started_at = clock.now();
    let wall0 = Instant::now();
    let report = RunReport {
        run_id: plan.run_id.clone(),
        started_at,
        finished_at: started_at,
        wall: Duration::ZERO,
        outcomes: Vec::new(),
        bytes_transferred: 0,
        downloads: 0,
        faults: 0,
        bad_sources: Vec::new(),
        alerts: Vec::new(),
        remaps: Vec::new(),
        nodes_gone: Vec::new(),
        credential_rejections: Vec::new(),
        abort: None,
        stopped: false,
        per_node: BTreeMap::new(),
        warnings: plan.warnings.clone(),
    };
    let mut c = Coordinator {
        plan,
        engine,
        creds,
        journal,
        metrics,
        hook: opts.hook.clone(),
        outcome: vec![None; n],
        current: vec![None; n],
        tried: vec![BTreeSet::new(); n],
        bad: vec![Vec::new(); n],
        cred_failures: vec![0; n],
        attempts_before: vec![0; n],
        inflight: BTreeMap::new(),
        inflight_total: 0,
        cursor: None,
        node_clock: BTreeMap::new(),
        report,
    };

    for idx in 0..n {
        let t = &c.plan.tasks[idx];
        let done = t
            .replicas
            .locations
            .first()
            .is_some_and(|l| c.journal.is_done(&t.replicas.entry_for(l)));
        if done {
            c.outcome[idx] = Some(Outcome::AlreadyDone);
        } else if t.chosen.is_none() {
            c.outcome[idx] = Some(Outcome::RelocationNeeded);
        }
    }
    let settled: BTreeSet<usize> = (0..n).filter(|i| c.outcome[*i].is_some()).collect();
    for q in c.plan.queues.values_mut() {
        q.retain(|i| !settled.contains(i));
    }

    let mut set: JoinSet<(usize, FileTask, TaskEnd)> = JoinSet::new();
    let mut abort: Option<AbortReason> = None;
    loop {
        let stopping = opts.stop.load(Ordering::SeqCst);
        if abort.is_none() && !stopping {
            match c.creds.ensure_fresh() {
                Ok(_) => {
                    while let Some(idx) = c.next_dispatch() {
                        c.spawn(idx, &mut set);
                    }
                }
                Err(e) => abort = Some(AbortReason::RefreshFailed(e.0)),
            }
        }
        let Some(joined) = set.join_next().await else {
            break;
        };
        let (idx, task, end) = match joined {
            Ok(r) => r,
            Err(e) if e.is_cancelled() => continue,
            Err(e) => std::panic::resume_unwind(e.into_panic()),
        };
        if let Some(reason) = c.finish(idx, task, end) {
            if abort.is_none() {
                if matches!(reason, AbortReason::StorageFull(_) | AbortReason::Journal(_)) {
                    set.abort_all();
                }
                abort = Some(reason);
            }
        }
    }

    c.report.stopped = opts.stop.load(Ordering::SeqCst) && abort.is_none();
    c.report.abort = abort;
    for (node, clk) in &c.node_clock {
        if let (Some(first), Some(last)) = (clk.first, clk.last) {
            c.report.per_node.entry(node.clone()).or_default().wall = last - first;
        }
    }
    c.report.outcomes = c
        .plan
        .tasks
        .iter()
        .zip(&c.outcome)
        .map(|(t, o)| {
            (
                t.replicas.relative_path.clone(),
                o.unwrap_or(Outcome::NotAttempted),
            )
        })
        .collect();
    c.report.wall = wall0.elapsed();
    c.report.finished_at = clock.now();
    c.report
}
