//! Planning: quota preflight, replica choice by measured throughput, per-node
//! queues, and remapping when a node disappears. Execution lives in
//! [`run`](self::run).

mod run;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};

use crate::manifest::{DatasetSummary, FileEntry, Location, NodeId, ReplicaSet};
use crate::metrics::Recorder;

pub use run::{
    run, AbortReason, BadSource, NodeRunStats, Outcome, RemapReason, RemapRecord, RunEvent,
    RunHook, RunOptions, RunReport,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    pub global_limit: usize,
    pub per_node_limit: usize,
    pub quota_bytes: Option<u64>,
    pub quota_override: bool,
    pub ewma_alpha: f64,
    /// Assumed rate, bytes/s, for nodes with no samples yet.
    pub unknown_rate_prior: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            global_limit: 8,
            per_node_limit: 4,
            quota_bytes: None,
            quota_override: false,
            ewma_alpha: 0.3,
            unknown_rate_prior: 1e6,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.per_node_limit < 1 || self.per_node_limit > self.global_limit {
            return Err(format!(
                "need 1 <= per_node_limit <= global_limit, got {} and {}",
                self.per_node_limit, self.global_limit
            ));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(format!("ewma_alpha must be in (0, 1], got {}", self.ewma_alpha));
        }
        if !(self.unknown_rate_prior > 0.0) {
            return Err("unknown_rate_prior must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeProfile {
    pub node_id: NodeId,
    pub ewma_rate: Option<f64>,
    pub available: bool,
    pub total_bytes: u64,
    pub total_transfer_seconds: f64,
}

/// Nodes absent from the map are available with an unknown rate.
pub type Profiles = BTreeMap<NodeId, NodeProfile>;

pub fn profiles_from(recorder: &Recorder, unavailable: &BTreeSet<NodeId>) -> Profiles {
    let ewma = recorder.ewma_rates();
    let mut out: Profiles = recorder
        .aggregates()
        .into_iter()
        .map(|a| {
            let p = NodeProfile {
                ewma_rate: ewma.get(&a.node_id).copied().filter(|r| *r > 0.0),
                available: !unavailable.contains(&a.node_id),
                total_bytes: a.total_bytes,
                total_transfer_seconds: a.total_transfer_seconds(),
                node_id: a.node_id.clone(),
            };
            (a.node_id, p)
        })
        .collect();
    for node in unavailable {
        out.entry(node.clone()).or_insert_with(|| NodeProfile {
            node_id: node.clone(),
            ewma_rate: None,
            available: false,
            total_bytes: 0,
            total_transfer_seconds: 0.0,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no available replica for {0}")]
pub struct NoAvailableReplica(pub String);

fn is_available(profiles: &Profiles, node: &NodeId) -> bool {
    profiles.get(node).is_none_or(|p| p.available)
}

fn effective_rate(profiles: &Profiles, node: &NodeId, prior: f64) -> f64 {
    profiles
        .get(node)
        .and_then(|p| p.ewma_rate)
        .unwrap_or(prior)
}

fn best_of<'a>(
    candidates: impl Iterator<Item = &'a Location>,
    profiles: &Profiles,
    prior: f64,
) -> Option<&'a Location> {
    let mut best: Option<(&Location, f64)> = None;
    for loc in candidates.filter(|l| is_available(profiles, &l.node)) {
        let rate = effective_rate(profiles, &loc.node, prior);
        best = match best {
            Some((b, br)) if br > rate || (br == rate && b.node <= loc.node) => Some((b, br)),
            _ => Some((loc, rate)),
        };
    }
    best.map(|(l, _)| l)
}

/// Fastest available location; ties go to the smallest node id.
pub fn select_replica(
    rs: &ReplicaSet,
    profiles: &Profiles,
    unknown_rate_prior: f64,
) -> Result<Location, NoAvailableReplica> {
    best_of(rs.locations.iter(), profiles, unknown_rate_prior)
        .cloned()
        .ok_or_else(|| NoAvailableReplica(rs.relative_path.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("quota exceeded: dataset needs {required} bytes, quota is {available} bytes")]
    QuotaExceeded { required: u64, available: u64 },
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTask {
    pub replicas: ReplicaSet,
    /// `None` once no usable location is left.
    pub chosen: Option<Location>,
}

impl PlannedTask {
    pub fn entry(&self) -> Option<FileEntry> {
        self.chosen.as_ref().map(|l| self.replicas.entry_for(l))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferPlan {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub config: SchedulerConfig,
    pub summary: DatasetSummary,
    pub tasks: Vec<PlannedTask>,
    /// Task indices waiting per node, in dispatch order.
    pub queues: BTreeMap<NodeId, VecDeque<usize>>,
    pub unavailable: BTreeSet<NodeId>,
    pub relocations: BTreeMap<NodeId, String>,
    pub warnings: Vec<String>,
}

fn run_id_for(sets: &[ReplicaSet], created_at: DateTime<Utc>) -> String {
    let mut h = Sha256::new();
    for s in sets {
        h.update(s.relative_path.as_bytes());
        h.update([0]);
        h.update(s.checksum_hex.as_bytes());
        h.update([0]);
    }
    h.update(created_at.timestamp_millis().to_le_bytes());
    let hex = hex::encode(&h.finalize()[..16]);
    format!(
        "{}-{}-{}-{}-{}",
        &hex[..8],
        &hex[8..12],
        &hex[12..16],
        &hex[16..20],
        &hex[20..32]
    )
}

pub fn build_plan(
    sets: &[ReplicaSet],
    config: &SchedulerConfig,
    summary: &DatasetSummary,
    profiles: &Profiles,
    created_at: DateTime<Utc>,
) -> Result<TransferPlan, PlanError> {
    config.validate().map_err(PlanError::InvalidConfig)?;
    let mut warnings = Vec::new();
    if let Some(quota) = config.quota_bytes {
        if summary.total_bytes > quota {
            if !config.quota_override {
                return Err(PlanError::QuotaExceeded {
                    required: summary.total_bytes,
                    available: quota,
                });
            }
            warnings.push(format!(
                "quota override: dataset needs {} bytes, quota is {quota} bytes",
                summary.total_bytes
            ));
        }
    }
    if summary.is_lower_bound() {
        warnings.push(format!(
            "{} file(s) have unknown size; byte totals are lower bounds",
            summary.unknown_size_count
        ));
    }

    let mut plan = TransferPlan {
        run_id: run_id_for(sets, created_at),
        created_at,
        config: *config,
        summary: *summary,
        tasks: Vec::with_capacity(sets.len()),
        queues: BTreeMap::new(),
        unavailable: profiles
            .values()
            .filter(|p| !p.available)
            .map(|p| p.node_id.clone())
            .collect(),
        relocations: BTreeMap::new(),
        warnings,
    };
    for (i, rs) in sets.iter().enumerate() {
        let chosen = select_replica(rs, profiles, config.unknown_rate_prior).ok();
        if let Some(loc) = &chosen {
            plan.queues.entry(loc.node.clone()).or_default().push_back(i);
        }
        plan.tasks.push(PlannedTask {
            replicas: rs.clone(),
            chosen,
        });
    }
    Ok(plan)
}

/// Replaces the scheme and authority of `url` with `prefix`.
pub fn relocate_url(url: &str, prefix: &str) -> Option<String> {
    let parsed = url::Url::parse(url).ok()?;
    let mut rest = parsed.path().to_string();
    if let Some(q) = parsed.query() {
        rest.push('?');
        rest.push_str(q);
    }
    Some(format!("{}{}", prefix.trim_end_matches('/'), rest))
}

/// Where a task went after its node disappeared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Remap {
    Replica(Location),
    Relocated(Location),
    RelocationNeeded,
}

impl TransferPlan {
    pub fn profiles(&self, recorder: &Recorder) -> Profiles {
        profiles_from(recorder, &self.unavailable)
    }

    /// Picks a new location for task `idx`, skipping `exclude`d urls and
    /// unavailable nodes. Falls back to the gone node's relocation prefix.
    /// The task is not queued; the caller decides when to dispatch it.
    pub fn remap(&mut self, idx: usize, exclude: &BTreeSet<String>, profiles: &Profiles) -> Remap {
        let prior = self.config.unknown_rate_prior;
        let task = &mut self.tasks[idx];
        let candidates = task
            .replicas
            .locations
            .iter()
            .filter(|l| !exclude.contains(&l.url));
        if let Some(loc) = best_of(candidates, profiles, prior).cloned() {
            task.chosen = Some(loc.clone());
            return Remap::Replica(loc);
        }
        let old = task.chosen.take();
        let hinted = old.as_ref().and_then(|old| {
            let prefix = self.relocations.get(&old.node)?;
            let url = relocate_url(&old.url, prefix)?;
            let node = NodeId::from_url(&url)?;
            (!self.unavailable.contains(&node) && !exclude.contains(&url))
                .then_some(Location { url, node })
        });
        match hinted {
            Some(loc) => {
                if !task.replicas.locations.contains(&loc) {
                    task.replicas.locations.push(loc.clone());
                }
                task.chosen = Some(loc.clone());
                Remap::Relocated(loc)
            }
            None => Remap::RelocationNeeded,
        }
    }

    /// Marks `node` unavailable and remaps every task still queued on it.
    /// Settled and in-flight tasks are not in the queues and are left alone.
    pub fn handle_node_gone(
        &mut self,
        node: &NodeId,
        relocation: Option<&str>,
        profiles: &Profiles,
    ) -> Vec<(usize, Remap)> {
        self.unavailable.insert(node.clone());
        if let Some(prefix) = relocation {
            self.relocations.insert(node.clone(), prefix.to_string());
        }
        let mut profiles = profiles.clone();
        profiles.insert(
            node.clone(),
            NodeProfile {
                node_id: node.clone(),
                ewma_rate: None,
                available: false,
                total_bytes: 0,
                total_transfer_seconds: 0.0,
            },
        );
        let queued: Vec<usize> = self.queues.remove(node).unwrap_or_default().into();
        let mut out = Vec::with_capacity(queued.len());
        for idx in queued {
            let r = self.remap(idx, &BTreeSet::new(), &profiles);
            if let Remap::Replica(l) | Remap::Relocated(l) = &r {
                self.queues.entry(l.node.clone()).or_default().push_back(idx);
            }
            out.push((idx, r));
        }
        out
    }
}
