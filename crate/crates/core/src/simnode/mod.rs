//! A local fleet of simulated data nodes.
//!
//! Each node serves its catalog over the engine's wire protocol with
//! deterministic content (see [`content`]), optional throttling and
//! latency, and scripted faults. Nodes share the caller's clock, so token
//! expiry follows simulated time.
//!
//! Routes per node:
//!
//! | route | |
//! |---|---|
//! | `GET`/`HEAD /data/<path>` | file content / size |
//! | `GET /probe/<bytes>` | throttled zero-filled probe object |
//! | `GET /admin/inflight` | `{"node","inflight","peak","fleet_inflight","fleet_peak"}` |
//! | `POST /admin/inflight/reset` | reset peaks to current values |
//! | `POST /admin/fault` | install a [`FaultSpec`] (JSON) |
//! | `POST /admin/fault/clear` | remove all faults |
//! | `POST /admin/clock` | `{"advance_s": 3600}` advances the shared clock |
//! | `GET /admin/stats` | `{"gets": {path: n}, "bytes_served": n}` |

pub mod bucket;
pub mod content;
pub mod fleet_config;
mod server;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::checksum::ChecksumType;
use crate::clock::SharedClock;
use crate::manifest::{validate_relative_path, FileEntry, Manifest, NodeId};

pub use bucket::TokenBucket;
pub use content::{content_bytes, content_digest, ContentStream};
pub use fleet_config::{parse_fleet_config, FleetClock, FleetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThrottleScope {
    /// Every connection gets the full bandwidth.
    #[default]
    Connection,
    /// All connections to the node share one bucket.
    Node,
}

impl std::str::FromStr for ThrottleScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "connection" => Ok(ThrottleScope::Connection),
            "node" => Ok(ThrottleScope::Node),
            other => Err(format!("unknown throttle scope `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// Published manifest carries a digest with its first nibble flipped.
    WrongPublishedChecksum,
    /// The first `n` GETs of a matching path get one flipped byte.
    CorruptFirstN { n: u32 },
    /// `after_s` seconds of fleet-clock time after installation, every
    /// matching request gets 410, optionally with a relocation origin.
    GoneAfter {
        after_s: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        relocation_url: Option<String>,
    },
    RejectAllTokens,
    /// Each GET is cut off mid-body with probability `p`.
    DropConnection { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(flatten)]
    pub kind: FaultKind,
}

impl FaultSpec {
    pub fn new(pattern: impl Into<String>, kind: FaultKind) -> Self {
        Self {
            pattern: pattern.into(),
            kind,
        }
    }

    pub fn validate(&self) -> Result<glob::Pattern, String> {
        let pat = glob::Pattern::new(&self.pattern)
            .map_err(|e| format!("bad pattern `{}`: {e}", self.pattern))?;
        match &self.kind {
            FaultKind::CorruptFirstN { n } if *n < 1 => Err("corrupt_first_n needs n >= 1".into()),
            FaultKind::DropConnection { p } if !(0.0..=1.0).contains(p) => {
                Err("drop_connection needs 0 <= p <= 1".into())
            }
            FaultKind::GoneAfter { after_s, .. } if !(*after_s >= 0.0) => {
                Err("gone_after needs a non-negative delay".into())
            }
            _ => Ok(pat),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimNodeConfig {
    pub name: String,
    pub listen: SocketAddr,
    /// Bytes per second; `None` is unthrottled.
    pub bandwidth: Option<u64>,
    pub latency_ms: u64,
    pub content_seed: u64,
    pub throttle: ThrottleScope,
    pub checksum_type: ChecksumType,
    pub catalog: Vec<(String, u64)>,
    pub faults: Vec<FaultSpec>,
}

impl SimNodeConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            bandwidth: None,
            latency_ms: 0,
            content_seed: 0,
            throttle: ThrottleScope::default(),
            checksum_type: ChecksumType::Md5,
            catalog: Vec::new(),
            faults: Vec::new(),
        }
    }

    pub fn bandwidth(mut self, bytes_per_sec: u64) -> Self {
        self.bandwidth = Some(bytes_per_sec);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.content_seed = seed;
        self
    }

    pub fn file(mut self, path: impl Into<String>, size: u64) -> Self {
        self.catalog.push((path.into(), size));
        self
    }

    pub fn fault(mut self, f: FaultSpec) -> Self {
        self.faults.push(f);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bandwidth == Some(0) {
            return Err(format!("node {}: bandwidth must be positive", self.name));
        }
        let mut seen = std::collections::HashSet::new();
        for (p, _) in &self.catalog {
            validate_relative_path(p).map_err(|r| format!("node {}: path `{p}`: {r}", self.name))?;
            if !seen.insert(p) {
                return Err(format!("node {}: duplicate catalog path `{p}`", self.name));
            }
        }
        for f in &self.faults {
            f.validate().map_err(|e| format!("node {}: {e}", self.name))?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid fleet config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("path `{0}` is not in the node catalog")]
pub struct UnknownPath(pub String);

#[derive(Debug)]
struct ActiveFault {
    spec: FaultSpec,
    pattern: glob::Pattern,
    installed_at: DateTime<Utc>,
    gone: AtomicBool,
    hits: Mutex<HashMap<String, u32>>,
}

#[derive(Debug, Default)]
pub(crate) struct FleetCounters {
    inflight: AtomicUsize,
    peak: AtomicUsize,
}

#[derive(Debug)]
pub(crate) struct NodeState {
    name: String,
    config: SimNodeConfig,
    catalog: BTreeMap<String, u64>,
    clock: SharedClock,
    faults: RwLock<Vec<Arc<ActiveFault>>>,
    node_bucket: Option<Arc<TokenBucket>>,
    inflight: AtomicUsize,
    peak: AtomicUsize,
    fleet: Arc<FleetCounters>,
    gets: Mutex<HashMap<String, u64>>,
    bytes_served: AtomicU64,
}

impl NodeState {
    fn install(&self, spec: FaultSpec) -> Result<(), String> {
        let pattern = spec.validate()?;
        self.faults.write().unwrap().push(Arc::new(ActiveFault {
            spec,
            pattern,
            installed_at: self.clock.now(),
            gone: AtomicBool::new(false),
            hits: Mutex::new(HashMap::new()),
        }));
        Ok(())
    }

    fn matching(&self, path: &str) -> Vec<Arc<ActiveFault>> {
        self.faults
            .read()
            .unwrap()
            .iter()
            .filter(|f| f.pattern.matches(path))
            .cloned()
            .collect()
    }

    fn enter(self: &Arc<Self>) -> InflightGuard {
        let n = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(n, Ordering::SeqCst);
        let f = self.fleet.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.fleet.peak.fetch_max(f, Ordering::SeqCst);
        InflightGuard { node: self.clone() }
    }

    fn published_digest(&self, path: &str, size: u64) -> String {
        let mut hex = content_digest(self.config.content_seed, path, size, self.config.checksum_type);
        let wrong = self
            .matching(path)
            .iter()
            .any(|f| f.spec.kind == FaultKind::WrongPublishedChecksum);
        if wrong {
            let first = u8::from_str_radix(&hex[..1], 16).expect("hex digest") ^ 0xF;
            hex.replace_range(..1, &format!("{first:x}"));
        }
        hex
    }
}

pub(crate) struct InflightGuard {
    node: Arc<NodeState>,
}

impl Drop for InflightGuard {
    fn drop(&mut self) {
        self.node.inflight.fetch_sub(1, Ordering::SeqCst);
        self.node.fleet.inflight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Handle to one running node. Dropping it does not stop the node; use
/// [`SimNodeHandle::shutdown`] or drop the whole [`Fleet`].
#[derive(Debug)]
pub struct SimNodeHandle {
    addr: SocketAddr,
    state: Arc<NodeState>,
    task: Mutex<Option<tokio::task::JoinHandle<()>>>,
}

impl SimNodeHandle {
    pub fn name(&self) -> &str {
        &self.state.name
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn node_id(&self) -> NodeId {
        NodeId(self.addr.to_string())
    }

    pub fn url_for(&self, path: &str) -> String {
        let mut url = url::Url::parse(&self.base_url()).expect("base url");
        url.path_segments_mut()
            .expect("http url")
            .push("data")
            .extend(path.split('/'));
        url.to_string()
    }

    pub fn catalog(&self) -> &BTreeMap<String, u64> {
        &self.state.catalog
    }

    pub fn content(&self, path: &str) -> Option<Vec<u8>> {
        let size = *self.state.catalog.get(path)?;
        Some(content_bytes(self.state.config.content_seed, path, size))
    }

    /// Digest of the bytes actually served (ignoring corruption faults).
    pub fn true_digest(&self, path: &str) -> Option<String> {
        let size = *self.state.catalog.get(path)?;
        Some(content_digest(
            self.state.config.content_seed,
            path,
            size,
            self.state.config.checksum_type,
        ))
    }

    pub fn entry(&self, path: &str, with_size: bool) -> Result<FileEntry, UnknownPath> {
        let size = *self
            .state
            .catalog
            .get(path)
            .ok_or_else(|| UnknownPath(path.to_string()))?;
        Ok(FileEntry {
            relative_path: path.to_string(),
            url: self.url_for(path),
            checksum_type: self.state.config.checksum_type,
            checksum_hex: self.state.published_digest(path, size),
            size_bytes: with_size.then_some(size),
        })
    }

    /// Canonical manifest text for `paths` (all of the catalog when empty).
    pub fn publish_manifest(
        &self,
        dataset_id: &str,
        paths: &[&str],
        with_sizes: bool,
    ) -> Result<String, UnknownPath> {
        Ok(self.manifest(dataset_id, paths, with_sizes)?.to_text())
    }

    pub fn manifest(
        &self,
        dataset_id: &str,
        paths: &[&str],
        with_sizes: bool,
    ) -> Result<Manifest, UnknownPath> {
        let all: Vec<&str>;
        let paths = if paths.is_empty() {
            all = self.state.catalog.keys().map(String::as_str).collect();
            &all[..]
        } else {
            paths
        };
        let entries = paths
            .iter()
            .map(|p| self.entry(p, with_sizes))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Manifest::new(dataset_id, entries))
    }

    pub fn add_fault(&self, spec: FaultSpec) -> Result<(), String> {
        self.state.install(spec)
    }

    pub fn clear_faults(&self) {
        self.state.faults.write().unwrap().clear();
    }

    pub fn inflight(&self) -> usize {
        self.state.inflight.load(Ordering::SeqCst)
    }

    pub fn peak_inflight(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.state
            .peak
            .store(self.state.inflight.load(Ordering::SeqCst), Ordering::SeqCst);
    }

    /// Number of GETs that started a body for `path`.
    pub fn gets(&self, path: &str) -> u64 {
        self.state.gets.lock().unwrap().get(path).copied().unwrap_or(0)
    }

    pub fn total_gets(&self) -> u64 {
        self.state.gets.lock().unwrap().values().sum()
    }

    pub fn bytes_served(&self) -> u64 {
        self.state.bytes_served.load(Ordering::SeqCst)
    }

    /// Stops accepting connections. Transfers already streaming finish.
    pub fn shutdown(&self) {
        if let Some(t) = self.task.lock().unwrap().take() {
            t.abort();
        }
    }
}

#[derive(Debug)]
pub struct Fleet {
    nodes: Vec<SimNodeHandle>,
    counters: Arc<FleetCounters>,
    clock: SharedClock,
}

impl Fleet {
    pub fn nodes(&self) -> &[SimNodeHandle] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&SimNodeHandle> {
        self.nodes.iter().find(|n| n.name() == name)
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn fleet_inflight(&self) -> usize {
        self.counters.inflight.load(Ordering::SeqCst)
    }

    pub fn fleet_peak(&self) -> usize {
        self.counters.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peaks(&self) {
        self.counters
            .peak
            .store(self.fleet_inflight(), Ordering::SeqCst);
        for n in &self.nodes {
            n.reset_peak();
        }
    }

    pub fn shutdown(&self) {
        for n in &self.nodes {
            n.shutdown();
        }
    }
}

impl Drop for Fleet {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds and starts every node. Must be called inside a tokio runtime.
pub async fn start_fleet(configs: Vec<SimNodeConfig>, clock: SharedClock) -> Result<Fleet, SimError> {
    let counters = Arc::new(FleetCounters::default());
    let mut nodes = Vec::with_capacity(configs.len());
    for cfg in configs {
        cfg.validate().map_err(SimError::Config)?;
        let listener = tokio::net::TcpListener::bind(cfg.listen)
            .await
            .map_err(|source| SimError::Bind {
                addr: cfg.listen,
                source,
            })?;
        let addr = listener.local_addr().map_err(|source| SimError::Bind {
            addr: cfg.listen,
            source,
        })?;
        let node_bucket = match (cfg.throttle, cfg.bandwidth) {
            (ThrottleScope::Node, Some(bw)) => Some(Arc::new(TokenBucket::new(bw))),
            _ => None,
        };
        let state = Arc::new(NodeState {
            name: cfg.name.clone(),
            catalog: cfg.catalog.iter().cloned().collect(),
            clock: clock.clone(),
            faults: RwLock::new(Vec::new()),
            node_bucket,
            inflight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            fleet: counters.clone(),
            gets: Mutex::new(HashMap::new()),
            bytes_served: AtomicU64::new(0),
            config: cfg.clone(),
        });
        for f in cfg.faults {
            state.install(f).map_err(SimError::Config)?;
        }
        let app = server::router(state.clone());
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        nodes.push(SimNodeHandle {
            addr,
            state,
            task: Mutex::new(Some(task)),
        });
    }
    Ok(Fleet {
        nodes,
        counters,
        clock,
    })
}
