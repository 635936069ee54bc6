//! Throughput samples, per-node aggregates and the derived quantities that
//! go into published reports.
//!
//! All units are decimal: a megabit is 10^6 bits and a terabyte 10^12 bytes.
//! Transfer time never includes checksum verification.

pub mod probe;
pub mod report;

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::manifest::NodeId;

pub use probe::{
    probe, probe_url, ProbeFailure, ProbeMatrix, ProbeRow, ProbeTooSmall, MIN_PROBE_BYTES,
    PROBE_CSV_HEADER,
};
pub use report::{
    format_sci, parse_run_summary, parse_sci, render_node_report, render_run_summary, NodeReport,
    RunSummary, SummaryParseError, NODE_CSV_HEADER,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub node_id: NodeId,
    pub bytes: u64,
    pub transfer: Duration,
    pub recorded_at: DateTime<Utc>,
}

impl ThroughputSample {
    pub fn rate(&self) -> f64 {
        self.bytes as f64 / self.transfer.as_secs_f64()
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{}",
            self.node_id,
            self.bytes,
            self.transfer.as_secs_f64(),
            self.recorded_at
                .to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let mut f = line.split(',');
        let node_id = NodeId(f.next()?.to_string());
        let bytes = f.next()?.parse().ok()?;
        let secs: f64 = f.next()?.parse().ok()?;
        let recorded_at = DateTime::parse_from_rfc3339(f.next()?)
            .ok()?
            .with_timezone(&Utc);
        if f.next().is_some() || !(secs > 0.0) {
            return None;
        }
        Some(Self {
            node_id,
            bytes,
            transfer: Duration::from_secs_f64(secs),
            recorded_at,
        })
    }
}

pub const SAMPLE_CSV_HEADER: &str = "node_id,bytes,transfer_seconds,recorded_at";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAggregate {
    pub node_id: NodeId,
    pub total_bytes: u64,
    pub total_transfer: Duration,
    pub sample_count: u64,
}

impl NodeAggregate {
    pub fn total_transfer_seconds(&self) -> f64 {
        self.total_transfer.as_secs_f64()
    }

    pub fn mean_rate(&self) -> f64 {
        self.total_bytes as f64 / self.total_transfer_seconds()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no samples recorded for node {0}")]
    UnknownNode(NodeId),
    #[error("sample has zero transfer time")]
    ZeroDuration,
    #[error("completion time must be after request time")]
    InvalidInterval,
    #[error("rate must be positive")]
    ZeroRate,
}

#[derive(Debug, Default, Clone)]
struct NodeStats {
    total_bytes: u64,
    total_transfer: Duration,
    samples: u64,
    ewma: Option<f64>,
}

/// Concurrent-safe sample accumulator. Totals are exact sums, so aggregates
/// do not depend on recording order; the EWMA does.
#[derive(Debug)]
pub struct Recorder {
    alpha: f64,
    nodes: Mutex<BTreeMap<NodeId, NodeStats>>,
    log: Mutex<Vec<ThroughputSample>>,
}

impl Recorder {
    pub fn new(ewma_alpha: f64) -> Self {
        assert!(ewma_alpha > 0.0 && ewma_alpha <= 1.0, "alpha in (0, 1]");
        Self {
            alpha: ewma_alpha,
            nodes: Mutex::new(BTreeMap::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn record(&self, sample: ThroughputSample) -> Result<(), MetricsError> {
        if sample.transfer.is_zero() {
            return Err(MetricsError::ZeroDuration);
        }
        let rate = sample.rate();
        {
            let mut nodes = self.nodes.lock().unwrap();
            let s = nodes.entry(sample.node_id.clone()).or_default();
            s.total_bytes += sample.bytes;
            s.total_transfer += sample.transfer;
            s.samples += 1;
            s.ewma = Some(match s.ewma {
                None => rate,
                Some(prev) => self.alpha * rate + (1.0 - self.alpha) * prev,
            });
        }
        self.log.lock().unwrap().push(sample);
        Ok(())
    }

    pub fn aggregate(&self, node: &NodeId) -> Result<NodeAggregate, MetricsError> {
        let nodes = self.nodes.lock().unwrap();
        let s = nodes
            .get(node)
            .ok_or_else(|| MetricsError::UnknownNode(node.clone()))?;
        Ok(NodeAggregate {
            node_id: node.clone(),
            total_bytes: s.total_bytes,
            total_transfer: s.total_transfer,
            sample_count: s.samples,
        })
    }

    /// Consistent snapshot of every node.
    pub fn aggregates(&self) -> Vec<NodeAggregate> {
        self.nodes
            .lock()
            .unwrap()
            .iter()
            .map(|(id, s)| NodeAggregate {
                node_id: id.clone(),
                total_bytes: s.total_bytes,
                total_transfer: s.total_transfer,
                sample_count: s.samples,
            })
            .collect()
    }

    pub fn ewma(&self, node: &NodeId) -> Option<f64> {
        self.nodes.lock().unwrap().get(node).and_then(|s| s.ewma)
    }

    pub fn ewma_rates(&self) -> BTreeMap<NodeId, f64> {
        self.nodes
            .lock()
            .unwrap()
            .iter()
            .filter_map(|(id, s)| s.ewma.map(|r| (id.clone(), r)))
            .collect()
    }

    pub fn samples(&self) -> Vec<ThroughputSample> {
        self.log.lock().unwrap().clone()
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from(SAMPLE_CSV_HEADER);
        out.push('\n');
        for s in self.log.lock().unwrap().iter() {
            out.push_str(&s.to_csv_row());
            out.push('\n');
        }
        out
    }

    /// Replays a sample CSV (header optional, blank lines skipped).
    pub fn load_csv(&self, text: &str) -> Result<usize, String> {
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line == SAMPLE_CSV_HEADER {
                continue;
            }
            let s = ThroughputSample::parse_csv_row(line)
                .ok_or_else(|| format!("bad sample on line {}", i + 1))?;
            self.record(s).map_err(|e| e.to_string())?;
            n += 1;
        }
        Ok(n)
    }
}

/// Decimal megabits per second between two instants.
pub fn mbits_per_sec(
    bytes: u64,
    request_time: DateTime<Utc>,
    completion_time: DateTime<Utc>,
) -> Result<f64, MetricsError> {
    let elapsed_ms = (completion_time - request_time).num_milliseconds();
    if elapsed_ms <= 0 {
        return Err(MetricsError::InvalidInterval);
    }
    Ok(bytes as f64 * 8.0 / 1e6 / (elapsed_ms as f64 / 1000.0))
}

/// Seconds needed to move `target_bytes` at `rate` bytes/s.
pub fn time_to_transfer(target_bytes: u64, rate: f64) -> Result<f64, MetricsError> {
    if !(rate > 0.0) {
        return Err(MetricsError::ZeroRate);
    }
    Ok(target_bytes as f64 / rate)
}
