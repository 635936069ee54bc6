//! Active throughput probes.
//!
//! A probe downloads `<base>/probe/<bytes>` from each node and records the
//! result as an ordinary throughput sample. Probes under 100 KB are refused:
//! at that size connection setup and latency dominate the measurement.
//!
//! Matrix CSV: `node_id,bytes,seconds,rate_bytes_per_sec,ewma_rate`. Failed
//! nodes appear as `# probe failed <node_id>: <reason>` comment lines.

use std::sync::Arc;
use std::time::Instant;

use futures::StreamExt;

use super::{Recorder, ThroughputSample};
use crate::clock::SharedClock;
use crate::credential::Credential;
use crate::engine::DataNodeConnection;
use crate::manifest::NodeId;

pub const MIN_PROBE_BYTES: u64 = 100_000;
pub const PROBE_CSV_HEADER: &str = "node_id,bytes,seconds,rate_bytes_per_sec,ewma_rate";

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub node_id: NodeId,
    pub bytes: u64,
    pub seconds: f64,
    pub rate: f64,
    pub ewma_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeFailure {
    pub node_id: NodeId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeMatrix {
    pub rows: Vec<ProbeRow>,
    pub failures: Vec<ProbeFailure>,
}

impl ProbeMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{PROBE_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.3},{:.3}\n",
                r.node_id, r.bytes, r.seconds, r.rate, r.ewma_rate
            ));
        }
        for f in &self.failures {
            out.push_str(&format!("# probe failed {}: {}\n", f.node_id, f.reason));
        }
        out
    }

    pub fn rate(&self, node: &NodeId) -> Option<f64> {
        self.rows.iter().find(|r| &r.node_id == node).map(|r| r.rate)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("probe size {0} is below the {MIN_PROBE_BYTES}-byte minimum")]
pub struct ProbeTooSmall(pub u64);

pub fn probe_url(base: &str, bytes: u64) -> String {
    format!("{}/probe/{bytes}", base.trim_end_matches('/'))
}

async fn probe_one(
    conn: &dyn DataNodeConnection,
    url: &str,
    expected: u64,
    cred: &Credential,
) -> Result<(u64, std::time::Duration), String> {
    let started = Instant::now();
    let mut body = conn.fetch(url, cred).await.map_err(|e| e.to_string())?;
    let mut got = 0u64;
    while let Some(chunk) = body.next().await {
        got += chunk.map_err(|e| e.to_string())?.len() as u64;
    }
    let elapsed = started.elapsed();
    if got != expected {
        return Err(format!("short probe body: {got} of {expected} bytes"));
    }
    Ok((got, elapsed))
}

/// Probes every node concurrently. A failing node yields a [`ProbeFailure`]
/// and never affects the other rows. Rows keep the order of `nodes`.
pub async fn probe(
    conn: Arc<dyn DataNodeConnection>,
    nodes: &[String],
    probe_bytes: u64,
    cred: &Credential,
    recorder: &Recorder,
    clock: &SharedClock,
) -> Result<ProbeMatrix, ProbeTooSmall> {
    if probe_bytes < MIN_PROBE_BYTES {
        return Err(ProbeTooSmall(probe_bytes));
    }
    let runs = nodes.iter().map(|base| {
        let conn = conn.clone();
        let url = probe_url(base, probe_bytes);
        async move {
            let node = NodeId::from_url(&url).unwrap_or_else(|| NodeId(base.clone()));
            let outcome = probe_one(conn.as_ref(), &url, probe_bytes, cred).await;
            (node, outcome)
        }
    });
    let results = futures::future::join_all(runs).await;

    let mut matrix = ProbeMatrix::default();
    for (node_id, outcome) in results {
        match outcome {
            Ok((bytes, transfer)) => {
                let sample = ThroughputSample {
                    node_id: node_id.clone(),
                    bytes,
                    transfer,
                    recorded_at: clock.now(),
                };
                let rate = sample.rate();
                if let Err(e) = recorder.record(sample) {
                    matrix.failures.push(ProbeFailure {
                        node_id,
                        reason: e.to_string(),
                    });
                    continue;
                }
                matrix.rows.push(ProbeRow {
                    ewma_rate: recorder.ewma(&node_id).unwrap_or(rate),
                    node_id,
                    bytes,
                    seconds: transfer.as_secs_f64(),
                    rate,
                });
            }
            Err(reason) => matrix.failures.push(ProbeFailure { node_id, reason }),
        }
    }
    Ok(matrix)
}
