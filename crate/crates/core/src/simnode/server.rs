use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use rand::Rng;
use serde::Deserialize;
use serde_json::json;

use super::bucket::{chunk_size, TokenBucket};
use super::content::ContentStream;
use super::{FaultKind, FaultSpec, InflightGuard, NodeState, ThrottleScope};
use crate::credential::{parse_token_header, TOKEN_HEADER};
use crate::engine::RELOCATED_HEADER;

type S = State<Arc<NodeState>>;

pub(crate) fn router(state: Arc<NodeState>) -> Router {
    Router::new()
        .route("/data/{*path}", get(data_get).head(data_head))
        .route("/probe/{bytes}", get(probe_get))
        .route("/admin/inflight", get(admin_inflight))
        .route("/admin/inflight/reset", post(admin_reset))
        .route("/admin/fault", post(admin_fault))
        .route("/admin/fault/clear", post(admin_clear))
        .route("/admin/clock", post(admin_clock))
        .route("/admin/stats", get(admin_stats))
        .with_state(state)
}

fn status(code: StatusCode) -> Response {
    code.into_response()
}

fn token_ok(node: &NodeState, headers: &HeaderMap) -> bool {
    headers
        .get(TOKEN_HEADER)
        .and_then(|v| v.to_str().ok())
        .and_then(parse_token_header)
        .is_some_and(|(_, expiry)| expiry >= node.clock.now())
}

/// Gone, then credential, then catalog. Returns the file size when the
/// request may proceed.
fn admit(node: &NodeState, path: &str, headers: &HeaderMap) -> Result<u64, Response> {
    let faults = node.matching(path);
    let now = node.clock.now();
    for f in &faults {
        if let FaultKind::GoneAfter {
            after_s,
            relocation_url,
        } = &f.spec.kind
        {
            let switch = f.installed_at
                + chrono::Duration::milliseconds((after_s * 1000.0).round() as i64);
            if f.gone.load(Ordering::SeqCst) || now >= switch {
                f.gone.store(true, Ordering::SeqCst);
                let mut resp = status(StatusCode::GONE);
                if let Some(v) = relocation_url
                    .as_deref()
                    .and_then(|r| HeaderValue::from_str(r).ok())
                {
                    resp.headers_mut().insert(RELOCATED_HEADER, v);
                }
                return Err(resp);
            }
        }
    }
    let reject_all = faults
        .iter()
        .any(|f| f.spec.kind == FaultKind::RejectAllTokens);
    if reject_all || !token_ok(node, headers) {
        return Err(status(StatusCode::UNAUTHORIZED));
    }
    node.catalog
        .get(path)
        .copied()
        .ok_or_else(|| status(StatusCode::NOT_FOUND))
}

async fn latency(node: &NodeState) {
    if node.config.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(node.config.latency_ms)).await;
    }
}

async fn data_head(State(node): S, Path(path): Path<String>, headers: HeaderMap) -> Response {
    match admit(&node, &path, &headers) {
        Ok(size) => {
            latency(&node).await;
            let mut resp = Response::new(Body::empty());
            resp.headers_mut()
                .insert(header::CONTENT_LENGTH, HeaderValue::from(size));
            resp
        }
        Err(r) => r,
    }
}

enum Fill {
    Content(ContentStream),
    Zeros,
}

struct BodyState {
    fill: Fill,
    offset: u64,
    size: u64,
    chunk: usize,
    conn_bucket: Option<TokenBucket>,
    node: Arc<NodeState>,
    guard: Option<InflightGuard>,
    corrupt_at: Option<u64>,
    drop_at: Option<u64>,
    count_bytes: bool,
}

fn throttled_body(st: BodyState) -> Body {
    let stream = futures::stream::unfold(st, |mut st| async move {
        if st.offset >= st.size {
            return None;
        }
        let n = (st.size - st.offset).min(st.chunk as u64);
        if let Some(d) = st.drop_at {
            if d < st.offset + n {
                st.guard = None;
                st.size = st.offset;
                let err = std::io::Error::new(std::io::ErrorKind::ConnectionReset, "dropped");
                return Some((Err(err), st));
            }
        }
        if let Some(b) = &st.conn_bucket {
            b.take(n).await;
        } else if let Some(b) = &st.node.node_bucket {
            b.take(n).await;
        }
        let mut buf = vec![0u8; n as usize];
        if let Fill::Content(c) = &mut st.fill {
            c.fill(&mut buf);
        }
        if let Some(at) = st.corrupt_at {
            if (st.offset..st.offset + n).contains(&at) {
                buf[(at - st.offset) as usize] ^= 0xFF;
            }
        }
        st.offset += n;
        if st.count_bytes {
            st.node.bytes_served.fetch_add(n, Ordering::SeqCst);
        }
        if st.offset >= st.size {
            // Leave the in-flight count before the client can see the end.
            st.guard = None;
        }
        Some((Ok::<Bytes, std::io::Error>(Bytes::from(buf)), st))
    });
    Body::from_stream(stream)
}

fn new_body(node: &Arc<NodeState>, fill: Fill, size: u64) -> BodyState {
    let bw = node.config.bandwidth;
    BodyState {
        fill,
        offset: 0,
        size,
        chunk: chunk_size(bw),
        conn_bucket: match (node.config.throttle, bw) {
            (ThrottleScope::Connection, Some(bw)) => Some(TokenBucket::new(bw)),
            _ => None,
        },
        node: node.clone(),
        guard: None,
        corrupt_at: None,
        drop_at: None,
        count_bytes: false,
    }
}

fn sized(body: Body, size: u64) -> Response {
    let mut resp = Response::new(body);
    resp.headers_mut()
        .insert(header::CONTENT_LENGTH, HeaderValue::from(size));
    resp
}

async fn data_get(State(node): S, Path(path): Path<String>, headers: HeaderMap) -> Response {
    let size = match admit(&node, &path, &headers) {
        Ok(s) => s,
        Err(r) => return r,
    };
    latency(&node).await;
    let guard = (size > 0).then(|| node.enter());
    *node.gets.lock().unwrap().entry(path.clone()).or_insert(0) += 1;

    let mut body = new_body(
        &node,
        Fill::Content(ContentStream::new(node.config.content_seed, &path)),
        size,
    );
    body.guard = guard;
    body.count_bytes = true;
    for f in node.matching(&path) {
        match f.spec.kind {
            FaultKind::CorruptFirstN { n } => {
                let mut hits = f.hits.lock().unwrap();
                let h = hits.entry(path.clone()).or_insert(0);
                *h += 1;
                if *h <= n && size > 0 {
                    body.corrupt_at = Some(size / 2);
                }
            }
            FaultKind::DropConnection { p } => {
                let mut rng = rand::rng();
                if rng.random_bool(p) {
                    body.drop_at = Some(if size > 0 { rng.random_range(0..size) } else { 0 });
                }
            }
            _ => {}
        }
    }
    sized(throttled_body(body), size)
}

async fn probe_get(State(node): S, Path(bytes): Path<u64>, headers: HeaderMap) -> Response {
    if !token_ok(&node, &headers) {
        return status(StatusCode::UNAUTHORIZED);
    }
    latency(&node).await;
    sized(throttled_body(new_body(&node, Fill::Zeros, bytes)), bytes)
}

async fn admin_inflight(State(node): S) -> Json<serde_json::Value> {
    Json(json!({
        "node": node.name,
        "inflight": node.inflight.load(Ordering::SeqCst),
        "peak": node.peak.load(Ordering::SeqCst),
        "fleet_inflight": node.fleet.inflight.load(Ordering::SeqCst),
        "fleet_peak": node.fleet.peak.load(Ordering::SeqCst),
    }))
}

async fn admin_reset(State(node): S) -> StatusCode {
    node.peak
        .store(node.inflight.load(Ordering::SeqCst), Ordering::SeqCst);
    node.fleet
        .peak
        .store(node.fleet.inflight.load(Ordering::SeqCst), Ordering::SeqCst);
    StatusCode::NO_CONTENT
}

async fn admin_fault(State(node): S, Json(spec): Json<FaultSpec>) -> Response {
    match node.install(spec) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => (StatusCode::BAD_REQUEST, e).into_response(),
    }
}

async fn admin_clear(State(node): S) -> StatusCode {
    node.faults.write().unwrap().clear();
    StatusCode::NO_CONTENT
}

#[derive(Deserialize)]
struct Advance {
    advance_s: f64,
}

async fn admin_clock(State(node): S, Json(a): Json<Advance>) -> Response {
    let by = chrono::Duration::milliseconds((a.advance_s * 1000.0).round() as i64);
    if !node.clock.advance(by) {
        return (StatusCode::CONFLICT, "clock cannot be advanced").into_response();
    }
    Json(json!({ "now": node.clock.now().to_rfc3339() })).into_response()
}

async fn admin_stats(State(node): S) -> Json<serde_json::Value> {
    let gets = node.gets.lock().unwrap().clone();
    Json(json!({
        "gets": gets,
        "bytes_served": node.bytes_served.load(Ordering::SeqCst),
    }))
}
