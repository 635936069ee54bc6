mod common;

use std::time::Instant;

use common::rig;
use datastage::checksum::ChecksumType;
use datastage::credential::TOKEN_HEADER;
use datastage::manifest::parse_manifest;
use datastage::simnode::{content_digest, FaultKind, FaultSpec, SimNodeConfig, UnknownPath};
use serde_json::Value;

async fn get(url: &str, token: &str) -> (u16, Vec<u8>) {
    let resp = reqwest::Client::new()
        .get(url)
        .header(TOKEN_HEADER, token)
        .send()
        .await
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.bytes().await.map(|b| b.to_vec()).unwrap_or_default())
}

#[tokio::test]
async fn content_is_deterministic_and_matches_oracle() {
    let r = rig(vec![SimNodeConfig::new("a").seed(42).file("x/y.nc", 70_000)]).await;
    let token = r.creds.ensure_fresh().unwrap().header_value();
    let node = r.fleet.node("a").unwrap();
    let (s1, b1) = get(&node.url_for("x/y.nc"), &token).await;
    let (s2, b2) = get(&node.url_for("x/y.nc"), &token).await;
    assert_eq!((s1, s2), (200, 200));
    assert_eq!(b1, b2);
    assert_eq!(
        ChecksumType::Md5.digest_hex(&b1),
        content_digest(42, "x/y.nc", 70_000, ChecksumType::Md5)
    );
}

#[tokio::test]
async fn protocol_status_codes() {
    let r = rig(vec![SimNodeConfig::new("a").file("f", 1234)]).await;
    let cred = r.creds.ensure_fresh().unwrap();
    let node = r.fleet.node("a").unwrap();
    let client = reqwest::Client::new();

    let head = client
        .head(node.url_for("f"))
        .header(TOKEN_HEADER, cred.header_value())
        .send()
        .await
        .unwrap();
    assert_eq!(head.status(), 200);
    assert_eq!(head.headers()["content-length"], "1234");

    assert_eq!(get(&node.url_for("nope"), &cred.header_value()).await.0, 404);
    assert_eq!(get(&node.url_for("f"), "garbage").await.0, 401);
    let no_token = client.get(node.url_for("f")).send().await.unwrap();
    assert_eq!(no_token.status(), 401);

    r.clock.set(cred.expires_at + chrono::Duration::seconds(1));
    assert_eq!(get(&node.url_for("f"), &cred.header_value()).await.0, 401);
}

#[tokio::test]
async fn throttled_node_serves_at_configured_rate() {
    let r = rig(vec![SimNodeConfig::new("a").bandwidth(1_000_000).file("f", 2_000_000)]).await;
    let token = r.creds.ensure_fresh().unwrap().header_value();
    let started = Instant::now();
    let (s, body) = get(&r.fleet.node("a").unwrap().url_for("f"), &token).await;
    let secs = started.elapsed().as_secs_f64();
    assert_eq!(s, 200);
    assert_eq!(body.len(), 2_000_000);
    assert!((secs / 2.0 - 1.0).abs() < 0.15, "{secs}");
}

#[tokio::test]
async fn publish_manifest_and_fault_orthogonality() {
    let r = rig(vec![SimNodeConfig::new("a")
        .file("good.nc", 5_000)
        .file("bad.nc", 5_000)
        .file("flaky.nc", 5_000)
        .fault(FaultSpec::new("bad.nc", FaultKind::WrongPublishedChecksum))
        .fault(FaultSpec::new("flaky.nc", FaultKind::CorruptFirstN { n: 1 }))])
    .await;
    let node = r.fleet.node("a").unwrap();
    let m = parse_manifest(&node.publish_manifest("ds", &[], true).unwrap()).unwrap();
    let hex = |p: &str| {
        m.entries
            .iter()
            .find(|e| e.relative_path == p)
            .unwrap()
            .checksum_hex
            .clone()
    };
    assert_eq!(hex("good.nc"), node.true_digest("good.nc").unwrap());
    assert_ne!(hex("bad.nc"), node.true_digest("bad.nc").unwrap());
    assert_eq!(hex("bad.nc")[1..], node.true_digest("bad.nc").unwrap()[1..]);
    assert_eq!(hex("flaky.nc"), node.true_digest("flaky.nc").unwrap());

    let token = r.creds.ensure_fresh().unwrap().header_value();
    let md5 = |b: &[u8]| ChecksumType::Md5.digest_hex(b);
    let (_, first) = get(&node.url_for("flaky.nc"), &token).await;
    let (_, second) = get(&node.url_for("flaky.nc"), &token).await;
    assert_ne!(md5(&first), hex("flaky.nc"));
    assert_eq!(first.iter().zip(&second).filter(|(a, b)| a != b).count(), 1);
    assert_eq!(md5(&second), hex("flaky.nc"));

    for _ in 0..2 {
        let (_, good) = get(&node.url_for("good.nc"), &token).await;
        assert_eq!(md5(&good), hex("good.nc"));
    }
    assert_eq!(
        node.publish_manifest("ds", &["missing"], false),
        Err(UnknownPath("missing".into()))
    );
}

#[tokio::test]
async fn gone_after_is_a_monotone_switch() {
    let r = rig(vec![SimNodeConfig::new("a").file("f", 10).file("g", 10)]).await;
    let node = r.fleet.node("a").unwrap();
    node.add_fault(FaultSpec::new(
        "f",
        FaultKind::GoneAfter {
            after_s: 3600.0,
            relocation_url: Some("http://elsewhere:81".into()),
        },
    ))
    .unwrap();
    let client = reqwest::Client::new();
    let status = |path: &'static str| {
        let client = client.clone();
        let url = node.url_for(path);
        let token = r.creds.current().map(|c| c.header_value()).unwrap_or_default();
        async move {
            let resp = client.get(url).header(TOKEN_HEADER, token).send().await.unwrap();
            let hint = resp
                .headers()
                .get("X-Relocated-To")
                .map(|v| v.to_str().unwrap().to_string());
            (resp.status().as_u16(), hint)
        }
    };
    r.creds.ensure_fresh().unwrap();
    assert_eq!(status("f").await, (200, None));
    r.clock.set(common::t0() + chrono::Duration::seconds(3600));
    for _ in 0..3 {
        assert_eq!(status("f").await, (410, Some("http://elsewhere:81".into())));
    }
    assert_eq!(status("g").await.0, 200);
}

#[tokio::test]
async fn reject_all_tokens_ignores_freshness() {
    let r = rig(vec![SimNodeConfig::new("a")
        .file("f", 10)
        .file("g", 10)
        .fault(FaultSpec::new("f", FaultKind::RejectAllTokens))])
    .await;
    let node = r.fleet.node("a").unwrap();
    let token = r.creds.ensure_fresh().unwrap().header_value();
    assert_eq!(get(&node.url_for("f"), &token).await.0, 401);
    assert_eq!(get(&node.url_for("g"), &token).await.0, 200);
}

#[tokio::test]
async fn admin_interface() {
    let r = rig(vec![SimNodeConfig::new("a").bandwidth(200_000).file("f", 200_000)]).await;
    let node = r.fleet.node("a").unwrap();
    let base = node.base_url();
    let client = reqwest::Client::new();
    let token = r.creds.ensure_fresh().unwrap().header_value();

    let resp = client
        .post(format!("{base}/admin/fault"))
        .body(r#"{"match": "g", "kind": "drop_connection", "p": 2}"#)
        .header("content-type", "application/json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let resp = client
        .post(format!("{base}/admin/fault"))
        .json(&serde_json::json!({"match": "f", "kind": "reject_all_tokens"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 204);
    assert_eq!(get(&node.url_for("f"), &token).await.0, 401);
    client
        .post(format!("{base}/admin/fault/clear"))
        .send()
        .await
        .unwrap();

    let fetches: Vec<_> = (0..3)
        .map(|_| {
            let url = node.url_for("f");
            let token = token.clone();
            tokio::spawn(async move { get(&url, &token).await })
        })
        .collect();
    tokio::time::sleep(std::time::Duration::from_millis(300)).await;
    let v: Value = client
        .get(format!("{base}/admin/inflight"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(v["inflight"], 3);
    assert_eq!(v["node"], "a");
    for f in fetches {
        assert_eq!(f.await.unwrap().0, 200);
    }
    assert_eq!(node.inflight(), 0);
    assert_eq!(node.peak_inflight(), 3);
    assert_eq!(r.fleet.fleet_peak(), 3);

    let stats: Value = client
        .get(format!("{base}/admin/stats"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(stats["gets"]["f"], 3);
    assert_eq!(stats["bytes_served"], 600_000);

    let before = r.clock.now_utc();
    let resp = client
        .post(format!("{base}/admin/clock"))
        .json(&serde_json::json!({"advance_s": 86400}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(r.clock.now_utc() - before, chrono::Duration::days(1));
}

trait NowUtc {
    fn now_utc(&self) -> chrono::DateTime<chrono::Utc>;
}

impl NowUtc for datastage::ManualClock {
    fn now_utc(&self) -> chrono::DateTime<chrono::Utc> {
        datastage::Clock::now(self)
    }
}
