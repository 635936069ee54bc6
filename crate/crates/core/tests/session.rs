mod common;

use common::rig;
use datastage::manifest::parse_manifest;
use datastage::metrics::{probe, MIN_PROBE_BYTES};
use datastage::scheduler::{Outcome, RunOptions};
use datastage::session::{journal_path, samples_path};
use datastage::simnode::{FaultKind, FaultSpec, SimNodeConfig};
use datastage::{Recorder, Session, StageConfig};

#[tokio::test]
async fn estimate_probes_only_unknown_sizes() {
    let r = rig(vec![SimNodeConfig::new("a")
        .file("x/zero.nc", 0)
        .file("x/y/u.nc", 1024)
        .file("v.nc", 77)])
    .await;
    let node = r.fleet.node("a").unwrap();
    // Declared zero stays zero; undeclared sizes come from HEAD.
    let mut text = node.publish_manifest("ds", &["x/zero.nc"], true).unwrap();
    let rest = node.publish_manifest("ds", &["x/y/u.nc", "v.nc"], false).unwrap();
    text.push_str(rest.split_once('\n').unwrap().1);
    let m = parse_manifest(&text).unwrap();
    assert_eq!(m.entries.len(), 3);

    let s = Session::open(StageConfig::default(), r.dir.path(), r.conn.clone(), r.creds.clone()).unwrap();
    let (_, est) = s.estimate(&[m]).await.unwrap();
    assert_eq!(est.probes_issued, 2);
    assert!(est.warnings.is_empty());
    assert_eq!(est.summary.total_bytes, 1101);
    assert_eq!(est.summary.file_count, 3);
    assert_eq!(est.summary.dir_count, 2);
    assert!(!est.summary.is_lower_bound());
}

#[tokio::test]
async fn failed_size_probe_gives_lower_bound() {
    let r = rig(vec![SimNodeConfig::new("a")
        .file("ok.nc", 10)
        .file("gone.nc", 20)
        .fault(FaultSpec::new("gone.nc", FaultKind::RejectAllTokens))])
    .await;
    let m = parse_manifest(&r.fleet.node("a").unwrap().publish_manifest("ds", &[], false).unwrap())
        .unwrap();
    let s = Session::open(StageConfig::default(), r.dir.path(), r.conn.clone(), r.creds.clone()).unwrap();
    let (plan, est) = s.plan(&[m]).await.unwrap();
    assert!(est.summary.is_lower_bound());
    assert_eq!(est.summary.total_bytes, 10);
    assert_eq!(est.summary.unknown_size_count, 1);
    assert!(est.summary.render().contains("lower bound"), "{}", est.summary.render());
    assert_eq!(est.warnings.len(), 1);
    assert!(plan.warnings.iter().any(|w| w.contains("gone.nc")));
}

#[tokio::test]
async fn session_persists_journal_and_samples() {
    let r = rig(vec![SimNodeConfig::new("a").file("d/f1", 5_000).file("d/f2", 6_000)]).await;
    let m = r.manifest("a");
    let mut cfg = StageConfig::default();
    cfg.retry.backoff_base_ms = 5;
    let s = Session::open(cfg.clone(), r.dir.path(), r.conn.clone(), r.creds.clone()).unwrap();
    let (plan, _) = s.plan(std::slice::from_ref(&m)).await.unwrap();
    let rep = s.execute(plan, RunOptions::default()).await.unwrap();
    assert!(rep.is_complete(), "{}", rep.render());
    assert!(journal_path(r.dir.path()).exists());
    let samples = std::fs::read_to_string(samples_path(r.dir.path())).unwrap();
    assert_eq!(samples.lines().count(), 3);

    // A new session sees the earlier samples and the finished journal.
    let s2 = Session::open(cfg, r.dir.path(), r.conn.clone(), r.creds.clone()).unwrap();
    assert_eq!(s2.recorder.samples().len(), 2);
    let node = r.fleet.node("a").unwrap().node_id();
    assert!(s2.recorder.ewma(&node).is_some());
    let (plan, _) = s2.plan(&[m]).await.unwrap();
    let rep = s2.execute(plan, RunOptions::default()).await.unwrap();
    assert_eq!(rep.count(Outcome::AlreadyDone), 2);
    assert_eq!(std::fs::read_to_string(samples_path(r.dir.path())).unwrap(), samples);
}

#[tokio::test]
async fn probe_reports_rates_and_failures() {
    let r = rig(vec![
        SimNodeConfig::new("a").bandwidth(2_000_000),
        SimNodeConfig::new("b").bandwidth(1_000_000),
    ])
    .await;
    let rec = Recorder::new(0.3);
    let cred = r.creds.ensure_fresh().unwrap();
    let bases = vec![
        r.fleet.node("a").unwrap().base_url(),
        r.fleet.node("b").unwrap().base_url(),
        "http://127.0.0.1:1".to_string(),
    ];
    assert!(probe(r.conn.clone(), &bases, MIN_PROBE_BYTES - 1, &cred, &rec, &r.shared_clock())
        .await
        .is_err());
    let m = probe(r.conn.clone(), &bases, 400_000, &cred, &rec, &r.shared_clock())
        .await
        .unwrap();
    assert_eq!(m.rows.len(), 2);
    assert_eq!(m.failures.len(), 1);
    assert_eq!(m.failures[0].node_id.0, "127.0.0.1:1");
    let rate = |n: &str| m.rate(&r.fleet.node(n).unwrap().node_id()).unwrap();
    assert!((rate("a") / 2e6 - 1.0).abs() < 0.15, "{}", rate("a"));
    assert!((rate("b") / 1e6 - 1.0).abs() < 0.15, "{}", rate("b"));
    assert_eq!(rec.samples().len(), 2);
    let csv = m.to_csv();
    assert!(csv.starts_with("node_id,bytes,seconds,rate_bytes_per_sec,ewma_rate\n"));
    assert!(csv.contains("# probe failed 127.0.0.1:1"));
}
