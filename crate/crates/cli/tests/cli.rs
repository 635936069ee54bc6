use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use datastage::simnode::{start_fleet, FaultKind, FaultSpec, Fleet, SimNodeConfig};
use datastage::{SharedClock, SystemClock};

const BIN: &str = env!("CARGO_BIN_EXE_datastage");

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn finish(o: Output) -> Out {
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn cmd(args: &[&str]) -> Command {
    let mut c = Command::new(BIN);
    c.args(args).env("STAGE_BACKOFF_BASE_MS", "5");
    c
}

fn ds(args: &[&str]) -> Out {
    finish(cmd(args).output().unwrap())
}

async fn fleet(configs: Vec<SimNodeConfig>) -> Fleet {
    let clock: SharedClock = Arc::new(SystemClock);
    start_fleet(configs, clock).await.unwrap()
}

fn write_manifest(dir: &Path, f: &Fleet, name: &str, with_sizes: bool) -> PathBuf {
    let p = dir.join(format!("{name}.manifest"));
    let text = f.node(name).unwrap().publish_manifest(name, &[], with_sizes).unwrap();
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn three_files() -> SimNodeConfig {
    SimNodeConfig::new("a")
        .file("cmip5/tas/a.nc", 10_000)
        .file("cmip5/tas/b.nc", 20_000)
        .file("cmip5/pr/c.nc", 30_000)
}

#[tokio::test(flavor = "multi_thread")]
async fn estimate_prints_totals() {
    let f = fleet(vec![three_files()]).await;
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), &f, "a", false);
    let o = ds(&["estimate", "-m", s(&m)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("files: 3"), "{}", o.stdout);
    assert!(o.stdout.contains("directories: 3"), "{}", o.stdout);
    assert!(o.stdout.contains("bytes: 60000"), "{}", o.stdout);
    assert_eq!(f.node("a").unwrap().total_gets(), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn quota_refusal_exits_3_and_transfers_nothing() {
    let f = fleet(vec![three_files()]).await;
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), &f, "a", true);
    let stage = dir.path().join("stage");
    let cfg = dir.path().join("stage.conf");
    std::fs::write(&cfg, format!("staging_dir = {}\nquota_bytes = 59999\n", stage.display())).unwrap();
    for _ in 0..2 {
        let o = ds(&["run", "-m", s(&m), "-c", s(&cfg)]);
        assert_eq!(o.code, 3, "{}", o.stderr);
        assert!(o.stderr.starts_with("ERROR quota: "), "{}", o.stderr);
        assert_eq!(o.stderr.lines().count(), 1);
    }
    assert_eq!(f.node("a").unwrap().total_gets(), 0);
    assert_eq!(f.node("a").unwrap().bytes_served(), 0);

    // The override flag lets the same plan through.
    let o = finish(
        cmd(&["run", "-m", s(&m), "-c", s(&cfg)])
            .env("STAGE_QUOTA_OVERRIDE", "true")
            .output()
            .unwrap(),
    );
    assert_eq!(o.code, 0, "{}", o.stderr);
}

#[tokio::test(flavor = "multi_thread")]
async fn run_then_rerun_is_idempotent() {
    let f = fleet(vec![three_files()]).await;
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), &f, "a", true);
    let stage = dir.path().join("stage");
    let first = ds(&["run", "-m", s(&m), "-s", s(&stage)]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    assert!(first.stdout.contains("\n60000 bytes transferred\n"), "{}", first.stdout);
    assert!(first.stdout.contains("Bytes Transferred:\t6E+04"), "{}", first.stdout);
    assert!(first.stdout.contains("Files:\t3"), "{}", first.stdout);
    assert_eq!(
        std::fs::read(stage.join("cmip5/pr/c.nc")).unwrap(),
        f.node("a").unwrap().content("cmip5/pr/c.nc").unwrap()
    );

    let second = ds(&["resume", "-m", s(&m), "-s", s(&stage)]);
    assert_eq!(second.code, 0, "{}", second.stderr);
    assert!(second.stdout.contains("\n0 bytes transferred\n"), "{}", second.stdout);
    assert_eq!(f.node("a").unwrap().total_gets(), 3);

    let st = ds(&["status", "-s", s(&stage)]);
    assert_eq!(st.code, 0);
    assert!(st.stdout.contains("done                 3"), "{}", st.stdout);

    let rep = ds(&["report", "-s", s(&stage), "--csv"]);
    assert_eq!(rep.code, 0);
    let lines: Vec<_> = rep.stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with(&format!("{},60000,", f.node("a").unwrap().node_id())));
    let text = ds(&["report", "-s", s(&stage)]);
    assert!(text.stdout.contains("time to 1 TB"));
}

#[tokio::test(flavor = "multi_thread")]
async fn status_against_manifest_counts_pending_and_stale() {
    let f = fleet(vec![three_files()]).await;
    let dir = tempfile::tempdir().unwrap();
    let stage = dir.path().join("stage");
    let m = write_manifest(dir.path(), &f, "a", true);
    let o = ds(&["status", "-s", s(&stage), "-m", s(&m)]);
    assert!(o.stdout.contains("pending              3"), "{}", o.stdout);
    assert_eq!(ds(&["run", "-m", s(&m), "-s", s(&stage)]).code, 0);

    let text = std::fs::read_to_string(&m).unwrap();
    let digest = f.node("a").unwrap().true_digest("cmip5/pr/c.nc").unwrap();
    std::fs::write(&m, text.replace(&digest, &"0".repeat(32))).unwrap();
    let o = ds(&["status", "-s", s(&stage), "-m", s(&m)]);
    assert!(o.stdout.contains("done                 2"), "{}", o.stdout);
    assert!(o.stdout.contains("stale                1"), "{}", o.stdout);
    assert!(o.stdout.contains("total                3"), "{}", o.stdout);
}

#[tokio::test(flavor = "multi_thread")]
async fn unresolved_task_exits_1() {
    let f = fleet(vec![three_files().fault(FaultSpec::new("*/b.nc", FaultKind::WrongPublishedChecksum))]).await;
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), &f, "a", true);
    let o = ds(&["run", "-m", s(&m), "-s", s(&dir.path().join("st"))]);
    assert_eq!(o.code, 1, "{}", o.stderr);
    assert_eq!(o.stderr.trim(), "ERROR unresolved: 1 tasks unresolved");
    assert!(o.stdout.contains("ALERT"), "{}", o.stdout);
}

#[tokio::test(flavor = "multi_thread")]
async fn rejected_credentials_exit_4() {
    let f = fleet(vec![three_files().fault(FaultSpec::new("*", FaultKind::RejectAllTokens))]).await;
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), &f, "a", true);
    let o = ds(&["run", "-m", s(&m), "-s", s(&dir.path().join("st"))]);
    assert_eq!(o.code, 4, "{}", o.stderr);
    assert!(o.stderr.starts_with("ERROR credential: "));
}

#[tokio::test(flavor = "multi_thread")]
async fn full_disk_exits_5() {
    let f = fleet(vec![three_files()]).await;
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), &f, "a", true);
    let stage = dir.path().join("st");
    std::fs::create_dir_all(stage.join("cmip5/pr")).unwrap();
    std::os::unix::fs::symlink("/dev/full", stage.join("cmip5/pr/c.nc.part")).unwrap();
    let o = ds(&["run", "-m", s(&m), "-s", s(&stage), "-c", "/dev/null"]);
    assert_eq!(o.code, 5, "{}", o.stderr);
    assert!(o.stderr.starts_with("ERROR storage: "));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.manifest");
    std::fs::write(&bad, "dataset d\nfile 'a' 'http://h/a' 'md5'\n").unwrap();
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["estimate", "-m", s(&bad)], "ERROR manifest: "),
        (vec!["estimate", "-m", "/nonexistent"], "ERROR manifest: "),
        (vec!["estimate"], "ERROR usage: "),
        (vec!["frobnicate"], "ERROR usage: "),
        (vec!["run", "-m", s(&bad)], "ERROR manifest: "),
        (vec!["status"], "ERROR usage: "),
        (vec!["probe", "--nodes", "http://127.0.0.1:1", "--bytes", "10"], "ERROR usage: "),
    ];
    for (args, prefix) in cases {
        let o = ds(&args);
        assert_eq!(o.code, 2, "{args:?}: {}", o.stderr);
        assert!(o.stderr.starts_with(prefix), "{args:?}: {}", o.stderr);
        assert_eq!(o.stderr.lines().count(), 1, "{args:?}: {}", o.stderr);
    }
    let cfg = dir.path().join("c.conf");
    std::fs::write(&cfg, "global_limit = 0\n").unwrap();
    let o = ds(&["status", "-c", s(&cfg), "-s", "/tmp"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.starts_with("ERROR config: "), "{}", o.stderr);
    let o = finish(cmd(&["status", "-s", "/tmp"]).env("STAGE_PER_NODE_LIMIT", "x").output().unwrap());
    assert_eq!(o.code, 2, "{}", o.stderr);
}

#[tokio::test(flavor = "multi_thread")]
async fn probe_emits_rate_matrix() {
    let f = fleet(vec![SimNodeConfig::new("a").bandwidth(1_000_000)]).await;
    let dir = tempfile::tempdir().unwrap();
    let base = f.node("a").unwrap().base_url();
    let o = ds(&["probe", "--nodes", &base, "--bytes", "200000", "--record", s(dir.path())]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let lines: Vec<_> = o.stdout.lines().collect();
    assert_eq!(lines[0], "node_id,bytes,seconds,rate_bytes_per_sec,ewma_rate");
    let rate: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    assert!((rate / 1e6 - 1.0).abs() < 0.15, "{rate}");
    let rep = ds(&["report", "-s", s(dir.path()), "--csv"]);
    assert_eq!(rep.stdout.lines().count(), 2);

    let o = ds(&["probe", "--nodes", &format!("{base},http://127.0.0.1:1"), "--bytes", "100000"]);
    assert_eq!(o.code, 1);
    assert!(o.stdout.contains("# probe failed 127.0.0.1:1"));
    assert_eq!(o.stderr.trim(), "ERROR probe: 1 of 2 nodes failed");
}

fn sigint(pid: u32) {
    let ok = Command::new("kill")
        .args(["-INT", &pid.to_string()])
        .status()
        .unwrap()
        .success();
    assert!(ok);
}

#[tokio::test(flavor = "multi_thread")]
async fn interrupt_stops_gracefully_and_resume_completes() {
    let mut node = SimNodeConfig::new("a").bandwidth(50_000);
    for i in 0..8 {
        node = node.file(format!("f{i}"), 10_000);
    }
    let f = fleet(vec![node]).await;
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), &f, "a", true);
    let stage = dir.path().join("st");
    let cfg = dir.path().join("c.conf");
    std::fs::write(&cfg, "global_limit = 1\nper_node_limit = 1\n").unwrap();
    let child = cmd(&["run", "-m", s(&m), "-s", s(&stage), "-c", s(&cfg)])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let journal = stage.join(".datastage/journal");
    let t = Instant::now();
    while std::fs::read_to_string(&journal).map_or(0, |j| j.lines().count()) < 2 {
        assert!(t.elapsed() < Duration::from_secs(20));
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    sigint(child.id());
    let o = finish(child.wait_with_output().unwrap());
    assert_eq!(o.code, 1, "{}", o.stderr);
    assert!(o.stderr.starts_with("ERROR interrupted: "), "{}", o.stderr);
    let served_before = f.node("a").unwrap().total_gets();
    assert!(served_before < 8);

    let o = ds(&["run", "-m", s(&m), "-s", s(&stage)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(f.node("a").unwrap().total_gets(), 8);
    assert_eq!(ds(&["status", "-s", s(&stage)]).stdout.lines().next().unwrap(), "done                 8");
}

#[test]
fn simfleet_serves_and_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fleet.conf");
    let mdir = dir.path().join("manifests");
    std::fs::write(
        &cfg,
        format!(
            "manifest_dir = {}\n[node alpha]\nlisten = 127.0.0.1:0\nfile = x/y.nc 1000\n[node beta]\nbandwidth = 100000\nfile = z.nc 5\n",
            mdir.display()
        ),
    )
    .unwrap();
    let mut child = Command::new(BIN)
        .args(["simfleet", "-c", s(&cfg)])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut nodes = Vec::new();
    for line in lines.by_ref() {
        let line = line.unwrap();
        if line == "ready" {
            break;
        }
        nodes.push(line);
    }
    assert_eq!(nodes.len(), 2);
    assert!(nodes[0].starts_with("node alpha http://127.0.0.1:"));
    let alpha = std::fs::read_to_string(mdir.join("alpha.manifest")).unwrap();
    assert!(alpha.starts_with("dataset alpha\nfile 'x/y.nc' 'http://127.0.0.1:"));

    let stage = dir.path().join("st");
    let o = ds(&["run", "-m", s(&mdir.join("alpha.manifest")), s(&mdir.join("beta.manifest")), "-s", s(&stage)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(std::fs::metadata(stage.join("x/y.nc")).unwrap().len(), 1000);

    sigint(child.id());
    assert!(child.wait().unwrap().success());
}
