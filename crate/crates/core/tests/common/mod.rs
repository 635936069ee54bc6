#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, Utc};
use datastage::engine::{HttpDataNode, StatusJournal};
use datastage::manifest::{group_replicas, parse_manifest, summarize_replicas, Manifest};
use datastage::scheduler::{self, Profiles, RunOptions};
use datastage::simnode::{start_fleet, Fleet, SimNodeConfig};
use datastage::{
    CredentialManager, CredentialPolicy, Engine, LocalIssuer, ManualClock, Recorder, RetryPolicy,
    Clock, RunReport, SchedulerConfig, SharedClock,
};

pub fn t0() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2013-11-14T18:52:07Z")
        .unwrap()
        .with_timezone(&Utc)
}

pub fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        backoff_base_ms: 5,
        ..RetryPolicy::default()
    }
}

pub struct Rig {
    pub fleet: Fleet,
    pub clock: Arc<ManualClock>,
    pub issuer: Arc<LocalIssuer>,
    pub creds: Arc<CredentialManager>,
    pub conn: Arc<HttpDataNode>,
    pub dir: tempfile::TempDir,
    pub retry: RetryPolicy,
}

pub async fn rig(configs: Vec<SimNodeConfig>) -> Rig {
    let clock = Arc::new(ManualClock::new(t0()));
    let shared: SharedClock = clock.clone();
    let fleet = start_fleet(configs, shared.clone()).await.unwrap();
    let issuer = Arc::new(LocalIssuer::new(shared.clone()));
    let creds = Arc::new(CredentialManager::new(
        issuer.clone(),
        CredentialPolicy::default(),
        shared,
    ));
    Rig {
        fleet,
        clock,
        issuer,
        creds,
        conn: Arc::new(HttpDataNode::new()),
        dir: tempfile::tempdir().unwrap(),
        retry: fast_retry(),
    }
}

impl Rig {
    pub fn shared_clock(&self) -> SharedClock {
        self.clock.clone()
    }

    pub fn engine(&self) -> Engine {
        Engine::new(
            self.conn.clone(),
            self.dir.path(),
            self.retry,
            self.shared_clock(),
        )
    }

    pub fn journal(&self) -> Arc<StatusJournal> {
        Arc::new(StatusJournal::open(self.dir.path().join(".datastage/journal")).unwrap())
    }

    /// Manifest of the whole catalog of node `name`, sizes declared.
    pub fn manifest(&self, name: &str) -> Manifest {
        let text = self
            .fleet
            .node(name)
            .unwrap()
            .publish_manifest(name, &[], true)
            .unwrap();
        parse_manifest(&text).unwrap()
    }

    pub async fn run(
        &self,
        manifests: &[Manifest],
        config: SchedulerConfig,
        opts: RunOptions,
    ) -> RunReport {
        self.run_with(manifests, config, opts, &Recorder::new(0.3).into()).await
    }

    pub async fn run_with(
        &self,
        manifests: &[Manifest],
        config: SchedulerConfig,
        opts: RunOptions,
        recorder: &Arc<Recorder>,
    ) -> RunReport {
        let sets = group_replicas(manifests).unwrap();
        let summary = summarize_replicas(&sets);
        let plan = scheduler::build_plan(&sets, &config, &summary, &Profiles::new(), self.clock.now())
            .unwrap();
        scheduler::run(
            plan,
            Arc::new(self.engine()),
            self.creds.clone(),
            self.journal(),
            recorder.clone(),
            opts,
        )
        .await
    }
}
