//! Wiring for one staging directory: manifests in, plan, run, journal and
//! samples on disk.
//!
//! Layout under the staging directory:
//!
//! ```text
//! <staging>/<relative_path>              staged files
//! <staging>/<relative_path>.part         downloads in progress
//! <staging>/.datastage/journal           status journal
//! <staging>/.datastage/samples.csv       throughput samples, all runs
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::clock::SharedClock;
use crate::config::StageConfig;
use crate::credential::CredentialManager;
use crate::engine::{ConnectionProber, DataNodeConnection, Engine, JournalError, StatusJournal};
use crate::manifest::{estimate_replica_sizes, group_replicas, GroupError, Manifest, SizeEstimate};
use crate::metrics::{Recorder, ThroughputSample, SAMPLE_CSV_HEADER};
use crate::scheduler::{build_plan, run, PlanError, RunOptions, RunReport, TransferPlan};

pub const STATE_DIR: &str = ".datastage";

pub fn journal_path(staging_dir: &Path) -> PathBuf {
    staging_dir.join(STATE_DIR).join("journal")
}

pub fn samples_path(staging_dir: &Path) -> PathBuf {
    staging_dir.join(STATE_DIR).join("samples.csv")
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Conflict(#[from] GroupError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("samples file {path}: {reason}")]
    Samples { path: PathBuf, reason: String },
}

/// Loads the samples file into a fresh recorder; a missing file is empty.
pub fn load_samples(path: &Path, alpha: f64) -> Result<Recorder, SessionError> {
    let rec = Recorder::new(alpha);
    match std::fs::read_to_string(path) {
        Ok(text) => {
            rec.load_csv(&text).map_err(|reason| SessionError::Samples {
                path: path.to_path_buf(),
                reason,
            })?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => {
            return Err(SessionError::Samples {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        }
    }
    Ok(rec)
}

pub struct Session {
    pub config: StageConfig,
    pub staging_dir: PathBuf,
    pub conn: Arc<dyn DataNodeConnection>,
    pub creds: Arc<CredentialManager>,
    pub recorder: Arc<Recorder>,
    pub clock: SharedClock,
}

impl Session {
    pub fn open(
        config: StageConfig,
        staging_dir: impl Into<PathBuf>,
        conn: Arc<dyn DataNodeConnection>,
        creds: Arc<CredentialManager>,
    ) -> Result<Self, SessionError> {
        let staging_dir = staging_dir.into();
        let recorder = load_samples(&samples_path(&staging_dir), config.scheduler.ewma_alpha)?;
        Ok(Self {
            clock: creds.clock().clone(),
            config,
            staging_dir,
            conn,
            creds,
            recorder: Arc::new(recorder),
        })
    }

    /// Groups replicas and fills unknown sizes by probing.
    pub async fn estimate(
        &self,
        manifests: &[Manifest],
    ) -> Result<(Vec<crate::manifest::ReplicaSet>, SizeEstimate), SessionError> {
        let mut sets = group_replicas(manifests)?;
        let prober = Arc::new(ConnectionProber::new(self.conn.clone(), self.creds.clone()));
        let est =
            estimate_replica_sizes(&mut sets, prober, self.config.scheduler.per_node_limit).await;
        Ok((sets, est))
    }

    pub async fn plan(&self, manifests: &[Manifest]) -> Result<(TransferPlan, SizeEstimate), SessionError> {
        let (sets, est) = self.estimate(manifests).await?;
        let profiles = crate::scheduler::profiles_from(&self.recorder, &Default::default());
        let mut plan = build_plan(
            &sets,
            &self.config.scheduler,
            &est.summary,
            &profiles,
            self.clock.now(),
        )?;
        for w in &est.warnings {
            plan.warnings.push(format!(
                "size probe failed for {} at {}: {}",
                w.relative_path, w.url, w.error
            ));
        }
        Ok((plan, est))
    }

    pub fn engine(&self) -> Engine {
        Engine::new(
            self.conn.clone(),
            self.staging_dir.clone(),
            self.config.retry,
            self.clock.clone(),
        )
        .with_verify_mode(self.config.verify_mode)
    }

    /// Runs the plan against the on-disk journal and appends this run's
    /// samples to the samples file.
    pub async fn execute(&self, plan: TransferPlan, opts: RunOptions) -> Result<RunReport, SessionError> {
        let journal = Arc::new(StatusJournal::open(journal_path(&self.staging_dir))?);
        let before = self.recorder.samples().len();
        let report = run(
            plan,
            Arc::new(self.engine()),
            self.creds.clone(),
            journal,
            self.recorder.clone(),
            opts,
        )
        .await;
        self.save_samples(before)?;
        Ok(report)
    }

    fn save_samples(&self, skip: usize) -> Result<(), SessionError> {
        let new: Vec<_> = self.recorder.samples().into_iter().skip(skip).collect();
        append_samples(&samples_path(&self.staging_dir), &new)
    }
}

/// Appends samples to a samples file, writing the header if the file is new.
pub fn append_samples(path: &Path, samples: &[ThroughputSample]) -> Result<(), SessionError> {
    use std::io::Write;
    let err = |e: std::io::Error| SessionError::Samples {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    if samples.is_empty() {
        return Ok(());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(err)?;
    }
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(err)?;
    let mut text = String::new();
    if fresh {
        text.push_str(SAMPLE_CSV_HEADER);
        text.push('\n');
    }
    for s in samples {
        text.push_str(&s.to_csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(err)?;
    f.sync_data().map_err(err)
}
