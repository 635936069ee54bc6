//! Single-file transfer: download to a `.part` staging file, verify the
//! digest, atomically publish, retry within caps.
//!
//! A [`FileTask`] moves through [`TransferState`]:
//!
//! ```text
//! Pending -> InFlight -> Verifying -> Done
//!               |           |
//!               |           +-> FailedChecksum -> InFlight | PersistentChecksumMismatch
//!               +-> FailedTransport -> InFlight | Relocated
//!               +-> Relocated
//! ```
//!
//! A final (non-`.part`) file only ever appears through the rename after a
//! matching digest.

pub mod journal;
pub mod transport;

use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;

use crate::checksum::ChecksumType;
use crate::clock::SharedClock;
use crate::credential::{Credential, CredentialManager};
use crate::manifest::FileEntry;

pub use journal::{load_resume, JournalError, JournalRecord, JournalState, StatusJournal};
pub use transport::{
    ByteStream, ConnectionProber, DataNodeConnection, FetchError, HttpDataNode, RELOCATED_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferState {
    Pending,
    InFlight,
    Verifying,
    Done,
    FailedTransport,
    FailedChecksum,
    PersistentChecksumMismatch,
    Relocated,
}

impl TransferState {
    pub fn can_transition_to(self, to: TransferState) -> bool {
        use TransferState::*;
        matches!(
            (self, to),
            (Pending, InFlight)
                | (InFlight, Verifying)
                | (InFlight, FailedTransport)
                | (InFlight, Relocated)
                | (Verifying, Done)
                | (Verifying, FailedChecksum)
                | (FailedChecksum, InFlight)
                | (FailedChecksum, PersistentChecksumMismatch)
                | (FailedTransport, InFlight)
                | (FailedTransport, Relocated)
        )
    }

    /// No further work happens on this task object.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TransferState::Done | TransferState::PersistentChecksumMismatch | TransferState::Relocated
        )
    }

    pub fn can_start(self) -> bool {
        matches!(
            self,
            TransferState::Pending | TransferState::FailedTransport | TransferState::FailedChecksum
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: TransferState,
    pub to: TransferState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FileTask {
    pub entry: FileEntry,
    pub state: TransferState,
    pub transport_attempts: u32,
    pub checksum_attempts: u32,
    pub bytes_transferred: u64,
    /// Request-to-durable-write time; never includes post-hoc verification.
    pub transfer_seconds: Duration,
    pub verify_seconds: Duration,
    pub last_error: Option<String>,
}

impl FileTask {
    pub fn new(entry: FileEntry) -> Self {
        Self {
            entry,
            state: TransferState::Pending,
            transport_attempts: 0,
            checksum_attempts: 0,
            bytes_transferred: 0,
            transfer_seconds: Duration::ZERO,
            verify_seconds: Duration::ZERO,
            last_error: None,
        }
    }

    pub fn transition(&mut self, to: TransferState) -> Result<(), IllegalTransition> {
        if self.state.can_transition_to(to) {
            self.state = to;
            Ok(())
        } else {
            Err(IllegalTransition {
                from: self.state,
                to,
            })
        }
    }

    fn mv(&mut self, to: TransferState) {
        self.transition(to)
            .unwrap_or_else(|e| panic!("engine bug: {e} for {}", self.entry.relative_path));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_transport_retries: u32,
    pub max_checksum_retries: u32,
    pub backoff_base_ms: u64,
}

pub const BACKOFF_CAP_MS: u64 = 60_000;

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_transport_retries: 3,
            max_checksum_retries: 3,
            backoff_base_ms: 1_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before transport retry number `attempt` (1-based): doubles from
    /// the base, capped at one minute.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let shift = attempt.saturating_sub(1).min(32);
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << shift)
            .min(BACKOFF_CAP_MS);
        Duration::from_millis(ms)
    }

    /// Upper bound on downloads of one file from one location.
    pub fn max_downloads(&self) -> u32 {
        (self.max_transport_retries + 1) * (self.max_checksum_retries + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyMode {
    /// Digest computed while writing; `verify_seconds` stays zero.
    #[default]
    Streamed,
    /// Write first, then re-read the file to verify, timed separately.
    Posthoc,
}

impl std::str::FromStr for VerifyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "streamed" => Ok(VerifyMode::Streamed),
            "posthoc" => Ok(VerifyMode::Posthoc),
            other => Err(format!("unknown verify_mode `{other}`")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("credential expired")]
    CredentialExpired,
    #[error("local storage failure at {path}: {source}")]
    StorageFull {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("data node gone")]
    NodeGone { relocated_to: Option<String> },
    #[error("path not found on data node")]
    NotFound,
}

impl TransferError {
    /// Local write failures stop the whole run; everything else is confined
    /// to one task.
    pub fn aborts_run(&self) -> bool {
        matches!(self, TransferError::StorageFull { .. })
    }
}

pub fn final_path(staging_dir: &Path, relative_path: &str) -> PathBuf {
    staging_dir.join(relative_path)
}

pub fn part_path(staging_dir: &Path, relative_path: &str) -> PathBuf {
    staging_dir.join(format!("{relative_path}.part"))
}

/// Streams `path` through the digest and compares case-insensitively.
pub fn verify(path: &Path, checksum_type: ChecksumType, checksum_hex: &str) -> io::Result<bool> {
    use std::io::Read;
    let mut file = std::fs::File::open(path)?;
    let mut hasher = checksum_type.hasher();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize_hex() == checksum_hex.to_ascii_lowercase())
}

fn storage(path: &Path, source: io::Error) -> TransferError {
    TransferError::StorageFull {
        path: path.to_path_buf(),
        source,
    }
}

async fn remove_quietly(path: &Path) {
    let _ = tokio::fs::remove_file(path).await;
}

/// Why `run_task` stopped working on a task.
#[derive(Debug)]
pub enum TaskEnd {
    /// `task.state` is Done, PersistentChecksumMismatch, or FailedTransport
    /// with the retry budget spent.
    Settled,
    Error(TransferError),
}

#[derive(Clone)]
pub struct Engine {
    conn: Arc<dyn DataNodeConnection>,
    staging_dir: PathBuf,
    policy: RetryPolicy,
    verify_mode: VerifyMode,
    clock: SharedClock,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("staging_dir", &self.staging_dir)
            .field("policy", &self.policy)
            .field("verify_mode", &self.verify_mode)
            .finish()
    }
}

impl Engine {
    pub fn new(
        conn: Arc<dyn DataNodeConnection>,
        staging_dir: impl Into<PathBuf>,
        policy: RetryPolicy,
        clock: SharedClock,
    ) -> Self {
        Self {
            conn,
            staging_dir: staging_dir.into(),
            policy,
            verify_mode: VerifyMode::default(),
            clock,
        }
    }

    pub fn with_verify_mode(mut self, mode: VerifyMode) -> Self {
        self.verify_mode = mode;
        self
    }

    pub fn staging_dir(&self) -> &Path {
        &self.staging_dir
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn connection(&self) -> &Arc<dyn DataNodeConnection> {
        &self.conn
    }

    /// One download attempt. On return `task.state` is Done, FailedChecksum,
    /// PersistentChecksumMismatch, FailedTransport or Relocated, unless the
    /// credential was already stale, in which case nothing was sent.
    pub async fn transfer_file(
        &self,
        task: &mut FileTask,
        cred: &Credential,
    ) -> Result<(), TransferError> {
        assert!(
            task.state.can_start(),
            "transfer_file on task in state {:?}",
            task.state
        );
        if cred.expires_at <= self.clock.now() {
            return Err(TransferError::CredentialExpired);
        }
        task.mv(TransferState::InFlight);

        let rel = task.entry.relative_path.clone();
        let part = part_path(&self.staging_dir, &rel);
        let started = Instant::now();

        let mut body = match self.conn.fetch(&task.entry.url, cred).await {
            Ok(body) => body,
            Err(e) => return self.fetch_failed(task, e),
        };

        if let Some(parent) = part.parent() {
            tokio::fs::create_dir_all(parent)
                .await
                .map_err(|e| storage(parent, e))?;
        }
        let mut file = tokio::fs::File::create(&part)
            .await
            .map_err(|e| storage(&part, e))?;
        let mut hasher = match self.verify_mode {
            VerifyMode::Streamed => Some(task.entry.checksum_type.hasher()),
            VerifyMode::Posthoc => None,
        };
        let mut written: u64 = 0;
        while let Some(chunk) = body.next().await {
            match chunk {
                Ok(bytes) => {
                    if let Err(e) = file.write_all(&bytes).await {
                        drop(file);
                        remove_quietly(&part).await;
                        return Err(storage(&part, e));
                    }
                    if let Some(h) = hasher.as_mut() {
                        h.update(&bytes);
                    }
                    written += bytes.len() as u64;
                }
                Err(e) => {
                    drop(file);
                    remove_quietly(&part).await;
                    return self.fetch_failed(task, e);
                }
            }
        }
        let synced = async {
            file.flush().await?;
            file.sync_data().await
        }
        .await;
        drop(file);
        if let Err(e) = synced {
            remove_quietly(&part).await;
            return Err(storage(&part, e));
        }
        task.transfer_seconds = started.elapsed();
        task.bytes_transferred = written;
        task.mv(TransferState::Verifying);

        let matches = match hasher {
            Some(h) => {
                task.verify_seconds = Duration::ZERO;
                h.finalize_hex() == task.entry.checksum_hex
            }
            None => {
                let verify_start = Instant::now();
                let (p, ty, hex) = (
                    part.clone(),
                    task.entry.checksum_type,
                    task.entry.checksum_hex.clone(),
                );
                let ok = tokio::task::spawn_blocking(move || verify(&p, ty, &hex))
                    .await
                    .expect("verify task panicked")
                    .map_err(|e| storage(&part, e))?;
                task.verify_seconds = verify_start.elapsed();
                ok
            }
        };

        if matches {
            let dest = final_path(&self.staging_dir, &rel);
            tokio::fs::rename(&part, &dest)
                .await
                .map_err(|e| storage(&dest, e))?;
            task.last_error = None;
            task.mv(TransferState::Done);
        } else {
            remove_quietly(&part).await;
            task.checksum_attempts += 1;
            task.last_error = Some(format!(
                "checksum mismatch on attempt {} from {}",
                task.checksum_attempts, task.entry.url
            ));
            task.mv(TransferState::FailedChecksum);
            if task.checksum_attempts > self.policy.max_checksum_retries {
                task.mv(TransferState::PersistentChecksumMismatch);
            }
        }
        Ok(())
    }

    fn fetch_failed(&self, task: &mut FileTask, e: FetchError) -> Result<(), TransferError> {
        task.last_error = Some(e.to_string());
        match e {
            FetchError::Gone { relocated_to } => {
                task.mv(TransferState::Relocated);
                Err(TransferError::NodeGone { relocated_to })
            }
            FetchError::CredentialRejected => {
                task.transport_attempts += 1;
                task.mv(TransferState::FailedTransport);
                Err(TransferError::CredentialExpired)
            }
            FetchError::NotFound => {
                task.transport_attempts += 1;
                task.mv(TransferState::FailedTransport);
                Err(TransferError::NotFound)
            }
            FetchError::Status(_) | FetchError::Transport(_) => {
                task.transport_attempts += 1;
                task.mv(TransferState::FailedTransport);
                Ok(())
            }
        }
    }

    /// Retries one task at its current location until it settles or hits an
    /// error that needs the coordinator. Transport retries back off
    /// exponentially; checksum retries go again immediately.
    pub async fn run_task(&self, task: &mut FileTask, creds: &CredentialManager) -> TaskEnd {
        loop {
            // Refreshing is the coordinator's job; only bootstrap here.
            let cred = match creds.current().map_or_else(|| creds.ensure_fresh(), Ok) {
                Ok(c) => c,
                Err(_) => return TaskEnd::Error(TransferError::CredentialExpired),
            };
            if let Err(e) = self.transfer_file(task, &cred).await {
                return TaskEnd::Error(e);
            }
            match task.state {
                TransferState::Done | TransferState::PersistentChecksumMismatch => {
                    return TaskEnd::Settled
                }
                TransferState::FailedChecksum => continue,
                TransferState::FailedTransport => {
                    if task.transport_attempts > self.policy.max_transport_retries {
                        return TaskEnd::Settled;
                    }
                    tokio::time::sleep(self.policy.backoff(task.transport_attempts)).await;
                }
                other => unreachable!("transfer_file left task in {other:?}"),
            }
        }
    }
}
