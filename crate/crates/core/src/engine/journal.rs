//! Append-only status journal.
//!
//! One LF-terminated record per settled file:
//!
//! ```text
//! v1 <state> '<relative_path>' <checksum_type>:<hex> <bytes> <transfer_ms> <verify_ms> <iso8601_utc>
//! ```
//!
//! A trailing line without its newline is a torn write from a crash; it is
//! ignored on load and cut off before the next append. Later records for the
//! same path supersede earlier ones.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, SecondsFormat, Utc};

use crate::checksum::ChecksumType;
use crate::engine::{FileTask, TransferState};
use crate::manifest::{FileEntry, Manifest};

pub const RECORD_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JournalState {
    Done,
    PersistentChecksumMismatch,
}

impl JournalState {
    pub fn as_str(self) -> &'static str {
        match self {
            JournalState::Done => "done",
            JournalState::PersistentChecksumMismatch => "checksum_mismatch",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "done" => Some(JournalState::Done),
            "checksum_mismatch" => Some(JournalState::PersistentChecksumMismatch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalRecord {
    pub state: JournalState,
    pub relative_path: String,
    pub checksum_type: ChecksumType,
    pub checksum_hex: String,
    pub bytes: u64,
    pub transfer_ms: u64,
    pub verify_ms: u64,
    pub completed_at: DateTime<Utc>,
}

impl JournalRecord {
    pub fn from_task(task: &FileTask, completed_at: DateTime<Utc>) -> Option<Self> {
        let state = match task.state {
            TransferState::Done => JournalState::Done,
            TransferState::PersistentChecksumMismatch => JournalState::PersistentChecksumMismatch,
            _ => return None,
        };
        Some(Self {
            state,
            relative_path: task.entry.relative_path.clone(),
            checksum_type: task.entry.checksum_type,
            checksum_hex: task.entry.checksum_hex.clone(),
            bytes: task.bytes_transferred,
            transfer_ms: task.transfer_seconds.as_millis() as u64,
            verify_ms: task.verify_seconds.as_millis() as u64,
            completed_at,
        })
    }

    /// Without the trailing newline.
    pub fn to_line(&self) -> String {
        format!(
            "{RECORD_VERSION} {} '{}' {}:{} {} {} {} {}",
            self.state.as_str(),
            self.relative_path,
            self.checksum_type,
            self.checksum_hex,
            self.bytes,
            self.transfer_ms,
            self.verify_ms,
            self.completed_at.to_rfc3339_opts(SecondsFormat::Millis, true)
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let rest = line.strip_prefix(RECORD_VERSION)?.strip_prefix(' ')?;
        let (state, rest) = rest.split_once(' ')?;
        let state = JournalState::parse(state)?;
        let rest = rest.strip_prefix('\'')?;
        let (path, rest) = rest.split_once('\'')?;
        let mut fields = rest.strip_prefix(' ')?.split(' ');
        let (ty, hex) = fields.next()?.split_once(':')?;
        let checksum_type: ChecksumType = ty.parse().ok()?;
        if !checksum_type.is_valid_hex(hex) {
            return None;
        }
        let bytes = fields.next()?.parse().ok()?;
        let transfer_ms = fields.next()?.parse().ok()?;
        let verify_ms = fields.next()?.parse().ok()?;
        let completed_at = DateTime::parse_from_rfc3339(fields.next()?)
            .ok()?
            .with_timezone(&Utc);
        if fields.next().is_some() || path.is_empty() {
            return None;
        }
        Some(Self {
            state,
            relative_path: path.to_string(),
            checksum_type,
            checksum_hex: hex.to_string(),
            bytes,
            transfer_ms,
            verify_ms,
            completed_at,
        })
    }

    pub fn matches(&self, entry: &FileEntry) -> bool {
        self.checksum_type == entry.checksum_type && self.checksum_hex == entry.checksum_hex
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal {path} is corrupt at line {line}")]
    Corrupt { path: PathBuf, line: usize },
    #[error("journal I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("only settled tasks are journaled, got {0:?}")]
    NotSettled(TransferState),
}

/// Complete records of `bytes` plus the length of that complete prefix.
fn parse_complete(path: &Path, bytes: &[u8]) -> Result<(HashMap<String, JournalRecord>, usize), JournalError> {
    let complete_len = bytes
        .iter()
        .rposition(|&b| b == b'\n')
        .map(|i| i + 1)
        .unwrap_or(0);
    let mut index = HashMap::new();
    for (i, line) in bytes[..complete_len].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec = std::str::from_utf8(line)
            .ok()
            .and_then(JournalRecord::parse_line)
            .ok_or_else(|| JournalError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
            })?;
        index.insert(rec.relative_path.clone(), rec);
    }
    Ok((index, complete_len))
}

pub struct StatusJournal {
    path: PathBuf,
    file: Mutex<Option<File>>,
    index: RwLock<HashMap<String, JournalRecord>>,
}

impl std::fmt::Debug for StatusJournal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StatusJournal")
            .field("path", &self.path)
            .field("records", &self.index.read().unwrap().len())
            .finish()
    }
}

impl StatusJournal {
    /// Opens for appending, creating the file if absent. A torn tail is
    /// truncated away so the next record starts on a fresh line.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, JournalError> {
        let path = path.into();
        let io_err = |source| JournalError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(e)),
        };
        let (index, complete_len) = parse_complete(&path, &bytes)?;
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err)?;
        if complete_len < bytes.len() {
            file.set_len(complete_len as u64).map_err(io_err)?;
            file.sync_data().map_err(io_err)?;
        }
        let mut file = file;
        use std::io::Seek;
        file.seek(io::SeekFrom::End(0)).map_err(io_err)?;
        Ok(Self {
            path,
            file: Mutex::new(Some(file)),
            index: RwLock::new(index),
        })
    }

    /// Read-only view; an absent file is an empty journal.
    pub fn load(path: impl Into<PathBuf>) -> Result<Self, JournalError> {
        let path = path.into();
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(source) => return Err(JournalError::Io { path, source }),
        };
        let (index, _) = parse_complete(&path, &bytes)?;
        Ok(Self {
            path,
            file: Mutex::new(None),
            index: RwLock::new(index),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends and syncs one record; the index changes only after the write
    /// is durable.
    pub fn append(&self, rec: &JournalRecord) -> Result<(), JournalError> {
        let mut line = rec.to_line();
        line.push('\n');
        let mut guard = self.file.lock().unwrap();
        let file = guard.as_mut().ok_or_else(|| JournalError::Io {
            path: self.path.clone(),
            source: io::Error::new(io::ErrorKind::PermissionDenied, "journal opened read-only"),
        })?;
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|source| JournalError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.index
            .write()
            .unwrap()
            .insert(rec.relative_path.clone(), rec.clone());
        Ok(())
    }

    pub fn record(&self, task: &FileTask, completed_at: DateTime<Utc>) -> Result<(), JournalError> {
        let rec = JournalRecord::from_task(task, completed_at)
            .ok_or(JournalError::NotSettled(task.state))?;
        self.append(&rec)
    }

    pub fn get(&self, relative_path: &str) -> Option<JournalRecord> {
        self.index.read().unwrap().get(relative_path).cloned()
    }

    /// Done with the checksum the manifest currently publishes.
    pub fn is_done(&self, entry: &FileEntry) -> bool {
        self.get(&entry.relative_path)
            .is_some_and(|r| r.state == JournalState::Done && r.matches(entry))
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<JournalRecord> {
        let mut v: Vec<_> = self.index.read().unwrap().values().cloned().collect();
        v.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
        v
    }

    pub fn state_counts(&self) -> BTreeMap<JournalState, usize> {
        let mut counts = BTreeMap::new();
        for r in self.index.read().unwrap().values() {
            *counts.entry(r.state).or_default() += 1;
        }
        counts
    }
}

/// Manifest entries still to fetch: everything not recorded Done under the
/// checksum the manifest publishes now. Manifest order is kept.
pub fn load_resume(journal: &StatusJournal, m: &Manifest) -> Vec<FileEntry> {
    m.entries
        .iter()
        .filter(|e| !journal.is_done(e))
        .cloned()
        .collect()
}
