//! Dataset manifests: parsing, replica grouping and volume estimation.
//!
//! A manifest lists every file of a dataset with the URL it is served from
//! and its published checksum:
//!
//! ```text
//! # comment
//! dataset <dataset_id>
//! file '<relative_path>' '<url>' '<md5|sha256>' '<hex>'[ <size_bytes>]
//! ```
//!
//! Fields are single-quoted and may not contain quotes. The optional trailing
//! size is an unquoted decimal byte count.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::checksum::ChecksumType;
use crate::units;

/// A data node, identified by the authority (`host[:port]`) of its URLs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn from_url(url: &str) -> Option<NodeId> {
        let parsed = url::Url::parse(url).ok()?;
        let host = parsed.host_str()?;
        Some(match parsed.port() {
            Some(port) => NodeId(format!("{host}:{port}")),
            None => NodeId(host.to_string()),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileEntry {
    pub relative_path: String,
    pub url: String,
    pub checksum_type: ChecksumType,
    pub checksum_hex: String,
    pub size_bytes: Option<u64>,
}

impl FileEntry {
    pub fn node_id(&self) -> NodeId {
        NodeId::from_url(&self.url).unwrap_or_else(|| NodeId(String::new()))
    }

    pub fn to_line(&self) -> String {
        let mut line = format!(
            "file '{}' '{}' '{}' '{}'",
            self.relative_path, self.url, self.checksum_type, self.checksum_hex
        );
        if let Some(size) = self.size_bytes {
            line.push(' ');
            line.push_str(&size.to_string());
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_id: String,
    pub entries: Vec<FileEntry>,
    /// Node of the first entry; empty for an empty manifest.
    pub source_node: String,
}

impl Manifest {
    pub fn new(dataset_id: impl Into<String>, entries: Vec<FileEntry>) -> Self {
        let source_node = entries
            .first()
            .map(|e| e.node_id().0)
            .unwrap_or_default();
        Manifest {
            dataset_id: dataset_id.into(),
            entries,
            source_node,
        }
    }

    /// Canonical text form; `parse_manifest` accepts it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = format!("dataset {}\n", self.dataset_id);
        for e in &self.entries {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    /// 1-based.
    pub line: usize,
    pub reason: ParseReason,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseReason {
    #[error("missing `dataset <id>` header")]
    MissingHeader,
    #[error("malformed dataset header")]
    BadHeader,
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("field count: expected 4 quoted fields and an optional size, found {0}")]
    FieldCount(usize),
    #[error("bad quoting")]
    BadQuoting,
    #[error("unknown checksum type `{0}`")]
    UnknownChecksumType(String),
    #[error("bad hex length: {checksum_type} digest needs {expected} hex characters, found {found}")]
    BadHexLength {
        checksum_type: ChecksumType,
        expected: usize,
        found: usize,
    },
    #[error("non-hex character in checksum")]
    BadHex,
    #[error("bad size `{0}`")]
    BadSize(String),
    #[error("bad path `{0}`: {1}")]
    BadPath(String, &'static str),
    #[error("bad url `{0}`")]
    BadUrl(String),
    #[error("duplicate entry for ('{0}', '{1}')")]
    Duplicate(String, String),
    #[error("checksum conflict for '{0}': first seen on line {1}")]
    ChecksumConflict(String, usize),
    #[error("size conflict for '{0}': first seen on line {1}")]
    SizeConflict(String, usize),
}

/// Path rule: relative POSIX path, no `..`, `.` or empty segments, no quotes.
pub fn validate_relative_path(path: &str) -> Result<(), &'static str> {
    if path.is_empty() {
        return Err("empty");
    }
    if path.starts_with('/') {
        return Err("absolute");
    }
    if path.contains('\'') {
        return Err("contains a quote");
    }
    if path.chars().any(|c| c.is_control()) {
        return Err("contains a control character");
    }
    for seg in path.split('/') {
        match seg {
            "" => return Err("empty segment"),
            "." => return Err("`.` segment"),
            ".." => return Err("`..` segment"),
            _ => {}
        }
    }
    Ok(())
}

enum Token<'a> {
    Quoted(&'a str),
    Bare(&'a str),
}

fn tokenize(rest: &str) -> Result<Vec<Token<'_>>, ParseReason> {
    let mut tokens = Vec::new();
    let mut s = rest;
    loop {
        s = s.trim_start_matches([' ', '\t']);
        if s.is_empty() {
            return Ok(tokens);
        }
        if let Some(body) = s.strip_prefix('\'') {
            let close = body.find('\'').ok_or(ParseReason::BadQuoting)?;
            let after = &body[close + 1..];
            if !(after.is_empty() || after.starts_with([' ', '\t'])) {
                return Err(ParseReason::BadQuoting);
            }
            tokens.push(Token::Quoted(&body[..close]));
            s = after;
        } else {
            let end = s.find([' ', '\t']).unwrap_or(s.len());
            let word = &s[..end];
            if word.contains('\'') {
                return Err(ParseReason::BadQuoting);
            }
            tokens.push(Token::Bare(word));
            s = &s[end..];
        }
    }
}

fn parse_file_line(rest: &str) -> Result<FileEntry, ParseReason> {
    let tokens = tokenize(rest)?;
    let quoted = tokens
        .iter()
        .filter(|t| matches!(t, Token::Quoted(_)))
        .count();
    if quoted != 4 || tokens.len() > 5 {
        return Err(ParseReason::FieldCount(tokens.len()));
    }
    let mut fields = Vec::with_capacity(4);
    for t in &tokens[..4] {
        match t {
            Token::Quoted(s) => fields.push(*s),
            Token::Bare(_) => return Err(ParseReason::BadQuoting),
        }
    }
    let size_bytes = match tokens.get(4) {
        None => None,
        Some(Token::Bare(s)) => {
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
                return Err(ParseReason::BadSize(s.to_string()));
            }
            Some(s.parse::<u64>().map_err(|_| ParseReason::BadSize(s.to_string()))?)
        }
        Some(Token::Quoted(_)) => return Err(ParseReason::BadQuoting),
    };
    let (path, url, kind, hex) = (fields[0], fields[1], fields[2], fields[3]);
    validate_relative_path(path).map_err(|why| ParseReason::BadPath(path.to_string(), why))?;
    if NodeId::from_url(url).is_none() {
        return Err(ParseReason::BadUrl(url.to_string()));
    }
    let checksum_type: ChecksumType = kind
        .parse()
        .map_err(|_| ParseReason::UnknownChecksumType(kind.to_string()))?;
    let hex = hex.to_ascii_lowercase();
    if hex.len() != checksum_type.hex_len() {
        return Err(ParseReason::BadHexLength {
            checksum_type,
            expected: checksum_type.hex_len(),
            found: hex.len(),
        });
    }
    if !checksum_type.is_valid_hex(&hex) {
        return Err(ParseReason::BadHex);
    }
    Ok(FileEntry {
        relative_path: path.to_string(),
        url: url.to_string(),
        checksum_type,
        checksum_hex: hex,
        size_bytes,
    })
}

pub fn parse_manifest(text: &str) -> Result<Manifest, ParseError> {
    let mut dataset_id: Option<String> = None;
    let mut entries: Vec<FileEntry> = Vec::new();
    let mut seen_pairs: HashSet<(String, String)> = HashSet::new();
    // path -> (line, entry index)
    let mut first_seen: HashMap<String, (usize, usize)> = HashMap::new();
    let mut last_line = 0;

    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |reason| ParseError {
            line: line_no,
            reason,
        };
        let (directive, rest) = match trimmed.find([' ', '\t']) {
            Some(i) => (&trimmed[..i], &trimmed[i..]),
            None => (trimmed, ""),
        };
        match (directive, &dataset_id) {
            ("dataset", None) => {
                let id = rest.trim();
                if id.is_empty() || id.contains([' ', '\t', '\'']) {
                    return Err(err(ParseReason::BadHeader));
                }
                dataset_id = Some(id.to_string());
            }
            ("dataset", Some(_)) => return Err(err(ParseReason::BadHeader)),
            ("file", None) => return Err(err(ParseReason::MissingHeader)),
            ("file", Some(_)) => {
                let entry = parse_file_line(rest).map_err(err)?;
                let pair = (entry.relative_path.clone(), entry.url.clone());
                if !seen_pairs.insert(pair) {
                    return Err(err(ParseReason::Duplicate(
                        entry.relative_path,
                        entry.url,
                    )));
                }
                if let Some(&(first_line, first_idx)) = first_seen.get(&entry.relative_path) {
                    let first: &FileEntry = &entries[first_idx];
                    if first.checksum_type != entry.checksum_type
                        || first.checksum_hex != entry.checksum_hex
                    {
                        return Err(err(ParseReason::ChecksumConflict(
                            entry.relative_path,
                            first_line,
                        )));
                    }
                    if let (Some(a), Some(b)) = (first.size_bytes, entry.size_bytes) {
                        if a != b {
                            return Err(err(ParseReason::SizeConflict(
                                entry.relative_path,
                                first_line,
                            )));
                        }
                    }
                } else {
                    first_seen.insert(entry.relative_path.clone(), (line_no, entries.len()));
                }
                entries.push(entry);
            }
            (other, _) => return Err(err(ParseReason::UnknownDirective(other.to_string()))),
        }
    }

    let dataset_id = dataset_id.ok_or(ParseError {
        line: last_line.max(1),
        reason: ParseReason::MissingHeader,
    })?;
    Ok(Manifest::new(dataset_id, entries))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub url: String,
    pub node: NodeId,
}

/// All known copies of one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaSet {
    pub relative_path: String,
    pub checksum_type: ChecksumType,
    pub checksum_hex: String,
    pub size_bytes: Option<u64>,
    pub locations: Vec<Location>,
}

impl ReplicaSet {
    pub fn entry_for(&self, location: &Location) -> FileEntry {
        FileEntry {
            relative_path: self.relative_path.clone(),
            url: location.url.clone(),
            checksum_type: self.checksum_type,
            checksum_hex: self.checksum_hex.clone(),
            size_bytes: self.size_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictingCopy {
    pub url: String,
    pub node: NodeId,
    pub checksum_type: ChecksumType,
    pub checksum_hex: String,
}

/// Replicas of one path that disagree on the published checksum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaConflict {
    pub relative_path: String,
    pub copies: Vec<ConflictingCopy>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{} path(s) have replicas with disagreeing checksums: {}", conflicts.len(), conflicts.iter().map(|c| c.relative_path.as_str()).collect::<Vec<_>>().join(", "))]
pub struct GroupError {
    pub conflicts: Vec<ReplicaConflict>,
}

/// Merges entries across manifests by relative path, in first-seen order.
pub fn group_replicas(manifests: &[Manifest]) -> Result<Vec<ReplicaSet>, GroupError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_path: HashMap<String, Vec<&FileEntry>> = HashMap::new();
    for m in manifests {
        for e in &m.entries {
            by_path
                .entry(e.relative_path.clone())
                .or_insert_with(|| {
                    order.push(e.relative_path.clone());
                    Vec::new()
                })
                .push(e);
        }
    }

    let mut sets = Vec::with_capacity(order.len());
    let mut conflicts = Vec::new();
    for path in order {
        let copies = &by_path[&path];
        let first = copies[0];
        let agree = copies.iter().all(|c| {
            c.checksum_type == first.checksum_type && c.checksum_hex == first.checksum_hex
        });
        if !agree {
            conflicts.push(ReplicaConflict {
                relative_path: path,
                copies: copies
                    .iter()
                    .map(|c| ConflictingCopy {
                        url: c.url.clone(),
                        node: c.node_id(),
                        checksum_type: c.checksum_type,
                        checksum_hex: c.checksum_hex.clone(),
                    })
                    .collect(),
            });
            continue;
        }
        let mut locations: Vec<Location> = Vec::new();
        for c in copies {
            if !locations.iter().any(|l| l.url == c.url) {
                locations.push(Location {
                    url: c.url.clone(),
                    node: c.node_id(),
                });
            }
        }
        sets.push(ReplicaSet {
            relative_path: path,
            checksum_type: first.checksum_type,
            checksum_hex: first.checksum_hex.clone(),
            size_bytes: copies.iter().find_map(|c| c.size_bytes),
            locations,
        });
    }
    if conflicts.is_empty() {
        Ok(sets)
    } else {
        Err(GroupError { conflicts })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub file_count: u64,
    /// Distinct non-root directory prefixes of all relative paths.
    pub dir_count: u64,
    /// Sum of known sizes; a lower bound when `unknown_size_count > 0`.
    pub total_bytes: u64,
    pub unknown_size_count: u64,
}

impl DatasetSummary {
    pub fn is_lower_bound(&self) -> bool {
        self.unknown_size_count > 0
    }

    /// Number of top-level transfer tasks the way a bulk transfer service
    /// counts them: every file, every directory, plus the request itself.
    pub fn total_tasks(&self) -> u64 {
        self.file_count + self.dir_count + 1
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "files: {}\ndirectories: {}\nbytes: {} ({})\n",
            self.file_count,
            self.dir_count,
            self.total_bytes,
            units::format_tb(self.total_bytes)
        );
        if self.is_lower_bound() {
            out.push_str(&format!(
                "unknown sizes: {} (byte total is a lower bound)\n",
                self.unknown_size_count
            ));
        }
        out
    }
}

pub fn summarize_paths<'a>(items: impl IntoIterator<Item = (&'a str, Option<u64>)>) -> DatasetSummary {
    let mut sizes: HashMap<&str, Option<u64>> = HashMap::new();
    let mut dirs: BTreeSet<&str> = BTreeSet::new();
    for (path, size) in items {
        let slot = sizes.entry(path).or_insert(None);
        if slot.is_none() {
            *slot = size;
        }
        for (i, b) in path.bytes().enumerate() {
            if b == b'/' {
                dirs.insert(&path[..i]);
            }
        }
    }
    DatasetSummary {
        file_count: sizes.len() as u64,
        dir_count: dirs.len() as u64,
        total_bytes: sizes.values().flatten().sum(),
        unknown_size_count: sizes.values().filter(|s| s.is_none()).count() as u64,
    }
}

pub fn summarize(m: &Manifest) -> DatasetSummary {
    summarize_paths(
        m.entries
            .iter()
            .map(|e| (e.relative_path.as_str(), e.size_bytes)),
    )
}

pub fn summarize_replicas(sets: &[ReplicaSet]) -> DatasetSummary {
    summarize_paths(sets.iter().map(|s| (s.relative_path.as_str(), s.size_bytes)))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProbeError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
}

/// Issues HEAD-equivalent size queries. Must be safe for concurrent use.
#[async_trait]
pub trait SizeProber: Send + Sync {
    async fn probe_size(&self, url: &str) -> Result<u64, ProbeError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeWarning {
    pub relative_path: String,
    pub url: String,
    pub error: ProbeError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeEstimate {
    pub summary: DatasetSummary,
    pub probes_issued: usize,
    pub warnings: Vec<ProbeWarning>,
}

/// Fills unknown sizes in place by probing each location in turn until one
/// answers. At most `per_node_limit` probes run concurrently against a node.
pub async fn estimate_replica_sizes(
    sets: &mut [ReplicaSet],
    prober: Arc<dyn SizeProber>,
    per_node_limit: usize,
) -> SizeEstimate {
    let per_node_limit = per_node_limit.max(1);
    let unknown: Vec<usize> = sets
        .iter()
        .enumerate()
        .filter(|(_, s)| s.size_bytes.is_none())
        .map(|(i, _)| i)
        .collect();
    let mut probes_issued = 0usize;
    let mut warnings = Vec::new();
    let mut pending: Vec<(usize, usize)> = unknown.iter().map(|&i| (i, 0)).collect();

    // Each round probes the next untried location of every still-unknown set.
    while !pending.is_empty() {
        let mut by_node: HashMap<NodeId, Vec<(usize, String)>> = HashMap::new();
        for &(set_idx, loc_idx) in &pending {
            let loc = &sets[set_idx].locations[loc_idx];
            by_node
                .entry(loc.node.clone())
                .or_default()
                .push((set_idx, loc.url.clone()));
        }
        let node_jobs = by_node.into_values().map(|jobs| {
            let prober = prober.clone();
            async move {
                stream::iter(jobs)
                    .map(|(set_idx, url)| {
                        let prober = prober.clone();
                        async move {
                            let res = prober.probe_size(&url).await;
                            (set_idx, url, res)
                        }
                    })
                    .buffer_unordered(per_node_limit)
                    .collect::<Vec<_>>()
                    .await
            }
        });
        let results: Vec<_> = futures::future::join_all(node_jobs)
            .await
            .into_iter()
            .flatten()
            .collect();
        probes_issued += results.len();

        let mut next = Vec::new();
        for (set_idx, url, res) in results {
            match res {
                Ok(size) => sets[set_idx].size_bytes = Some(size),
                Err(error) => {
                    warnings.push(ProbeWarning {
                        relative_path: sets[set_idx].relative_path.clone(),
                        url,
                        error,
                    });
                    let loc_idx = pending
                        .iter()
                        .find(|(s, _)| *s == set_idx)
                        .map(|(_, l)| *l)
                        .unwrap_or(0);
                    if loc_idx + 1 < sets[set_idx].locations.len() {
                        next.push((set_idx, loc_idx + 1));
                    }
                }
            }
        }
        pending = next;
    }

    warnings.sort_by(|a, b| (&a.relative_path, &a.url).cmp(&(&b.relative_path, &b.url)));
    SizeEstimate {
        summary: summarize_replicas(sets),
        probes_issued,
        warnings,
    }
}

/// Advance volume estimate for one manifest.
pub async fn estimate_size(
    m: &Manifest,
    prober: Arc<dyn SizeProber>,
    per_node_limit: usize,
) -> SizeEstimate {
    let mut sets = group_replicas(std::slice::from_ref(m))
        .expect("a parsed manifest has consistent checksums per path");
    estimate_replica_sizes(&mut sets, prober, per_node_limit).await
}
