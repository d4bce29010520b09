//! Primary and backup shuffle indexes.
//!
//! A primary index describes one logical write stream as merged by one agent:
//! every entry locates a block inside that agent's partition extent. Backup
//! indexes travel with backup files and are organized by partition so a
//! reader can find replicated blocks without any agent being alive.
//!
//! On-disk form is a line-oriented UTF-8 text format, one entry per line:
//!
//! ```text
//! j1,t4,ap9,p2,n3 | w4 0 1 4096 1024 AgentFile
//! ```
//!
//! i.e. `key_tuple | writer_id retry_idx backup_seq offset length source`.
//! The key tuple is the comma-separated block key (job, task, access point,
//! partition, agent). The format is append-friendly and diffable, which is
//! what you want from a debugging artifact.

use crate::block::BlockKey;
use crate::ids::{AccessPoint, JobId, NodeId, PartitionId, RetryIdx, TaskId, WriterId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// What kind of location an index entry points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    /// The agent's merged partition extent (memory or disk).
    AgentFile,
    /// Backup file on the writer's own node.
    DefaultBackup,
    /// Backup file on a remote node (used when writer and agent share a node).
    RemoteBackup,
    /// Replicated direct write that bypassed the agent entirely.
    BackupOnly,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceKind::AgentFile => "AgentFile",
            SourceKind::DefaultBackup => "DefaultBackup",
            SourceKind::RemoteBackup => "RemoteBackup",
            SourceKind::BackupOnly => "BackupOnly",
        };
        f.write_str(s)
    }
}

impl FromStr for SourceKind {
    type Err = IndexParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "AgentFile" => Ok(SourceKind::AgentFile),
            "DefaultBackup" => Ok(SourceKind::DefaultBackup),
            "RemoteBackup" => Ok(SourceKind::RemoteBackup),
            "BackupOnly" => Ok(SourceKind::BackupOnly),
            other => Err(IndexParseError::BadSource(other.to_string())),
        }
    }
}

/// Locates one block inside an extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub writer_id: WriterId,
    pub retry_idx: RetryIdx,
    pub backup_seq: u32,
    pub offset: u64,
    pub length: u64,
    pub source: SourceKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("entry length must be positive")]
    ZeroLength,
    #[error("duplicate version triple (writer {0}, retry {1}, seq {2})")]
    DuplicateVersion(WriterId, RetryIdx, u32),
    #[error("entry [{0}, {1}) overlaps an existing entry")]
    Overlap(u64, u64),
}

/// Index for one (job, task, access point, partition, agent) stream.
/// Entries are kept in append order, which is also commit order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryIndex {
    pub key: BlockKey,
    pub entries: Vec<IndexEntry>,
}

impl PrimaryIndex {
    pub fn new(key: BlockKey) -> Self {
        PrimaryIndex { key, entries: Vec::new() }
    }

    /// Append an entry, enforcing the stream invariants: positive length,
    /// unique (writer, retry, seq), non-overlapping extent ranges.
    pub fn append(&mut self, e: IndexEntry) -> Result<(), IndexError> {
        if e.length == 0 {
            return Err(IndexError::ZeroLength);
        }
        for prev in &self.entries {
            if (prev.writer_id, prev.retry_idx, prev.backup_seq)
                == (e.writer_id, e.retry_idx, e.backup_seq)
            {
                return Err(IndexError::DuplicateVersion(e.writer_id, e.retry_idx, e.backup_seq));
            }
            if e.offset < prev.offset + prev.length && prev.offset < e.offset + e.length {
                return Err(IndexError::Overlap(e.offset, e.offset + e.length));
            }
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.length).sum()
    }
}

/// Backup index for one writer attempt: per-partition entry lists, plus the
/// node holding the files so readers can go there directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupIndex {
    pub job_id: JobId,
    pub writer_id: WriterId,
    pub retry_idx: RetryIdx,
    pub node: NodeId,
    pub partitions: BTreeMap<PartitionId, Vec<IndexEntry>>,
}

impl BackupIndex {
    pub fn new(job_id: JobId, writer_id: WriterId, retry_idx: RetryIdx, node: NodeId) -> Self {
        BackupIndex { job_id, writer_id, retry_idx, node, partitions: BTreeMap::new() }
    }

    pub fn append(&mut self, partition: PartitionId, e: IndexEntry) {
        self.partitions.entry(partition).or_default().push(e);
    }
}

// ── text serialization ──────────────────────────────────────────────────────

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexParseError {
    #[error("line {0}: expected `key | entry` shape")]
    BadShape(usize),
    #[error("line {0}: key tuple must have 5 comma-separated fields")]
    BadKey(usize),
    #[error("line {0}: entry must have 6 space-separated fields")]
    BadEntry(usize),
    #[error("line {0}: bad integer field `{1}`")]
    BadInt(usize, String),
    #[error("unknown source kind `{0}`")]
    BadSource(String),
}

fn encode_line(key: &BlockKey, e: &IndexEntry) -> String {
    format!(
        "{} | {} {} {} {} {} {}",
        key, e.writer_id, e.retry_idx, e.backup_seq, e.offset, e.length, e.source
    )
}

/// Serialize a primary index to the line format, one entry per line.
pub fn encode_index(idx: &PrimaryIndex) -> String {
    let mut out = String::new();
    for e in &idx.entries {
        out.push_str(&encode_line(&idx.key, e));
        out.push('\n');
    }
    out
}

fn parse_prefixed(lineno: usize, s: &str, prefix: &str) -> Result<u64, IndexParseError> {
    s.strip_prefix(prefix)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| IndexParseError::BadInt(lineno, s.to_string()))
}

fn parse_int(lineno: usize, s: &str) -> Result<u64, IndexParseError> {
    s.parse().map_err(|_| IndexParseError::BadInt(lineno, s.to_string()))
}

/// Parse the line format back into (key, entry) pairs. Blank lines and `#`
/// comments are skipped so dumps can be annotated by hand.
pub fn parse_index(text: &str) -> Result<Vec<(BlockKey, IndexEntry)>, IndexParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key_part, entry_part) =
            line.split_once(" | ").ok_or(IndexParseError::BadShape(lineno))?;
        let kf: Vec<&str> = key_part.split(',').collect();
        if kf.len() != 5 {
            return Err(IndexParseError::BadKey(lineno));
        }
        let key = BlockKey {
            job_id: JobId(parse_prefixed(lineno, kf[0], "j")?),
            task_id: TaskId(parse_prefixed(lineno, kf[1], "t")?),
            access_point: AccessPoint(parse_prefixed(lineno, kf[2], "ap")?),
            partition_id: PartitionId(parse_prefixed(lineno, kf[3], "p")? as u32),
            agent_ip: NodeId(parse_prefixed(lineno, kf[4], "n")?),
        };
        let ef: Vec<&str> = entry_part.split_whitespace().collect();
        if ef.len() != 6 {
            return Err(IndexParseError::BadEntry(lineno));
        }
        let entry = IndexEntry {
            writer_id: WriterId(parse_prefixed(lineno, ef[0], "w")?),
            retry_idx: parse_int(lineno, ef[1])? as u32,
            backup_seq: parse_int(lineno, ef[2])? as u32,
            offset: parse_int(lineno, ef[3])?,
            length: parse_int(lineno, ef[4])?,
            source: ef[5].parse()?,
        };
        out.push((key, entry));
    }
    Ok(out)
}
