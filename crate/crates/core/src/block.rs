//! Shuffle data blocks and their identifying keys.
//!
//! A block is the unit of transfer, indexing and recovery. Its identity is
//! pinned by (writer, retry, partition, backup sequence); the quintuple key
//! additionally names the job, the logical write stream and the agent that
//! collected it, which is what makes index lookups unambiguous when several
//! jobs and several agent replicas coexist.

use crate::checksum::Digest;
use crate::ids::{AccessPoint, JobId, NodeId, PartitionId, RetryIdx, TaskId, WriterId};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Where a block's bytes live while shuffled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShuffleMode {
    /// Buffered in agent memory; fastest, subject to watermark management.
    InMemory,
    /// Appended to the agent's on-disk partition file.
    OnDisk,
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShuffleMode::InMemory => write!(f, "mem"),
            ShuffleMode::OnDisk => write!(f, "disk"),
        }
    }
}

/// Index key: which job/task produced the stream, through which logical
/// write stream, into which partition, merged by which agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    pub job_id: JobId,
    pub task_id: TaskId,
    pub access_point: AccessPoint,
    pub partition_id: PartitionId,
    pub agent_ip: NodeId,
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.job_id, self.task_id, self.access_point, self.partition_id, self.agent_ip
        )
    }
}

/// One shuffle data block. `backup_seq` numbers the blocks a writer attempt
/// emits into one partition, restarting from zero for each new attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBlock {
    pub job_id: JobId,
    pub writer_id: WriterId,
    pub retry_idx: RetryIdx,
    pub partition_id: PartitionId,
    pub backup_seq: u32,
    pub size_bytes: u64,
    /// Eviction priority inherited from the job; larger is more important.
    pub priority: i64,
    pub checksum: Digest,
    pub mode: ShuffleMode,
}

impl DataBlock {
    /// Identity of the block independent of where it is stored.
    pub fn ident(&self) -> BlockIdent {
        BlockIdent {
            job_id: self.job_id,
            writer_id: self.writer_id,
            retry_idx: self.retry_idx,
            partition_id: self.partition_id,
            backup_seq: self.backup_seq,
        }
    }
}

/// (job, writer, retry, partition, seq) — enough to name a block uniquely
/// across the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockIdent {
    pub job_id: JobId,
    pub writer_id: WriterId,
    pub retry_idx: RetryIdx,
    pub partition_id: PartitionId,
    pub backup_seq: u32,
}

impl fmt::Display for BlockIdent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}.r{}/{}#{}",
            self.job_id, self.writer_id, self.retry_idx, self.partition_id, self.backup_seq
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ident_strips_placement() {
        let b = DataBlock {
            job_id: JobId(1),
            writer_id: WriterId(2),
            retry_idx: 1,
            partition_id: PartitionId(3),
            backup_seq: 0,
            size_bytes: 100,
            priority: 0,
            checksum: Digest(42),
            mode: ShuffleMode::InMemory,
        };
        let id = b.ident();
        assert_eq!(id.writer_id, WriterId(2));
        assert_eq!(id.retry_idx, 1);
        assert_eq!(id.to_string(), "j1/w2.r1/p3#0");
    }
}
