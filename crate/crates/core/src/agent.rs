//! Per-node shuffle agent: block ingestion, merged partition extents, and
//! watermark-driven memory management.
//!
//! The agent shares its node's memory with worker tasks, so admission is
//! governed by two watermarks over combined usage `(worker + shuffle)`:
//!
//! * below the yellow line, blocks are buffered in memory directly;
//! * between yellow and red, new data is admitted but the agent smooths
//!   pressure by spilling the least important resident blocks to disk until
//!   usage drops back under yellow;
//! * at the red line the agent defends stability: the least important
//!   resident data is discarded outright (it stays recoverable if a fallback
//!   backup finished; otherwise readers will trigger regeneration).
//!
//! Eviction order is ascending priority, FIFO within a priority. Large
//! in-memory blocks get an asynchronous fallback backup to local disk so
//! that a later discard demotes them to "spilled" rather than "lost".
//!
//! Everything here is a synchronous state machine: operations return
//! `Action`s (disk writes to schedule) and the simulator calls back
//! `*_complete` when the modeled I/O finishes.

use crate::block::{BlockIdent, DataBlock, ShuffleMode};
use crate::checksum::Digest;
use crate::ids::{JobId, NodeId, PartitionId};
use crate::index::{IndexEntry, SourceKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Combined-usage fractions at which spilling / discarding kick in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryWatermarks {
    pub yellow: f64,
    pub red: f64,
}

impl Default for MemoryWatermarks {
    fn default() -> Self {
        MemoryWatermarks { yellow: 0.80, red: 0.90 }
    }
}

/// Where a block's bytes are right now.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Residency {
    /// Resident in agent memory.
    Memory,
    /// Evicted from memory accounting, disk write in flight.
    SpillPending,
    /// On-disk ingest accepted, disk write in flight.
    DiskPending,
    /// Safely on the agent's disk.
    Disk,
    /// Dropped under red-line pressure with no surviving copy here.
    DiscardedLost,
    /// Dropped under pressure but a fallback backup holds the bytes.
    DiscardedBacked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum FallbackBackup {
    None,
    Pending,
    Done,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredBlock {
    block: DataBlock,
    arrival_seq: u64,
    residency: Residency,
    backup: FallbackBackup,
    committed: bool,
}

/// Modeled I/O the caller must schedule on this node's disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentAction {
    /// Write an evicted in-memory block to disk; call `spill_complete` after.
    SpillToDisk { ident: BlockIdent, bytes: u64 },
    /// Persist an on-disk-mode block; call `disk_write_complete` after.
    DiskWrite { ident: BlockIdent, bytes: u64 },
    /// Asynchronous fallback backup of a heavy in-memory block; call
    /// `backup_complete` after.
    FallbackBackup { ident: BlockIdent, bytes: u64 },
    /// Not an I/O: reports a red-line discard so the caller can trace it.
    /// `survivable` means a fallback backup covers the bytes.
    Discarded { ident: BlockIdent, survivable: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    /// Could not fit below the red line without evicting higher-priority data.
    Memory,
    /// Job not registered with this agent's group (or already deregistered).
    Unauthorized,
    /// Agent is down.
    AgentDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IngestOutcome {
    /// Admitted without touching the watermarks.
    Accepted,
    /// Admitted, but pressure management ran (spills and/or discards).
    AcceptedSpilled,
    /// Admitted and immediately discarded: the arrival itself was the least
    /// important data on the node. The writer is not failed over; readers
    /// recover the block later.
    AcceptedDiscarded,
    Rejected(RejectReason),
}

/// Can a committed block actually be served from this agent?
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceStatus {
    Ready,
    /// Bytes exist but the covering I/O has not finished yet.
    Pending,
    /// Data is gone from this agent; try another source.
    Gone,
}

/// A committed block in commit order: index entry plus serving metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittedBlock {
    pub ident: BlockIdent,
    pub entry: IndexEntry,
    pub digest: Digest,
    pub bytes: u64,
    pub mode: ShuffleMode,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CommitError {
    #[error("nothing ready to commit for {job} {partition}")]
    NothingToCommit { job: JobId, partition: PartitionId },
}

/// Byte counters for the conservation invariant and metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCounters {
    pub ingested_bytes: u64,
    pub mem_mode_bytes: u64,
    pub disk_mode_bytes: u64,
    pub spilled_bytes: u64,
    pub discarded_lost_bytes: u64,
    pub discarded_backed_bytes: u64,
    pub freed_bytes: u64,
}

/// Serializable snapshot for the debug state dump.
#[derive(Debug, Clone, Serialize)]
pub struct AgentSnapshot {
    pub node: NodeId,
    pub capacity_bytes: u64,
    pub worker_resident_bytes: u64,
    pub shuffle_resident_bytes: u64,
    pub blocks_by_residency: BTreeMap<String, usize>,
    pub counters: AgentCounters,
    pub down: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentState {
    pub node: NodeId,
    pub capacity_bytes: u64,
    pub watermarks: MemoryWatermarks,
    /// Blocks at or above this size get an async fallback backup.
    pub heavy_backup_threshold: u64,
    pub fallback_backup_enabled: bool,
    pub down: bool,
    worker_resident: u64,
    mem_used: u64,
    blocks: BTreeMap<BlockIdent, StoredBlock>,
    /// In-memory residents in eviction order: (priority, arrival, ident).
    resident: BTreeSet<(i64, u64, BlockIdent)>,
    /// Ready-to-commit idents per (job, partition), in arrival order.
    ready: BTreeMap<(JobId, PartitionId), Vec<BlockIdent>>,
    commit_log: BTreeMap<(JobId, PartitionId), Vec<CommittedBlock>>,
    /// Extent length per (job, partition); commit offsets come from here.
    extents: BTreeMap<(JobId, PartitionId), u64>,
    arrival_counter: u64,
    counters: AgentCounters,
}

impl AgentState {
    pub fn new(
        node: NodeId,
        capacity_bytes: u64,
        watermarks: MemoryWatermarks,
        heavy_backup_threshold: u64,
        fallback_backup_enabled: bool,
    ) -> Self {
        AgentState {
            node,
            capacity_bytes,
            watermarks,
            heavy_backup_threshold,
            fallback_backup_enabled,
            down: false,
            worker_resident: 0,
            mem_used: 0,
            blocks: BTreeMap::new(),
            resident: BTreeSet::new(),
            ready: BTreeMap::new(),
            commit_log: BTreeMap::new(),
            extents: BTreeMap::new(),
            arrival_counter: 0,
            counters: AgentCounters::default(),
        }
    }

    pub fn usage_bytes(&self) -> u64 {
        self.worker_resident + self.mem_used
    }

    pub fn shuffle_resident_bytes(&self) -> u64 {
        self.mem_used
    }

    pub fn worker_resident_bytes(&self) -> u64 {
        self.worker_resident
    }

    pub fn free_memory_bytes(&self) -> u64 {
        self.capacity_bytes.saturating_sub(self.usage_bytes())
    }

    pub fn counters(&self) -> AgentCounters {
        self.counters
    }

    fn yellow_bytes(&self) -> f64 {
        self.watermarks.yellow * self.capacity_bytes as f64
    }

    fn red_bytes(&self) -> f64 {
        self.watermarks.red * self.capacity_bytes as f64
    }

    // ── ingest ──────────────────────────────────────────────────────────────

    /// Admit one block. In-memory admissions may trigger spills (yellow) or
    /// discards (red); on-disk admissions cost a disk write. The returned
    /// actions must be scheduled by the caller.
    pub fn ingest(&mut self, block: DataBlock, authorized: bool) -> (IngestOutcome, Vec<AgentAction>) {
        if self.down {
            return (IngestOutcome::Rejected(RejectReason::AgentDown), Vec::new());
        }
        if !authorized {
            return (IngestOutcome::Rejected(RejectReason::Unauthorized), Vec::new());
        }
        let size = block.size_bytes;
        let ident = block.ident();
        let seq = self.arrival_counter;
        match block.mode {
            ShuffleMode::OnDisk => {
                self.arrival_counter += 1;
                self.counters.ingested_bytes += size;
                self.counters.disk_mode_bytes += size;
                self.blocks.insert(
                    ident,
                    StoredBlock {
                        block,
                        arrival_seq: seq,
                        residency: Residency::DiskPending,
                        backup: FallbackBackup::None,
                        committed: false,
                    },
                );
                (IngestOutcome::Accepted, vec![AgentAction::DiskWrite { ident, bytes: size }])
            }
            ShuffleMode::InMemory => {
                let mut actions = Vec::new();
                let projected = (self.usage_bytes() + size) as f64;
                let priority = block.priority;
                if projected >= self.red_bytes() {
                    // Red line: make room by discarding strictly less
                    // important resident data (ascending, FIFO within a
                    // priority). Equal-priority data never displaces each
                    // other — that would just churn.
                    while ((self.usage_bytes() + size) as f64) >= self.red_bytes() {
                        match self.resident.iter().next() {
                            Some(&(p, _, _)) if p < priority => self.discard_lowest(&mut actions),
                            _ => break,
                        }
                    }
                    if ((self.usage_bytes() + size) as f64) < self.red_bytes() {
                        self.admit_memory(block, seq, &mut actions);
                        self.spill_until_below_yellow(&mut actions);
                        return (IngestOutcome::AcceptedSpilled, actions);
                    }
                    // Could not fit. If the arrival itself ranks strictly
                    // below everything resident, it is the red-line victim:
                    // accepted but dropped on the floor (readers regenerate
                    // it later). Otherwise reject so the writer fails over.
                    let min_resident_prio = self.resident.iter().next().map(|&(p, _, _)| p);
                    let arriving_is_lowest =
                        matches!(min_resident_prio, Some(p) if priority < p);
                    if arriving_is_lowest {
                        self.arrival_counter += 1;
                        self.counters.ingested_bytes += size;
                        self.counters.mem_mode_bytes += size;
                        self.counters.discarded_lost_bytes += size;
                        self.blocks.insert(
                            ident,
                            StoredBlock {
                                block,
                                arrival_seq: seq,
                                residency: Residency::DiscardedLost,
                                backup: FallbackBackup::None,
                                committed: false,
                            },
                        );
                        actions.push(AgentAction::Discarded { ident, survivable: false });
                        return (IngestOutcome::AcceptedDiscarded, actions);
                    }
                    (IngestOutcome::Rejected(RejectReason::Memory), actions)
                } else if projected >= self.yellow_bytes() {
                    // Yellow band: admit, then smooth by spilling.
                    self.admit_memory(block, seq, &mut actions);
                    self.spill_until_below_yellow(&mut actions);
                    (IngestOutcome::AcceptedSpilled, actions)
                } else {
                    self.admit_memory(block, seq, &mut actions);
                    (IngestOutcome::Accepted, actions)
                }
            }
        }
    }

    fn admit_memory(&mut self, block: DataBlock, seq: u64, actions: &mut Vec<AgentAction>) {
        let size = block.size_bytes;
        let ident = block.ident();
        let priority = block.priority;
        self.arrival_counter += 1;
        self.counters.ingested_bytes += size;
        self.counters.mem_mode_bytes += size;
        let mut backup = FallbackBackup::None;
        if self.fallback_backup_enabled && size >= self.heavy_backup_threshold {
            backup = FallbackBackup::Pending;
            actions.push(AgentAction::FallbackBackup { ident, bytes: size });
        }
        self.blocks.insert(
            ident,
            StoredBlock { block, arrival_seq: seq, residency: Residency::Memory, backup, committed: false },
        );
        self.mem_used += size;
        self.resident.insert((priority, seq, ident));
        self.ready.entry((ident.job_id, ident.partition_id)).or_default().push(ident);
    }

    /// Spill the least important residents until combined usage is below the
    /// yellow line (or nothing in memory remains).
    fn spill_until_below_yellow(&mut self, actions: &mut Vec<AgentAction>) {
        while (self.usage_bytes() as f64) >= self.yellow_bytes() {
            let Some(&(_, _, ident)) = self.resident.iter().next() else { break };
            let sb = self.blocks.get_mut(&ident).expect("resident block exists");
            let size = sb.block.size_bytes;
            sb.residency = Residency::SpillPending;
            self.resident.remove(&(sb.block.priority, sb.arrival_seq, ident));
            self.mem_used -= size;
            self.counters.spilled_bytes += size;
            actions.push(AgentAction::SpillToDisk { ident, bytes: size });
        }
    }

    /// Discard the single least important resident block.
    fn discard_lowest(&mut self, actions: &mut Vec<AgentAction>) {
        let Some(&(_, _, ident)) = self.resident.iter().next() else { return };
        let sb = self.blocks.get_mut(&ident).expect("resident block exists");
        let size = sb.block.size_bytes;
        self.resident.remove(&(sb.block.priority, sb.arrival_seq, ident));
        self.mem_used -= size;
        let survivable = sb.backup != FallbackBackup::None;
        if survivable {
            // A fallback copy exists (or is already being written): the data
            // survives as if it had been spilled.
            sb.residency = Residency::DiscardedBacked;
            self.counters.discarded_backed_bytes += size;
        } else {
            sb.residency = Residency::DiscardedLost;
            self.counters.discarded_lost_bytes += size;
        }
        actions.push(AgentAction::Discarded { ident, survivable });
    }

    // ── pressure from outside ───────────────────────────────────────────────

    /// Worker memory on the node changed. Re-establish the watermarks:
    /// discard down to red first (stability), then spill down to yellow.
    pub fn memory_tick(&mut self, worker_resident: u64) -> Vec<AgentAction> {
        self.worker_resident = worker_resident;
        let mut actions = Vec::new();
        while (self.usage_bytes() as f64) >= self.red_bytes() && !self.resident.is_empty() {
            self.discard_lowest(&mut actions);
        }
        self.spill_until_below_yellow(&mut actions);
        actions
    }

    // ── modeled I/O completions ─────────────────────────────────────────────

    /// Spill write finished; block is safe on disk.
    pub fn spill_complete(&mut self, ident: BlockIdent) {
        if let Some(sb) = self.blocks.get_mut(&ident) {
            if sb.residency == Residency::SpillPending {
                sb.residency = Residency::Disk;
            }
        }
    }

    /// On-disk-mode write finished; the block may now be committed.
    pub fn disk_write_complete(&mut self, ident: BlockIdent) {
        if let Some(sb) = self.blocks.get_mut(&ident) {
            if sb.residency == Residency::DiskPending {
                sb.residency = Residency::Disk;
                self.ready.entry((ident.job_id, ident.partition_id)).or_default().push(ident);
            }
        }
    }

    /// Fallback backup finished; a later discard of this block keeps data.
    pub fn backup_complete(&mut self, ident: BlockIdent) {
        if let Some(sb) = self.blocks.get_mut(&ident) {
            if sb.backup == FallbackBackup::Pending {
                sb.backup = FallbackBackup::Done;
            }
        }
    }

    // ── commit & serving ────────────────────────────────────────────────────

    /// Commit everything ready for (job, partition): assign extent offsets,
    /// append to the commit log, return the newly readable blocks.
    pub fn commit(&mut self, job: JobId, partition: PartitionId) -> Result<Vec<CommittedBlock>, CommitError> {
        let idents = match self.ready.remove(&(job, partition)) {
            Some(v) if !v.is_empty() => v,
            _ => return Err(CommitError::NothingToCommit { job, partition }),
        };
        let extent = self.extents.entry((job, partition)).or_insert(0);
        let log = self.commit_log.entry((job, partition)).or_default();
        let mut out = Vec::with_capacity(idents.len());
        for ident in idents {
            let sb = self.blocks.get_mut(&ident).expect("ready block exists");
            // Blocks discarded before commit never become readable; they are
            // surfaced to readers as missing via the writer manifest.
            if matches!(sb.residency, Residency::DiscardedLost) {
                continue;
            }
            let entry = IndexEntry {
                writer_id: ident.writer_id,
                retry_idx: ident.retry_idx,
                backup_seq: ident.backup_seq,
                offset: *extent,
                length: sb.block.size_bytes,
                source: SourceKind::AgentFile,
            };
            *extent += sb.block.size_bytes;
            sb.committed = true;
            let cb = CommittedBlock {
                ident,
                entry,
                digest: sb.block.checksum,
                bytes: sb.block.size_bytes,
                mode: sb.block.mode,
            };
            log.push(cb.clone());
            out.push(cb);
        }
        if out.is_empty() {
            return Err(CommitError::NothingToCommit { job, partition });
        }
        Ok(out)
    }

    /// Commit log for one (job, partition); the poll cursor indexes into it.
    pub fn commit_log(&self, job: JobId, partition: PartitionId) -> &[CommittedBlock] {
        self.commit_log.get(&(job, partition)).map_or(&[], |v| v.as_slice())
    }

    /// Whether a committed block can still be served from here.
    pub fn source_status(&self, ident: BlockIdent) -> SourceStatus {
        match self.blocks.get(&ident) {
            None => SourceStatus::Gone,
            Some(sb) => match sb.residency {
                Residency::Memory | Residency::Disk => SourceStatus::Ready,
                Residency::SpillPending | Residency::DiskPending => SourceStatus::Ready,
                Residency::DiscardedBacked => {
                    if sb.backup == FallbackBackup::Done {
                        SourceStatus::Ready
                    } else {
                        SourceStatus::Pending
                    }
                }
                Residency::DiscardedLost => SourceStatus::Gone,
            },
        }
    }

    /// Whether a block is resident in agent memory right now, i.e. a fetch
    /// would be served without disk I/O.
    pub fn memory_resident(&self, ident: BlockIdent) -> bool {
        self.blocks
            .get(&ident)
            .map_or(false, |sb| sb.residency == Residency::Memory)
    }

    /// Aggregated per-partition sizes for a job (bytes, block count) across
    /// everything the agent still holds or has persisted.
    pub fn partition_stats(&self, job: JobId) -> BTreeMap<PartitionId, (u64, u64)> {
        let mut out: BTreeMap<PartitionId, (u64, u64)> = BTreeMap::new();
        for (ident, sb) in &self.blocks {
            if ident.job_id != job || sb.residency == Residency::DiscardedLost {
                continue;
            }
            let e = out.entry(ident.partition_id).or_insert((0, 0));
            e.0 += sb.block.size_bytes;
            e.1 += 1;
        }
        out
    }

    // ── lifecycle ───────────────────────────────────────────────────────────

    /// Node lost: every copy that lived in agent memory (or was mid-write)
    /// dies; disk contents survive. Worker memory is cleared by the caller
    /// via `memory_tick`.
    pub fn crash(&mut self) {
        self.down = true;
        let idents: Vec<BlockIdent> = self.blocks.keys().copied().collect();
        for ident in idents {
            let sb = self.blocks.get_mut(&ident).unwrap();
            match sb.residency {
                Residency::Memory | Residency::SpillPending | Residency::DiskPending => {
                    let size = sb.block.size_bytes;
                    if sb.residency == Residency::Memory {
                        self.resident.remove(&(sb.block.priority, sb.arrival_seq, ident));
                        self.mem_used -= size;
                    }
                    if sb.backup != FallbackBackup::None {
                        sb.residency = Residency::DiscardedBacked;
                        self.counters.discarded_backed_bytes += size;
                    } else {
                        sb.residency = Residency::DiscardedLost;
                        self.counters.discarded_lost_bytes += size;
                    }
                }
                _ => {}
            }
        }
        // Drop never-committed idents from the ready queues; their data is gone.
        for queue in self.ready.values_mut() {
            queue.retain(|ident| {
                !matches!(
                    self.blocks.get(ident).map(|sb| sb.residency),
                    Some(Residency::DiscardedLost)
                )
            });
        }
    }

    /// Node reconnected; the agent process restarts empty-handed except for
    /// what already reached disk.
    pub fn revive(&mut self) {
        self.down = false;
    }

    /// Job deregistered: free everything retained for it.
    pub fn free_job(&mut self, job: JobId) {
        let idents: Vec<BlockIdent> =
            self.blocks.keys().copied().filter(|i| i.job_id == job).collect();
        for ident in idents {
            let sb = self.blocks.remove(&ident).unwrap();
            if sb.residency == Residency::Memory {
                self.resident.remove(&(sb.block.priority, sb.arrival_seq, ident));
                self.mem_used -= sb.block.size_bytes;
            }
            self.counters.freed_bytes += sb.block.size_bytes;
        }
        self.ready.retain(|(j, _), _| *j != job);
        self.commit_log.retain(|(j, _), _| *j != job);
        self.extents.retain(|(j, _), _| *j != job);
    }

    // ── invariants ──────────────────────────────────────────────────────────

    /// Watermark safety: combined usage stays below the red line unless
    /// worker memory alone exceeds it (shuffle cannot fix that).
    pub fn watermark_invariant_holds(&self) -> bool {
        let usage = self.usage_bytes() as f64;
        usage < self.red_bytes() || (self.worker_resident as f64) >= self.red_bytes() ||
            // Degenerate capacity-zero agents hold nothing.
            self.capacity_bytes == 0
    }

    /// Byte conservation: all ingested bytes are accounted for in exactly
    /// one terminal or live category.
    pub fn conservation_holds(&self) -> bool {
        let mut live = 0u64;
        for sb in self.blocks.values() {
            match sb.residency {
                Residency::Memory
                | Residency::SpillPending
                | Residency::DiskPending
                | Residency::Disk => live += sb.block.size_bytes,
                Residency::DiscardedLost | Residency::DiscardedBacked => live += sb.block.size_bytes,
            }
        }
        live + self.counters.freed_bytes == self.counters.ingested_bytes
    }

    pub fn snapshot(&self) -> AgentSnapshot {
        let mut by_res: BTreeMap<String, usize> = BTreeMap::new();
        for sb in self.blocks.values() {
            *by_res.entry(format!("{:?}", sb.residency)).or_insert(0) += 1;
        }
        AgentSnapshot {
            node: self.node,
            capacity_bytes: self.capacity_bytes,
            worker_resident_bytes: self.worker_resident,
            shuffle_resident_bytes: self.mem_used,
            blocks_by_residency: by_res,
            counters: self.counters,
            down: self.down,
        }
    }
}
