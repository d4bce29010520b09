//! Downstream consumption: merging index entries discovered from agents and
//! backup catalogs, keeping only the newest version of each block, ordering
//! fallback sources by expected latency, ledgering what was actually
//! consumed, and running checksum-verified incremental recovery when blocks
//! go missing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::{AggregateDigest, Digest};
use crate::ids::{NodeId, PartitionId, RetryIdx, WriterId};
use crate::index::{IndexEntry, SourceKind};
use crate::sched::StageManifest;

/// Failed regeneration attempts tolerated per missing writer before the
/// reader gives up on incremental recovery and escalates to a full rerun.
pub const DEFAULT_REGEN_RETRY_BUDGET: u32 = 3;

/// Identity of one logical block within a partition, version-independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryKey {
    pub writer_id: WriterId,
    pub backup_seq: u32,
}

/// One place a block can be fetched from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceRef {
    pub kind: SourceKind,
    pub node: NodeId,
}

/// Lower ranks are tried first: the agent's own file is the cheapest path,
/// the writer-side backups next, and the dedicated replica set last. Within
/// a rank, ties break on node id for determinism.
fn source_rank(kind: SourceKind) -> u8 {
    match kind {
        SourceKind::AgentFile => 0,
        SourceKind::DefaultBackup | SourceKind::RemoteBackup => 1,
        SourceKind::BackupOnly => 2,
    }
}

impl SourceRef {
    fn order_key(&self) -> (u8, u64) {
        (source_rank(self.kind), self.node.0)
    }
}

/// An index entry paired with the node it was discovered on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub entry: IndexEntry,
    pub node: NodeId,
}

/// A deduplicated block the reader intends to fetch: the newest version,
/// with every location that can serve it in fallback order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub key: EntryKey,
    pub retry_idx: RetryIdx,
    pub length: u64,
    /// Fetch attempts walk this list front to back.
    pub sources: Vec<SourceRef>,
}

/// Keep only the largest retry index per (writer, backup_seq); collapse
/// duplicate locations of the surviving version into one ordered source
/// chain.
pub fn dedup_versions(candidates: &[Candidate]) -> BTreeMap<EntryKey, PlanEntry> {
    let mut plan: BTreeMap<EntryKey, PlanEntry> = BTreeMap::new();
    for c in candidates {
        let key = EntryKey {
            writer_id: c.entry.writer_id,
            backup_seq: c.entry.backup_seq,
        };
        let source = SourceRef {
            kind: c.entry.source,
            node: c.node,
        };
        match plan.get_mut(&key) {
            None => {
                plan.insert(
                    key,
                    PlanEntry {
                        key,
                        retry_idx: c.entry.retry_idx,
                        length: c.entry.length,
                        sources: vec![source],
                    },
                );
            }
            Some(existing) => {
                if c.entry.retry_idx > existing.retry_idx {
                    // Newer version supersedes; old locations are garbage.
                    existing.retry_idx = c.entry.retry_idx;
                    existing.length = c.entry.length;
                    existing.sources = vec![source];
                } else if c.entry.retry_idx == existing.retry_idx
                    && !existing.sources.contains(&source)
                {
                    existing.sources.push(source);
                }
            }
        }
    }
    for entry in plan.values_mut() {
        entry.sources.sort_by_key(SourceRef::order_key);
    }
    plan
}

/// Everything one reader needs to pull its partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadPlan {
    pub partition: PartitionId,
    pub entries: BTreeMap<EntryKey, PlanEntry>,
    /// Entries whose every source is dead or discarded; recovery input.
    pub missing: BTreeSet<EntryKey>,
}

impl ReadPlan {
    pub fn new(partition: PartitionId, candidates: &[Candidate]) -> Self {
        ReadPlan {
            partition,
            entries: dedup_versions(candidates),
            missing: BTreeSet::new(),
        }
    }

    pub fn planned_bytes(&self) -> u64 {
        self.entries.values().map(|e| e.length).sum()
    }
}

/// One block the reader actually consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumedRecord {
    pub writer_id: WriterId,
    pub retry_idx: RetryIdx,
    pub backup_seq: u32,
    pub checksum: Digest,
    pub bytes: u64,
}

/// Why final verification rejected a reader's consumed set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum VerifyFailure {
    #[error("{writer}: consumed {got} blocks, manifest expects {expected}")]
    CountMismatch {
        writer: WriterId,
        expected: u32,
        got: u32,
    },
    #[error("{writer}: aggregate checksum mismatch")]
    AggregateMismatch { writer: WriterId },
    #[error("{writer}: consumed version {got} but manifest is at {expected}")]
    StaleVersion {
        writer: WriterId,
        expected: RetryIdx,
        got: RetryIdx,
    },
    #[error("{writer}: consumed data from a writer absent from the manifest")]
    UnknownWriter { writer: WriterId },
}

/// Multiset ledger of everything a reader consumed for its partition.
///
/// Duplicate deliveries are recorded as-is — catching them is verification's
/// job, not the ledger's.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderLedger {
    records: Vec<ConsumedRecord>,
    bytes: u64,
}

impl ReaderLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, rec: ConsumedRecord) {
        self.bytes += rec.bytes;
        self.records.push(rec);
    }

    pub fn records(&self) -> &[ConsumedRecord] {
        &self.records
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// The consumed multiset keyed by logical block identity, with
    /// multiplicities. Two equivalent runs must produce equal maps.
    pub fn multiset(&self) -> BTreeMap<(WriterId, u32), u32> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.writer_id, r.backup_seq)).or_insert(0) += 1;
        }
        out
    }

    /// Drop every record of a writer below the given version; used when a
    /// regenerated writer supersedes blocks consumed before the failure.
    pub fn drop_stale(&mut self, writer: WriterId, keep_retry: RetryIdx) {
        self.records
            .retain(|r| r.writer_id != writer || r.retry_idx >= keep_retry);
        self.bytes = self.records.iter().map(|r| r.bytes).sum();
    }

    /// Compare the consumed multiset against the job manager's manifest for
    /// this partition: per writer, the version must match, the block count
    /// must match, and the aggregate checksum over consumed digests must
    /// equal the manifest aggregate. Any missing or duplicated block shifts
    /// the aggregate sum and fails the check.
    pub fn verify(
        &self,
        manifest: &StageManifest,
        partition: PartitionId,
    ) -> Result<(), VerifyFailure> {
        let expected = manifest.expected_for_partition(partition);
        let mut by_writer: BTreeMap<WriterId, (u32, AggregateDigest)> = BTreeMap::new();
        for r in &self.records {
            let Some((retry, _)) = expected.get(&r.writer_id) else {
                return Err(VerifyFailure::UnknownWriter {
                    writer: r.writer_id,
                });
            };
            if r.retry_idx != *retry {
                return Err(VerifyFailure::StaleVersion {
                    writer: r.writer_id,
                    expected: *retry,
                    got: r.retry_idx,
                });
            }
            let slot = by_writer
                .entry(r.writer_id)
                .or_insert((0, AggregateDigest::ZERO));
            slot.0 += 1;
            slot.1.fold(r.checksum);
        }
        for (writer, (_, totals)) in &expected {
            let (count, aggregate) = by_writer
                .get(writer)
                .copied()
                .unwrap_or((0, AggregateDigest::ZERO));
            if count != totals.blocks {
                return Err(VerifyFailure::CountMismatch {
                    writer: *writer,
                    expected: totals.blocks,
                    got: count,
                });
            }
            if aggregate != totals.aggregate {
                return Err(VerifyFailure::AggregateMismatch { writer: *writer });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryState {
    Running,
    Verifying,
    Complete,
    AbortedToFullRerun,
}

/// Tracks one reader's incremental recovery from missing blocks: which
/// writers must regenerate, how often each has failed, and whether the
/// session is still viable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoverySession {
    pub partition: PartitionId,
    missing: BTreeSet<WriterId>,
    failed_attempts: BTreeMap<WriterId, u32>,
    budget: u32,
    state: RecoveryState,
}

impl RecoverySession {
    /// Open a session, applying the pre-resumption check: recovery may only
    /// proceed when the missing data will be locatable after rerun and the
    /// data already consumed still matches the manifest. Otherwise the
    /// session starts out aborted and the caller falls back to a full rerun.
    pub fn begin(
        partition: PartitionId,
        missing_writers: BTreeSet<WriterId>,
        locatable_after_rerun: bool,
        remaining_data_valid: bool,
        budget: u32,
    ) -> Self {
        let state = if locatable_after_rerun && remaining_data_valid {
            RecoveryState::Running
        } else {
            RecoveryState::AbortedToFullRerun
        };
        RecoverySession {
            partition,
            missing: missing_writers,
            failed_attempts: BTreeMap::new(),
            budget,
            state,
        }
    }

    pub fn state(&self) -> RecoveryState {
        self.state
    }

    pub fn missing(&self) -> &BTreeSet<WriterId> {
        &self.missing
    }

    /// A writer's rerun committed successfully; once none are missing the
    /// session moves to final verification.
    pub fn writer_regenerated(&mut self, writer: WriterId) {
        if self.state != RecoveryState::Running {
            return;
        }
        self.missing.remove(&writer);
        if self.missing.is_empty() {
            self.state = RecoveryState::Verifying;
        }
    }

    /// A writer's rerun failed; repeated failures beyond the budget abort
    /// the session rather than looping forever.
    pub fn regeneration_failed(&mut self, writer: WriterId) -> RecoveryState {
        if self.state != RecoveryState::Running {
            return self.state;
        }
        let attempts = self.failed_attempts.entry(writer).or_insert(0);
        *attempts += 1;
        if *attempts >= self.budget {
            self.state = RecoveryState::AbortedToFullRerun;
        }
        self.state
    }

    /// Resolve final verification: a clean ledger completes the session,
    /// any mismatch downgrades to a full rerun.
    pub fn finish(&mut self, verification: Result<(), VerifyFailure>) -> RecoveryState {
        if self.state == RecoveryState::Verifying {
            self.state = match verification {
                Ok(()) => RecoveryState::Complete,
                Err(_) => RecoveryState::AbortedToFullRerun,
            };
        }
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checksum::block_digest;
    use proptest::prelude::*;

    fn cand(writer: u64, retry: u32, seq: u32, kind: SourceKind, node: u64) -> Candidate {
        Candidate {
            entry: IndexEntry {
                writer_id: WriterId(writer),
                retry_idx: retry,
                backup_seq: seq,
                offset: 0,
                length: 100,
                source: kind,
            },
            node: NodeId(node),
        }
    }

    #[test]
    fn newer_version_supersedes_older() {
        let plan = dedup_versions(&[
            cand(1, 0, 0, SourceKind::AgentFile, 5),
            cand(1, 1, 0, SourceKind::AgentFile, 6),
        ]);
        let entry = &plan[&EntryKey {
            writer_id: WriterId(1),
            backup_seq: 0,
        }];
        assert_eq!(entry.retry_idx, 1);
        assert_eq!(entry.sources, vec![SourceRef { kind: SourceKind::AgentFile, node: NodeId(6) }]);
    }

    #[test]
    fn single_version_is_identity() {
        let plan = dedup_versions(&[cand(2, 0, 3, SourceKind::AgentFile, 1)]);
        assert_eq!(plan.len(), 1);
        let entry = plan.values().next().unwrap();
        assert_eq!(entry.key.backup_seq, 3);
        assert_eq!(entry.sources.len(), 1);
    }

    #[test]
    fn duplicate_locations_become_ordered_fallbacks() {
        let plan = dedup_versions(&[
            cand(1, 0, 0, SourceKind::BackupOnly, 9),
            cand(1, 0, 0, SourceKind::DefaultBackup, 4),
            cand(1, 0, 0, SourceKind::AgentFile, 7),
            cand(1, 0, 0, SourceKind::BackupOnly, 8),
        ]);
        let entry = plan.values().next().unwrap();
        let kinds: Vec<_> = entry.sources.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![
                SourceKind::AgentFile,
                SourceKind::DefaultBackup,
                SourceKind::BackupOnly,
                SourceKind::BackupOnly,
            ]
        );
        // Ties within a rank break on node id.
        assert_eq!(entry.sources[2].node, NodeId(8));
    }

    proptest! {
        /// dedup matches a brute-force group-by-max oracle.
        #[test]
        fn dedup_matches_group_by_max(
            raw in proptest::collection::vec(
                (0u64..4, 0u32..3, 0u32..4, 0u64..6, 0u8..4),
                0..40,
            )
        ) {
            let kinds = [
                SourceKind::AgentFile,
                SourceKind::DefaultBackup,
                SourceKind::RemoteBackup,
                SourceKind::BackupOnly,
            ];
            let candidates: Vec<Candidate> = raw
                .iter()
                .map(|&(w, r, s, n, k)| cand(w, r, s, kinds[k as usize], n))
                .collect();
            let plan = dedup_versions(&candidates);

            let mut oracle: BTreeMap<(u64, u32), u32> = BTreeMap::new();
            for c in &candidates {
                let key = (c.entry.writer_id.0, c.entry.backup_seq);
                let best = oracle.entry(key).or_insert(c.entry.retry_idx);
                *best = (*best).max(c.entry.retry_idx);
            }
            prop_assert_eq!(plan.len(), oracle.len());
            for (key, entry) in &plan {
                prop_assert_eq!(
                    entry.retry_idx,
                    oracle[&(key.writer_id.0, key.backup_seq)]
                );
                // Source chain is sorted and duplicate-free.
                let keys: Vec<_> = entry.sources.iter().map(SourceRef::order_key).collect();
                prop_assert!(keys.windows(2).all(|w| w[0] <= w[1]));
                let set: BTreeSet<_> = entry.sources.iter().collect();
                prop_assert_eq!(set.len(), entry.sources.len());
            }
        }
    }

    fn manifest_with(writer: WriterId, partition: PartitionId, seqs: &[u32]) -> StageManifest {
        let mut m = StageManifest::new();
        for &seq in seqs {
            let d = block_digest(writer, partition, seq, u64::from(seq) + 1);
            m.record_block(writer, 0, partition, d, 50);
        }
        m
    }

    fn consumed(writer: WriterId, partition: PartitionId, seq: u32) -> ConsumedRecord {
        ConsumedRecord {
            writer_id: writer,
            retry_idx: 0,
            backup_seq: seq,
            checksum: block_digest(writer, partition, seq, u64::from(seq) + 1),
            bytes: 50,
        }
    }

    #[test]
    fn clean_ledger_verifies() {
        let w = WriterId(1);
        let p = PartitionId(0);
        let manifest = manifest_with(w, p, &[0, 1, 2]);
        let mut ledger = ReaderLedger::new();
        for seq in [2, 0, 1] {
            ledger.record(consumed(w, p, seq));
        }
        assert_eq!(ledger.verify(&manifest, p), Ok(()));
        assert_eq!(ledger.bytes(), 150);
    }

    #[test]
    fn duplicate_delivery_fails_verification() {
        let w = WriterId(1);
        let p = PartitionId(0);
        let manifest = manifest_with(w, p, &[0, 1]);
        let mut ledger = ReaderLedger::new();
        for seq in [0, 1, 1] {
            ledger.record(consumed(w, p, seq));
        }
        assert!(ledger.verify(&manifest, p).is_err());
    }

    #[test]
    fn missing_block_fails_verification() {
        let w = WriterId(1);
        let p = PartitionId(0);
        let manifest = manifest_with(w, p, &[0, 1]);
        let mut ledger = ReaderLedger::new();
        ledger.record(consumed(w, p, 0));
        assert_eq!(
            ledger.verify(&manifest, p),
            Err(VerifyFailure::CountMismatch {
                writer: w,
                expected: 2,
                got: 1
            })
        );
    }

    #[test]
    fn stale_version_fails_verification() {
        let w = WriterId(1);
        let p = PartitionId(0);
        let mut manifest = StageManifest::new();
        manifest.record_block(w, 1, p, block_digest(w, p, 0, 9), 50);
        let mut ledger = ReaderLedger::new();
        ledger.record(consumed(w, p, 0)); // retry 0, manifest at 1
        assert_eq!(
            ledger.verify(&manifest, p),
            Err(VerifyFailure::StaleVersion {
                writer: w,
                expected: 1,
                got: 0
            })
        );
    }

    #[test]
    fn drop_stale_removes_superseded_records() {
        let w = WriterId(1);
        let p = PartitionId(0);
        let mut ledger = ReaderLedger::new();
        ledger.record(consumed(w, p, 0));
        let mut fresh = consumed(w, p, 0);
        fresh.retry_idx = 1;
        fresh.checksum = block_digest(w, p, 0, 1);
        ledger.record(fresh);
        ledger.drop_stale(w, 1);
        assert_eq!(ledger.records().len(), 1);
        assert_eq!(ledger.records()[0].retry_idx, 1);
        assert_eq!(ledger.bytes(), 50);
    }

    #[test]
    fn recovery_completes_after_all_writers_regenerate() {
        let mut s = RecoverySession::begin(
            PartitionId(0),
            [WriterId(1), WriterId(2)].into_iter().collect(),
            true,
            true,
            DEFAULT_REGEN_RETRY_BUDGET,
        );
        assert_eq!(s.state(), RecoveryState::Running);
        s.writer_regenerated(WriterId(1));
        assert_eq!(s.state(), RecoveryState::Running);
        s.writer_regenerated(WriterId(2));
        assert_eq!(s.state(), RecoveryState::Verifying);
        assert_eq!(s.finish(Ok(())), RecoveryState::Complete);
    }

    #[test]
    fn repeated_regeneration_failure_exhausts_budget() {
        let mut s = RecoverySession::begin(
            PartitionId(0),
            [WriterId(1)].into_iter().collect(),
            true,
            true,
            3,
        );
        assert_eq!(s.regeneration_failed(WriterId(1)), RecoveryState::Running);
        assert_eq!(s.regeneration_failed(WriterId(1)), RecoveryState::Running);
        assert_eq!(
            s.regeneration_failed(WriterId(1)),
            RecoveryState::AbortedToFullRerun
        );
    }

    #[test]
    fn preflight_failure_aborts_immediately() {
        let s = RecoverySession::begin(
            PartitionId(0),
            [WriterId(1)].into_iter().collect(),
            false, // missing data not locatable after rerun
            true,
            3,
        );
        assert_eq!(s.state(), RecoveryState::AbortedToFullRerun);
        let s2 = RecoverySession::begin(
            PartitionId(0),
            [WriterId(1)].into_iter().collect(),
            true,
            false, // surviving data no longer matches the manifest
            3,
        );
        assert_eq!(s2.state(), RecoveryState::AbortedToFullRerun);
    }

    #[test]
    fn failed_verification_downgrades_to_full_rerun() {
        let mut s = RecoverySession::begin(
            PartitionId(0),
            [WriterId(1)].into_iter().collect(),
            true,
            true,
            3,
        );
        s.writer_regenerated(WriterId(1));
        let failure = VerifyFailure::AggregateMismatch { writer: WriterId(1) };
        assert_eq!(s.finish(Err(failure)), RecoveryState::AbortedToFullRerun);
    }
}
