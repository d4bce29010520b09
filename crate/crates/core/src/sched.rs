//! Job-manager policies: choosing how downstream readers are scheduled,
//! gating their launch on upstream progress, tracking poll cursors for
//! incremental consumption, rebalancing skewed partitions, and keeping the
//! per-writer checksum manifest that readers verify against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::CommittedBlock;
use crate::checksum::{AggregateDigest, Digest};
use crate::ids::{JobId, NodeId, PartitionId, RetryIdx, StageId, WriterId};

/// Default launch threshold: readers start once upstream has produced half
/// its estimated output.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Stages narrower than this are gang-scheduled; the launch-gating machinery
/// saves nothing when there are only a handful of readers to hold back.
pub const DEFAULT_LOW_PARALLELISM_CUTOFF: u32 = 10;

/// How the readers of a stage acquire resources relative to their writers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedMode {
    /// Readers launch only after every writer has finished.
    Staged,
    /// Readers launch together with the writers at job start.
    Gang,
    /// Readers launch once upstream progress reaches the threshold.
    Progressive,
}

/// Why a policy decision overrode the configured default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForcedReason {
    None,
    LowParallelism,
    BarrierInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedPolicy {
    pub mode: SchedMode,
    pub lambda: f64,
    pub forced: ForcedReason,
}

/// Scheduling knobs, normally sourced from the experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedConfig {
    /// Pin every non-forced stage to one mode (used by policy comparisons);
    /// `None` selects adaptively.
    pub forced_mode: Option<SchedMode>,
    pub lambda: f64,
    pub low_parallelism_cutoff: u32,
    /// Delay between consecutive reader launch events once the gate opens,
    /// modelling per-worker resource acquisition.
    pub dispatch_latency_s: f64,
}

impl Default for SchedConfig {
    fn default() -> Self {
        SchedConfig {
            forced_mode: None,
            lambda: DEFAULT_LAMBDA,
            low_parallelism_cutoff: DEFAULT_LOW_PARALLELISM_CUTOFF,
            dispatch_latency_s: 0.05,
        }
    }
}

/// Pick the scheduling policy for a downstream stage.
///
/// Narrow stages are gang-scheduled outright: holding back a handful of
/// readers buys nothing and the gating machinery only adds latency. A
/// barrier-input stage (downstream cannot start until all input exists,
/// e.g. a sort) keeps progressive bookkeeping but with the threshold pinned
/// to 1.0. Everything else runs the configured mode and threshold. The two
/// structural overrides win over `forced_mode` so that the policy invariants
/// hold no matter what an experiment pins.
pub fn decide_policy(parallelism: u32, barrier_input: bool, cfg: &SchedConfig) -> SchedPolicy {
    if parallelism < cfg.low_parallelism_cutoff {
        return SchedPolicy {
            mode: SchedMode::Gang,
            lambda: cfg.lambda,
            forced: ForcedReason::LowParallelism,
        };
    }
    if barrier_input {
        return SchedPolicy {
            mode: SchedMode::Progressive,
            lambda: 1.0,
            forced: ForcedReason::BarrierInput,
        };
    }
    SchedPolicy {
        mode: cfg.forced_mode.unwrap_or(SchedMode::Progressive),
        lambda: cfg.lambda,
        forced: ForcedReason::None,
    }
}

/// One writer task's periodic status report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressReport {
    pub stage_id: StageId,
    pub produced_bytes: u64,
    /// Estimated final output; `None` when no basis for an estimate exists.
    pub estimated_total_bytes: Option<u64>,
    pub completed_tasks: u32,
    pub total_tasks: u32,
}

/// Aggregate upstream progress as a fraction in [0, 1].
///
/// Byte-based when every report carries an estimate (produced bytes are the
/// ground truth the writers track); otherwise falls back to the completed
/// task count. Overshooting estimates clamp to 1.
pub fn upstream_progress(reports: &[ProgressReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    let mut produced = 0u64;
    let mut estimated = 0u64;
    let mut have_estimates = true;
    let mut completed = 0u64;
    let mut total = 0u64;
    for r in reports {
        produced += r.produced_bytes;
        match r.estimated_total_bytes {
            Some(e) => estimated += e,
            None => have_estimates = false,
        }
        completed += u64::from(r.completed_tasks);
        total += u64::from(r.total_tasks);
    }
    let frac = if have_estimates && estimated > 0 {
        produced as f64 / estimated as f64
    } else if total > 0 {
        completed as f64 / total as f64
    } else {
        0.0
    };
    frac.clamp(0.0, 1.0)
}

/// Is the reader-launch gate open at this upstream progress?
///
/// Staged waits for full completion, Gang never waits, Progressive waits for
/// the threshold. Once the gate opens readers are launched one event apiece,
/// spaced by the dispatch latency; that spacing and slot admission are the
/// simulator's job, not decided here.
pub fn launch_gate_open(policy: &SchedPolicy, progress: f64) -> bool {
    match policy.mode {
        SchedMode::Staged => progress >= 1.0,
        SchedMode::Gang => true,
        SchedMode::Progressive => progress >= policy.lambda,
    }
}

/// Per-(agent, job, partition) consumption cursors into agent commit logs.
///
/// A poll returns only entries committed since the previous poll for the
/// same key, so repeated polling never re-delivers and the union of all
/// polls is exactly the committed sequence.
#[derive(Debug, Default, Clone)]
pub struct PollCursors {
    next: BTreeMap<(NodeId, JobId, PartitionId), usize>,
}

impl PollCursors {
    pub fn new() -> Self {
        Self::default()
    }

    /// Return commits not yet seen through this cursor and advance it.
    pub fn take_new<'a>(
        &mut self,
        agent: NodeId,
        job: JobId,
        partition: PartitionId,
        log: &'a [CommittedBlock],
    ) -> &'a [CommittedBlock] {
        let cursor = self.next.entry((agent, job, partition)).or_insert(0);
        let start = (*cursor).min(log.len());
        *cursor = log.len();
        &log[start..]
    }
}

/// One contiguous byte range of an original partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSlice {
    pub source: PartitionId,
    pub offset: u64,
    pub bytes: u64,
}

/// One output partition of a rebalancing plan: the slices it reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedPartition {
    pub slices: Vec<PartitionSlice>,
}

impl PlannedPartition {
    pub fn bytes(&self) -> u64 {
        self.slices.iter().map(|s| s.bytes).sum()
    }
}

/// Split/merge plan over the upstream partition statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub target_bytes: u64,
    pub outputs: Vec<PlannedPartition>,
}

impl PartitionPlan {
    /// The downstream parallelism this plan implies.
    pub fn parallelism(&self) -> u32 {
        self.outputs.len() as u32
    }

    /// True when the plan maps each partition to itself unchanged.
    pub fn is_identity(&self, stats: &BTreeMap<PartitionId, u64>) -> bool {
        let nonzero: Vec<_> = stats.iter().filter(|(_, b)| **b > 0).collect();
        self.outputs.len() == nonzero.len()
            && self.outputs.iter().zip(nonzero).all(|(out, (pid, bytes))| {
                out.slices.len() == 1
                    && out.slices[0].source == *pid
                    && out.slices[0].offset == 0
                    && out.slices[0].bytes == *bytes
            })
    }
}

/// Rebalance partitions around a target size.
///
/// Partitions above twice the target are split into `ceil(bytes/target)`
/// near-equal pieces; runs of adjacent partitions below half the target are
/// merged greedily up to the target; everything else passes through. Every
/// byte of input appears in exactly one output slice, and no output is
/// empty.
pub fn dynamic_partition_insertion(
    stats: &BTreeMap<PartitionId, u64>,
    target_bytes: u64,
) -> PartitionPlan {
    assert!(target_bytes > 0, "target partition size must be positive");
    let mut outputs = Vec::new();
    // Pending merge group of consecutive small partitions.
    let mut group: Vec<PartitionSlice> = Vec::new();
    let mut group_bytes = 0u64;
    let flush_group = |group: &mut Vec<PartitionSlice>,
                           group_bytes: &mut u64,
                           outputs: &mut Vec<PlannedPartition>| {
        if !group.is_empty() {
            outputs.push(PlannedPartition {
                slices: std::mem::take(group),
            });
            *group_bytes = 0;
        }
    };

    for (&pid, &bytes) in stats {
        if bytes == 0 {
            continue; // nothing to read; the partition is merged away
        }
        if bytes > 2 * target_bytes {
            flush_group(&mut group, &mut group_bytes, &mut outputs);
            let pieces = bytes.div_ceil(target_bytes);
            let base = bytes / pieces;
            let extra = bytes % pieces; // first `extra` pieces get one more byte
            let mut offset = 0u64;
            for i in 0..pieces {
                let len = base + u64::from(i < extra);
                outputs.push(PlannedPartition {
                    slices: vec![PartitionSlice {
                        source: pid,
                        offset,
                        bytes: len,
                    }],
                });
                offset += len;
            }
        } else if bytes * 2 < target_bytes {
            if group_bytes + bytes > target_bytes {
                flush_group(&mut group, &mut group_bytes, &mut outputs);
            }
            group.push(PartitionSlice {
                source: pid,
                offset: 0,
                bytes,
            });
            group_bytes += bytes;
        } else {
            flush_group(&mut group, &mut group_bytes, &mut outputs);
            outputs.push(PlannedPartition {
                slices: vec![PartitionSlice {
                    source: pid,
                    offset: 0,
                    bytes,
                }],
            });
        }
    }
    flush_group(&mut group, &mut group_bytes, &mut outputs);
    PartitionPlan {
        target_bytes,
        outputs,
    }
}

/// Per-partition committed totals for one writer version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartitionTotals {
    pub aggregate: AggregateDigest,
    pub blocks: u32,
    pub bytes: u64,
}

/// What the job manager knows about one writer's committed output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriterManifest {
    pub writer_id: WriterId,
    pub retry_idx: RetryIdx,
    pub aggregate: AggregateDigest,
    pub per_partition: BTreeMap<PartitionId, PartitionTotals>,
}

impl WriterManifest {
    fn new(writer_id: WriterId, retry_idx: RetryIdx) -> Self {
        WriterManifest {
            writer_id,
            retry_idx,
            aggregate: AggregateDigest::ZERO,
            per_partition: BTreeMap::new(),
        }
    }
}

/// The checksum/version ledger for one stage's writers. Readers verify
/// their consumed data against this; recovery uses it to decide whether
/// remaining data is intact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub writers: BTreeMap<WriterId, WriterManifest>,
}

impl StageManifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold one committed block into the manifest.
    ///
    /// A higher retry index supersedes everything previously recorded for
    /// the writer (the old version is garbage); stale lower-version commits
    /// arriving late are ignored.
    pub fn record_block(
        &mut self,
        writer: WriterId,
        retry: RetryIdx,
        partition: PartitionId,
        digest: Digest,
        bytes: u64,
    ) {
        let entry = self
            .writers
            .entry(writer)
            .or_insert_with(|| WriterManifest::new(writer, retry));
        if retry > entry.retry_idx {
            *entry = WriterManifest::new(writer, retry);
        } else if retry < entry.retry_idx {
            return;
        }
        entry.aggregate.fold(digest);
        let totals = entry.per_partition.entry(partition).or_default();
        totals.aggregate.fold(digest);
        totals.blocks += 1;
        totals.bytes += bytes;
    }

    pub fn writer(&self, writer: WriterId) -> Option<&WriterManifest> {
        self.writers.get(&writer)
    }

    /// Expected (retry, totals) per writer for one partition; writers that
    /// produced nothing for the partition are absent.
    pub fn expected_for_partition(
        &self,
        partition: PartitionId,
    ) -> BTreeMap<WriterId, (RetryIdx, PartitionTotals)> {
        self.writers
            .iter()
            .filter_map(|(&w, m)| {
                m.per_partition
                    .get(&partition)
                    .map(|t| (w, (m.retry_idx, *t)))
            })
            .collect()
    }
}
