//! Adaptive backup layout planning for writer output.
//!
//! Backing up shuffle data costs disk bandwidth, so the planner only pays for
//! it where a loss would be expensive to recompute: long-running writers
//! (runtime over α) and heavy writers (total output over β) get a backup
//! copy of everything they emit; oversized per-partition chunks (over γ)
//! skip the agent entirely and are written straight to replicated storage,
//! which also keeps giant chunks out of agent memory.
//!
//! Decisions ratchet: thresholds are evaluated against *observed* progress,
//! so a writer can cross a threshold mid-write, and once a protection is on
//! it stays on for the rest of the attempt. The caller is told which chunks
//! newly flipped so already-routed bytes can be migrated before commit.

use crate::ids::{PartitionId, WriterId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Replication factor for chunks that bypass the agent.
pub const BACKUP_ONLY_REPLICAS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutThresholds {
    /// Runtime above which a writer's output is worth backing up (seconds).
    pub alpha_s: f64,
    /// Total output above which a writer's output is worth backing up.
    pub beta_bytes: u64,
    /// Per-partition chunk size above which data goes straight to
    /// replicated backup storage instead of through an agent.
    pub gamma_bytes: u64,
}

impl Default for LayoutThresholds {
    fn default() -> Self {
        LayoutThresholds { alpha_s: 300.0, beta_bytes: 500_000_000, gamma_bytes: 50_000_000 }
    }
}

impl LayoutThresholds {
    /// Degenerate policy: never back anything up.
    pub fn no_backup() -> Self {
        LayoutThresholds { alpha_s: f64::INFINITY, beta_bytes: u64::MAX, gamma_bytes: u64::MAX }
    }

    /// Degenerate policy: back up every writer with any observed runtime.
    pub fn all_backup() -> Self {
        LayoutThresholds { alpha_s: 0.0, ..Default::default() }
    }
}

/// What the writer has done so far in this attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterProfile {
    pub writer_id: WriterId,
    /// Wall-clock the attempt has been running (seconds).
    pub observed_runtime_s: f64,
    /// Bytes produced per partition so far, including any block about to be
    /// routed (so a single oversized block is diverted on first sight).
    pub per_chunk_bytes: BTreeMap<PartitionId, u64>,
    /// Whether this writer runs on the same node as its assigned agent.
    pub colocated_with_agent: bool,
}

impl WriterProfile {
    pub fn total_bytes(&self) -> u64 {
        self.per_chunk_bytes.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackupKind {
    /// No backup copy for agent-routed data.
    None,
    /// Backup file on the writer's own node.
    DefaultBackup,
    /// Backup file on a remote node; chosen when the writer shares a node
    /// with its agent, so one node failure cannot take both copies.
    RemoteBackup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkRoute {
    /// Through the proxy to the assigned agent (the normal path).
    ViaAgent,
    /// Straight to replicated backup storage, bypassing the agent.
    BackupOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDecision {
    pub writer_id: WriterId,
    pub backup: BackupKind,
    pub routes: BTreeMap<PartitionId, ChunkRoute>,
}

impl LayoutDecision {
    pub fn route(&self, p: PartitionId) -> ChunkRoute {
        self.routes.get(&p).copied().unwrap_or(ChunkRoute::ViaAgent)
    }

    pub fn backup_enabled(&self) -> bool {
        self.backup != BackupKind::None
    }
}

/// What changed between two consecutive plans for the same attempt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplanDelta {
    /// Backup protection just switched on; previously produced bytes must be
    /// copied into the backup file asynchronously.
    pub backup_newly_enabled: bool,
    /// Chunks that just flipped to BackupOnly; their agent-resident bytes
    /// must be migrated to the replicas before commit.
    pub chunks_flipped: Vec<PartitionId>,
}

impl ReplanDelta {
    pub fn is_empty(&self) -> bool {
        !self.backup_newly_enabled && self.chunks_flipped.is_empty()
    }
}

/// Plan from scratch for the current profile.
pub fn plan_layout(profile: &WriterProfile, thresholds: &LayoutThresholds) -> LayoutDecision {
    let backup_wanted =
        profile.observed_runtime_s > thresholds.alpha_s || profile.total_bytes() > thresholds.beta_bytes;
    let backup = if backup_wanted {
        if profile.colocated_with_agent { BackupKind::RemoteBackup } else { BackupKind::DefaultBackup }
    } else {
        BackupKind::None
    };
    let routes = profile
        .per_chunk_bytes
        .iter()
        .map(|(&p, &bytes)| {
            let route =
                if bytes > thresholds.gamma_bytes { ChunkRoute::BackupOnly } else { ChunkRoute::ViaAgent };
            (p, route)
        })
        .collect();
    LayoutDecision { writer_id: profile.writer_id, backup, routes }
}

/// Re-plan against new observations, ratcheting against `prior`: protections
/// only ever turn on mid-attempt, never off, and the backup kind chosen
/// first sticks. Returns the merged plan plus what newly changed.
pub fn replan_on_progress(
    profile: &WriterProfile,
    thresholds: &LayoutThresholds,
    prior: &LayoutDecision,
) -> (LayoutDecision, ReplanDelta) {
    let fresh = plan_layout(profile, thresholds);
    let backup = match (prior.backup, fresh.backup) {
        (BackupKind::None, new) => new,
        (old, _) => old,
    };
    let mut delta = ReplanDelta {
        backup_newly_enabled: prior.backup == BackupKind::None && backup != BackupKind::None,
        chunks_flipped: Vec::new(),
    };
    let mut routes = BTreeMap::new();
    for (&p, &new_route) in &fresh.routes {
        let old_route = prior.routes.get(&p).copied();
        let merged = match (old_route, new_route) {
            (Some(ChunkRoute::BackupOnly), _) => ChunkRoute::BackupOnly,
            (_, r) => r,
        };
        if merged == ChunkRoute::BackupOnly && old_route != Some(ChunkRoute::BackupOnly) {
            delta.chunks_flipped.push(p);
        }
        routes.insert(p, merged);
    }
    // Chunks known to the prior plan but absent from the new profile keep
    // their old route (profiles only grow in practice).
    for (&p, &r) in &prior.routes {
        routes.entry(p).or_insert(r);
    }
    (LayoutDecision { writer_id: profile.writer_id, backup, routes }, delta)
}
