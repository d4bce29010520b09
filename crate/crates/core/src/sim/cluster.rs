//! Cluster topology: node inventory and per-node capacities.
//!
//! Node ids are laid out contiguously: compute nodes first, storage nodes
//! after them. Agents run on compute nodes; replicated backup files live on
//! storage nodes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Compute,
    Storage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub compute_nodes: u32,
    /// Memory per compute node; backs both worker tasks and the agent.
    pub compute_memory_bytes: u64,
    /// Concurrent task slots per compute node.
    pub compute_slots: u32,
    /// Local disk bandwidth per compute node (spills, agent files).
    pub compute_disk_bps: f64,
    pub storage_nodes: u32,
    pub storage_disk_bps: f64,
    /// Per-node network capacity, full duplex.
    pub ingress_bps: f64,
    pub egress_bps: f64,
    /// Base one-way latency added before a transfer starts moving bytes.
    pub latency_s: f64,
}

impl Default for ClusterSpec {
    /// Desk-scale default: a 10 + 9 node cluster keeping the compute:storage
    /// ratio of a small production pod, with capacities sized for MB-scale
    /// experiments.
    fn default() -> Self {
        ClusterSpec {
            compute_nodes: 10,
            compute_memory_bytes: 512 << 20,
            compute_slots: 4,
            compute_disk_bps: 150e6,
            storage_nodes: 9,
            storage_disk_bps: 300e6,
            ingress_bps: 1e9,
            egress_bps: 1e9,
            latency_s: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ClusterSpecError {
    #[error("cluster needs at least one compute node")]
    NoComputeNodes,
    #[error("{0} must be positive")]
    NonPositiveCapacity(&'static str),
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), ClusterSpecError> {
        if self.compute_nodes == 0 {
            return Err(ClusterSpecError::NoComputeNodes);
        }
        let checks: [(&'static str, f64); 4] = [
            ("compute_disk_bps", self.compute_disk_bps),
            ("ingress_bps", self.ingress_bps),
            ("egress_bps", self.egress_bps),
            ("latency_s", self.latency_s),
        ];
        for (name, v) in checks {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ClusterSpecError::NonPositiveCapacity(name));
            }
        }
        if self.compute_memory_bytes == 0 {
            return Err(ClusterSpecError::NonPositiveCapacity("compute_memory_bytes"));
        }
        if self.compute_slots == 0 {
            return Err(ClusterSpecError::NonPositiveCapacity("compute_slots"));
        }
        if self.storage_nodes > 0 && !(self.storage_disk_bps > 0.0) {
            return Err(ClusterSpecError::NonPositiveCapacity("storage_disk_bps"));
        }
        Ok(())
    }

    pub fn total_nodes(&self) -> u32 {
        self.compute_nodes + self.storage_nodes
    }

    pub fn kind(&self, node: NodeId) -> NodeKind {
        if node.0 < u64::from(self.compute_nodes) {
            NodeKind::Compute
        } else {
            NodeKind::Storage
        }
    }

    pub fn compute_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..u64::from(self.compute_nodes)).map(NodeId)
    }

    pub fn storage_ids(&self) -> impl Iterator<Item = NodeId> {
        let lo = u64::from(self.compute_nodes);
        (lo..lo + u64::from(self.storage_nodes)).map(NodeId)
    }

    pub fn all_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..u64::from(self.total_nodes())).map(NodeId)
    }

    pub fn disk_bps(&self, node: NodeId) -> f64 {
        match self.kind(node) {
            NodeKind::Compute => self.compute_disk_bps,
            NodeKind::Storage => self.storage_disk_bps,
        }
    }

    pub fn total_compute_slots(&self) -> u32 {
        self.compute_nodes * self.compute_slots
    }
}
