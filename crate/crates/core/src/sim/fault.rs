//! Fault injection plans: when a node disconnects, which node, and for how
//! long. Triggers either key off a job's lifecycle phase or repeat on a
//! randomized period; all randomness comes from the run's seeded generator,
//! so a plan expands to the same schedule every time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::NodeId;
use crate::sim::cluster::ClusterSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FaultTrigger {
    /// Fire when the indexed job first starts producing shuffle data.
    AtWritePhase { job_index: u32, delay_s: f64 },
    /// Fire when the indexed job's writers have finished and a reader runs.
    AtReadPhase { job_index: u32, delay_s: f64 },
    /// Fire repeatedly with gaps drawn uniformly from the interval.
    Periodic {
        min_interval_s: f64,
        max_interval_s: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultTarget {
    RandomCompute,
    RandomStorage,
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub trigger: FaultTrigger,
    pub target: FaultTarget,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub faults: Vec<FaultSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FaultPlanError {
    #[error("fault {0}: duration must be positive")]
    NonPositiveDuration(usize),
    #[error("fault {0}: periodic interval must satisfy 0 < min <= max")]
    BadInterval(usize),
    #[error("fault {0}: delay must be non-negative")]
    NegativeDelay(usize),
    #[error("fault {0}: target node {1} does not exist")]
    NoSuchNode(usize, NodeId),
    #[error("fault {0}: no node of the requested kind exists")]
    NoSuchKind(usize),
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn validate(&self, cluster: &ClusterSpec) -> Result<(), FaultPlanError> {
        for (i, f) in self.faults.iter().enumerate() {
            if !(f.duration_s > 0.0) {
                return Err(FaultPlanError::NonPositiveDuration(i));
            }
            match f.trigger {
                FaultTrigger::Periodic {
                    min_interval_s,
                    max_interval_s,
                } => {
                    if !(min_interval_s > 0.0) || max_interval_s < min_interval_s {
                        return Err(FaultPlanError::BadInterval(i));
                    }
                }
                FaultTrigger::AtWritePhase { delay_s, .. }
                | FaultTrigger::AtReadPhase { delay_s, .. } => {
                    if delay_s < 0.0 {
                        return Err(FaultPlanError::NegativeDelay(i));
                    }
                }
            }
            match f.target {
                FaultTarget::Node(n) => {
                    if n.0 >= u64::from(cluster.total_nodes()) {
                        return Err(FaultPlanError::NoSuchNode(i, n));
                    }
                }
                FaultTarget::RandomCompute => {
                    if cluster.compute_nodes == 0 {
                        return Err(FaultPlanError::NoSuchKind(i));
                    }
                }
                FaultTarget::RandomStorage => {
                    if cluster.storage_nodes == 0 {
                        return Err(FaultPlanError::NoSuchKind(i));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pick the concrete node a fault hits, drawing random targets from the
/// plan's generator stream.
pub fn resolve_target(
    target: FaultTarget,
    cluster: &ClusterSpec,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    match target {
        FaultTarget::Node(n) => n,
        FaultTarget::RandomCompute => {
            NodeId(rng.gen_range(0..u64::from(cluster.compute_nodes)))
        }
        FaultTarget::RandomStorage => {
            let lo = u64::from(cluster.compute_nodes);
            NodeId(rng.gen_range(lo..lo + u64::from(cluster.storage_nodes)))
        }
    }
}

/// Draw the gap to the next periodic injection.
pub fn periodic_gap(min_s: f64, max_s: f64, rng: &mut ChaCha8Rng) -> f64 {
    if max_s > min_s {
        rng.gen_range(min_s..=max_s)
    } else {
        min_s
    }
}
