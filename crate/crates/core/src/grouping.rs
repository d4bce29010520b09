//! Control plane for the agent fleet: registration, writer grouping,
//! liveness and per-job authorization.
//!
//! Writers are partitioned into fixed-size groups and each group is bound to
//! a short ordered list of agent replicas. The group cap is what bounds
//! fan-in: at most `k` writers ever converge on one agent for one job, so a
//! job with N writers produces an N/k-to-1 incast instead of N-to-1. The
//! replica list is a failover chain, not mirroring — writers send to the
//! first alive entry, and switch individually when their own transfer fails.

use crate::ids::{JobId, NodeId, WriterId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Default writers per group.
pub const DEFAULT_GROUP_SIZE: u32 = 100;
/// Default logical agent replicas per group.
pub const DEFAULT_GROUP_REPLICAS: u32 = 2;
/// An agent missing this many heartbeat periods is declared dead.
pub const LIVENESS_TIMEOUT_PERIODS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: NodeId,
    /// Load figure the agent last reported (assigned groups).
    pub reported_load: u64,
    pub last_heartbeat_s: f64,
    pub alive: bool,
}

/// Grouping decision for one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGroupPlan {
    pub job_id: JobId,
    pub group_size: u32,
    /// Writers in id order, chunked into groups.
    pub writer_groups: Vec<Vec<WriterId>>,
    /// Ordered agent replica list per group (first entry is primary).
    pub group_agents: Vec<Vec<NodeId>>,
}

impl AgentGroupPlan {
    /// Group index a writer belongs to.
    pub fn group_of(&self, w: WriterId) -> Option<usize> {
        self.writer_groups.iter().position(|g| g.binary_search(&w).is_ok())
    }

    /// All agents a reader of this job must consult, sorted and deduplicated.
    pub fn reader_agent_set(&self) -> Vec<NodeId> {
        let set: BTreeSet<NodeId> = self.group_agents.iter().flatten().copied().collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroupingError {
    #[error("need {needed} alive agents for a replica list, have {alive}")]
    InsufficientAgents { alive: usize, needed: usize },
    #[error("job {0} has no writers")]
    NoWriters(JobId),
    #[error("job {0} is already registered")]
    AlreadyRegistered(JobId),
    #[error("no job {0} registered")]
    UnknownJob(JobId),
}

/// The shuffle service manager: one per cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceManager {
    pub heartbeat_period_s: f64,
    agents: BTreeMap<NodeId, AgentRecord>,
    plans: BTreeMap<JobId, AgentGroupPlan>,
    deregistered: BTreeSet<JobId>,
}

impl ServiceManager {
    pub fn new(heartbeat_period_s: f64) -> Self {
        ServiceManager {
            heartbeat_period_s,
            agents: BTreeMap::new(),
            plans: BTreeMap::new(),
            deregistered: BTreeSet::new(),
        }
    }

    pub fn liveness_timeout_s(&self) -> f64 {
        LIVENESS_TIMEOUT_PERIODS * self.heartbeat_period_s
    }

    pub fn register_agent(&mut self, agent_id: NodeId, now: f64) {
        self.agents.insert(
            agent_id,
            AgentRecord { agent_id, reported_load: 0, last_heartbeat_s: now, alive: true },
        );
    }

    pub fn agent(&self, id: NodeId) -> Option<&AgentRecord> {
        self.agents.get(&id)
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentRecord> {
        self.agents.values()
    }

    pub fn plan(&self, job: JobId) -> Option<&AgentGroupPlan> {
        self.plans.get(&job)
    }

    /// Record a heartbeat. A beat from an agent previously declared dead
    /// revives it (the node reconnected).
    pub fn heartbeat(&mut self, agent_id: NodeId, reported_load: u64, now: f64) {
        if let Some(rec) = self.agents.get_mut(&agent_id) {
            rec.last_heartbeat_s = now;
            rec.reported_load = reported_load;
            rec.alive = true;
        }
    }

    /// Sweep the registry and declare agents dead whose last beat is older
    /// than the liveness timeout. Returns agents that just died.
    pub fn liveness_sweep(&mut self, now: f64) -> Vec<NodeId> {
        let timeout = self.liveness_timeout_s();
        let mut died = Vec::new();
        for rec in self.agents.values_mut() {
            if rec.alive && now - rec.last_heartbeat_s > timeout {
                rec.alive = false;
                died.push(rec.agent_id);
            }
        }
        died
    }

    /// Group `writers` into ⌈W/k⌉ chunks in writer-id order and bind each
    /// group to `r` distinct agents, chosen round-robin over alive agents
    /// sorted by (reported load, agent id). With equal loads this spreads
    /// group assignments so that no agent carries 2 more than any other.
    pub fn register_job(
        &mut self,
        job_id: JobId,
        writers: &[WriterId],
        group_size: u32,
        replicas: u32,
        now: f64,
    ) -> Result<AgentGroupPlan, GroupingError> {
        let _ = now;
        if writers.is_empty() {
            return Err(GroupingError::NoWriters(job_id));
        }
        if self.plans.contains_key(&job_id) {
            return Err(GroupingError::AlreadyRegistered(job_id));
        }
        let mut alive: Vec<&AgentRecord> = self.agents.values().filter(|a| a.alive).collect();
        if alive.len() < replicas as usize {
            return Err(GroupingError::InsufficientAgents {
                alive: alive.len(),
                needed: replicas as usize,
            });
        }
        alive.sort_by_key(|a| (a.reported_load, a.agent_id));
        let ring: Vec<NodeId> = alive.iter().map(|a| a.agent_id).collect();

        let mut sorted = writers.to_vec();
        sorted.sort();
        sorted.dedup();
        let writer_groups: Vec<Vec<WriterId>> =
            sorted.chunks(group_size as usize).map(|c| c.to_vec()).collect();

        let mut group_agents = Vec::with_capacity(writer_groups.len());
        let mut cursor = 0usize;
        for _ in &writer_groups {
            let mut list = Vec::with_capacity(replicas as usize);
            for j in 0..replicas as usize {
                list.push(ring[(cursor + j) % ring.len()]);
            }
            cursor += replicas as usize;
            group_agents.push(list);
        }
        for list in &group_agents {
            let uniq: BTreeSet<&NodeId> = list.iter().collect();
            debug_assert_eq!(uniq.len(), list.len(), "replica list repeats a node");
        }
        // Account the new load so later registrations see it.
        for list in &group_agents {
            for agent in list {
                if let Some(rec) = self.agents.get_mut(agent) {
                    rec.reported_load += 1;
                }
            }
        }
        let plan = AgentGroupPlan {
            job_id,
            group_size,
            writer_groups,
            group_agents,
        };
        self.plans.insert(job_id, plan.clone());
        self.deregistered.remove(&job_id);
        Ok(plan)
    }

    /// Next alive agent after `failed` in the group's replica order,
    /// scanning cyclically. `None` means the whole chain is down and the
    /// caller has to escalate (fail the write, let recovery handle it).
    pub fn failover_target(&self, job: JobId, group: usize, failed: NodeId) -> Option<NodeId> {
        let plan = self.plans.get(&job)?;
        let list = plan.group_agents.get(group)?;
        let start = list.iter().position(|&a| a == failed)?;
        for step in 1..=list.len() {
            let cand = list[(start + step) % list.len()];
            if cand != failed && self.agents.get(&cand).map_or(false, |a| a.alive) {
                return Some(cand);
            }
        }
        None
    }

    /// May `agent` hold or serve data for `job`? True only while the job is
    /// registered and the agent is part of its plan.
    pub fn authorize(&self, job: JobId, agent: NodeId) -> bool {
        if self.deregistered.contains(&job) {
            return false;
        }
        self.plans
            .get(&job)
            .map_or(false, |p| p.group_agents.iter().any(|g| g.contains(&agent)))
    }

    /// Job finished: drop its plan so agents can free retained data.
    pub fn deregister_job(&mut self, job: JobId) -> Result<(), GroupingError> {
        if self.plans.remove(&job).is_none() {
            return Err(GroupingError::UnknownJob(job));
        }
        self.deregistered.insert(job);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manager_with_agents(n: u64) -> ServiceManager {
        let mut m = ServiceManager::new(1.0);
        for i in 0..n {
            m.register_agent(NodeId(i), 0.0);
        }
        m
    }

    fn writers(n: u64) -> Vec<WriterId> {
        (0..n).map(WriterId).collect()
    }

    #[test]
    fn groups_chunk_in_writer_order() {
        let mut m = manager_with_agents(6);
        let plan = m.register_job(JobId(0), &writers(250), 100, 2, 0.0).unwrap();
        assert_eq!(plan.writer_groups.len(), 3);
        assert_eq!(plan.writer_groups[0].len(), 100);
        assert_eq!(plan.writer_groups[1].len(), 100);
        assert_eq!(plan.writer_groups[2].len(), 50);
        assert_eq!(plan.writer_groups[0][0], WriterId(0));
        assert_eq!(plan.writer_groups[2][49], WriterId(249));
        assert_eq!(plan.group_of(WriterId(150)), Some(1));
    }

    #[test]
    fn replica_lists_are_distinct_and_spread() {
        let mut m = manager_with_agents(4);
        let plan = m.register_job(JobId(0), &writers(400), 100, 2, 0.0).unwrap();
        // 4 groups x 2 replicas over 4 agents: every agent carries exactly 2.
        let mut counts = BTreeMap::new();
        for list in &plan.group_agents {
            let uniq: BTreeSet<_> = list.iter().collect();
            assert_eq!(uniq.len(), list.len());
            for a in list {
                *counts.entry(*a).or_insert(0) += 1;
            }
        }
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert!(max - min <= 1, "assignment spread {counts:?}");
    }

    #[test]
    fn registration_needs_enough_alive_agents() {
        let mut m = manager_with_agents(1);
        assert_eq!(
            m.register_job(JobId(0), &writers(10), 100, 2, 0.0),
            Err(GroupingError::InsufficientAgents { alive: 1, needed: 2 })
        );
    }

    #[test]
    fn liveness_boundary_is_three_periods() {
        let mut m = manager_with_agents(1);
        m.heartbeat(NodeId(0), 0, 0.0);
        // 2.9 s since last beat with a 1 s period: still alive.
        assert!(m.liveness_sweep(2.9).is_empty());
        assert!(m.agent(NodeId(0)).unwrap().alive);
        // 3.1 s: dead.
        assert_eq!(m.liveness_sweep(3.1), vec![NodeId(0)]);
        assert!(!m.agent(NodeId(0)).unwrap().alive);
        // A fresh beat revives it.
        m.heartbeat(NodeId(0), 0, 3.2);
        assert!(m.agent(NodeId(0)).unwrap().alive);
    }

    #[test]
    fn failover_walks_replica_list_skipping_dead() {
        let mut m = manager_with_agents(3);
        let plan = m.register_job(JobId(0), &writers(10), 100, 3, 0.0).unwrap();
        let list = plan.group_agents[0].clone();
        assert_eq!(m.failover_target(JobId(0), 0, list[0]), Some(list[1]));
        // Kill the second replica; failover from the first skips to the third.
        if let Some(rec) = m.agents.get_mut(&list[1]) {
            rec.alive = false;
        }
        assert_eq!(m.failover_target(JobId(0), 0, list[0]), Some(list[2]));
        // Everyone dead: escalate.
        for a in &list {
            m.agents.get_mut(a).unwrap().alive = false;
        }
        assert_eq!(m.failover_target(JobId(0), 0, list[0]), None);
    }

    #[test]
    fn authorization_follows_job_lifecycle() {
        let mut m = manager_with_agents(2);
        let plan = m.register_job(JobId(7), &writers(5), 100, 2, 0.0).unwrap();
        let agent = plan.group_agents[0][0];
        assert!(m.authorize(JobId(7), agent));
        assert!(!m.authorize(JobId(8), agent));
        m.deregister_job(JobId(7)).unwrap();
        assert!(!m.authorize(JobId(7), agent));
        assert_eq!(m.deregister_job(JobId(7)), Err(GroupingError::UnknownJob(JobId(7))));
    }

    #[test]
    fn registration_prefers_lightly_loaded_agents() {
        let mut m = manager_with_agents(3);
        m.heartbeat(NodeId(0), 10, 0.0);
        m.heartbeat(NodeId(1), 0, 0.0);
        m.heartbeat(NodeId(2), 5, 0.0);
        let plan = m.register_job(JobId(0), &writers(10), 100, 2, 0.0).unwrap();
        // One group, two replicas: the two least-loaded agents in load order.
        assert_eq!(plan.group_agents[0], vec![NodeId(1), NodeId(2)]);
    }

    #[test]
    fn plan_serializes_to_json() {
        let mut m = manager_with_agents(2);
        let plan = m.register_job(JobId(0), &writers(3), 2, 2, 0.0).unwrap();
        let json = serde_json::to_string_pretty(&plan).unwrap();
        let back: AgentGroupPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
