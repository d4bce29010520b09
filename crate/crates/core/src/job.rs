//! Job and stage descriptions.
//!
//! Jobs are synthetic DAGs: stages with a parallelism, an operator kind and a
//! per-task output distribution toward the next stage's partitions. The
//! output distribution is stored as a generator (uniform / skewed) or an
//! explicit matrix; either way `output_row` materializes exact per-partition
//! byte counts, so "every produced byte" is well defined for the conservation
//! checks downstream.

use crate::ids::{JobId, StageId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    Map,
    Reduce,
    Sort,
    Aggregate,
    Join,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Map => "map",
            OperatorKind::Reduce => "reduce",
            OperatorKind::Sort => "sort",
            OperatorKind::Aggregate => "aggregate",
            OperatorKind::Join => "join",
        }
    }
}

/// How a stage's tasks spread their output over downstream partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RowGen {
    /// Explicit per-task rows (row per task, column per partition).
    Matrix(Vec<Vec<u64>>),
    /// Every task emits `per_task_bytes`, split evenly over all partitions.
    Uniform { per_task_bytes: u64 },
    /// Every task emits `per_task_bytes`; `hot_fraction` of it lands in
    /// `hot_partition`, the rest spreads evenly over the other partitions.
    Skewed { per_task_bytes: u64, hot_partition: u32, hot_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub out_partitions: u32,
    pub rows: RowGen,
}

impl OutputSpec {
    /// Exact per-partition bytes for one task. Integer remainders are handed
    /// to the lowest partition ids so rows always sum to the declared volume.
    pub fn output_row(&self, task_idx: u32) -> Vec<u64> {
        let p = self.out_partitions as u64;
        match &self.rows {
            RowGen::Matrix(rows) => rows[task_idx as usize].clone(),
            RowGen::Uniform { per_task_bytes } => {
                let base = per_task_bytes / p;
                let rem = per_task_bytes % p;
                (0..p).map(|i| base + u64::from(i < rem)).collect()
            }
            RowGen::Skewed { per_task_bytes, hot_partition, hot_fraction } => {
                let hot = (*per_task_bytes as f64 * hot_fraction).round() as u64;
                let hot = hot.min(*per_task_bytes);
                let rest = per_task_bytes - hot;
                if p == 1 {
                    return vec![*per_task_bytes];
                }
                let others = p - 1;
                let base = rest / others;
                let rem = rest % others;
                let mut cold_rank = 0;
                (0..self.out_partitions)
                    .map(|i| {
                        if i == *hot_partition {
                            hot
                        } else {
                            let r = cold_rank;
                            cold_rank += 1;
                            base + u64::from(r < rem)
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn task_total(&self, task_idx: u32) -> u64 {
        self.output_row(task_idx).iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage_id: StageId,
    pub operator: OperatorKind,
    pub parallelism: u32,
    /// External input per task; drives compute time for source stages.
    pub input_bytes_per_task: u64,
    /// Shuffle output toward the downstream stage; `None` for sinks.
    pub output: Option<OutputSpec>,
    /// Barrier semantics: downstream consumption may not begin until this
    /// stage's input is fully materialized (e.g. a global sort).
    pub barrier_input: bool,
    /// Ground-truth distinct-key counts per output partition, carried as
    /// workload metadata for the skew statistics interface.
    pub keys_out: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: JobId,
    pub priority: i64,
    /// Seed for payload identity; re-executions regenerate identical payloads.
    pub payload_seed: u64,
    pub stages: Vec<StageSpec>,
    /// Shuffle edges as (upstream stage_id, downstream stage_id).
    pub edges: Vec<(StageId, StageId)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JobSpecError {
    #[error("stage ids must be unique")]
    DuplicateStage,
    #[error("edge references unknown stage {0}")]
    UnknownStage(StageId),
    #[error("stage {0} has zero parallelism")]
    ZeroParallelism(StageId),
    #[error("stage graph has a cycle")]
    Cycle,
    #[error("upstream stage {0} of a shuffle edge declares no output")]
    MissingOutput(StageId),
    #[error("edge {0}->{1}: upstream emits {2} partitions but downstream parallelism is {3}")]
    PartitionMismatch(StageId, StageId, u32, u32),
    #[error("stage {0}: output matrix shape does not match parallelism/partitions")]
    MatrixShape(StageId),
    #[error("stage {0} has more than one upstream or downstream edge")]
    NotAChain(StageId),
}

impl JobSpec {
    pub fn stage(&self, id: StageId) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.stage_id == id)
    }

    pub fn upstream_of(&self, id: StageId) -> Option<StageId> {
        self.edges.iter().find(|(_, d)| *d == id).map(|(u, _)| *u)
    }

    pub fn downstream_of(&self, id: StageId) -> Option<StageId> {
        self.edges.iter().find(|(u, _)| *u == id).map(|(_, d)| *d)
    }

    /// Total shuffle bytes this job will move (sum over all edges).
    pub fn total_shuffle_bytes(&self) -> u64 {
        self.stages
            .iter()
            .filter(|s| self.downstream_of(s.stage_id).is_some())
            .map(|s| (0..s.parallelism).map(|t| s.output.as_ref().unwrap().task_total(t)).sum::<u64>())
            .sum()
    }

    /// Structural validation: unique ids, edges resolve, acyclic, output
    /// shapes consistent with downstream parallelism.
    pub fn validate(&self) -> Result<(), JobSpecError> {
        let mut seen = BTreeSet::new();
        for s in &self.stages {
            if !seen.insert(s.stage_id) {
                return Err(JobSpecError::DuplicateStage);
            }
            if s.parallelism == 0 {
                return Err(JobSpecError::ZeroParallelism(s.stage_id));
            }
            if let Some(out) = &s.output {
                if let RowGen::Matrix(rows) = &out.rows {
                    if rows.len() != s.parallelism as usize
                        || rows.iter().any(|r| r.len() != out.out_partitions as usize)
                    {
                        return Err(JobSpecError::MatrixShape(s.stage_id));
                    }
                }
            }
        }
        for &(u, d) in &self.edges {
            let us = self.stage(u).ok_or(JobSpecError::UnknownStage(u))?;
            let ds = self.stage(d).ok_or(JobSpecError::UnknownStage(d))?;
            let out = us.output.as_ref().ok_or(JobSpecError::MissingOutput(u))?;
            if out.out_partitions != ds.parallelism {
                return Err(JobSpecError::PartitionMismatch(u, d, out.out_partitions, ds.parallelism));
            }
        }
        // Cycle check over the edge relation (Kahn's algorithm).
        let mut indeg: BTreeMap<StageId, usize> = self.stages.iter().map(|s| (s.stage_id, 0)).collect();
        for &(_, d) in &self.edges {
            *indeg.get_mut(&d).unwrap() += 1;
        }
        let mut ready: Vec<StageId> =
            indeg.iter().filter(|(_, &n)| n == 0).map(|(&s, _)| s).collect();
        let mut visited = 0;
        while let Some(s) = ready.pop() {
            visited += 1;
            for &(u, d) in &self.edges {
                if u == s {
                    let n = indeg.get_mut(&d).unwrap();
                    *n -= 1;
                    if *n == 0 {
                        ready.push(d);
                    }
                }
            }
        }
        if visited != self.stages.len() {
            return Err(JobSpecError::Cycle);
        }
        Ok(())
    }

    /// Stronger shape check used by the simulator: stages must form a single
    /// linear chain (each stage at most one upstream and one downstream).
    /// Returns stage ids in chain order.
    pub fn validate_chain(&self) -> Result<Vec<StageId>, JobSpecError> {
        self.validate()?;
        for s in &self.stages {
            let ins = self.edges.iter().filter(|(_, d)| *d == s.stage_id).count();
            let outs = self.edges.iter().filter(|(u, _)| *u == s.stage_id).count();
            if ins > 1 || outs > 1 {
                return Err(JobSpecError::NotAChain(s.stage_id));
            }
        }
        let mut order = Vec::with_capacity(self.stages.len());
        let mut cur = self
            .stages
            .iter()
            .map(|s| s.stage_id)
            .find(|&s| self.upstream_of(s).is_none())
            .ok_or(JobSpecError::Cycle)?;
        loop {
            order.push(cur);
            match self.downstream_of(cur) {
                Some(next) => cur = next,
                None => break,
            }
        }
        if order.len() != self.stages.len() {
            return Err(JobSpecError::NotAChain(cur));
        }
        Ok(order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_stage(rows: RowGen, out_partitions: u32, readers: u32) -> JobSpec {
        JobSpec {
            job_id: JobId(0),
            priority: 0,
            payload_seed: 1,
            stages: vec![
                StageSpec {
                    stage_id: StageId(0),
                    operator: OperatorKind::Map,
                    parallelism: 2,
                    input_bytes_per_task: 1000,
                    output: Some(OutputSpec { out_partitions, rows }),
                    barrier_input: false,
                    keys_out: None,
                },
                StageSpec {
                    stage_id: StageId(1),
                    operator: OperatorKind::Reduce,
                    parallelism: readers,
                    input_bytes_per_task: 0,
                    output: None,
                    barrier_input: false,
                    keys_out: None,
                },
            ],
            edges: vec![(StageId(0), StageId(1))],
        }
    }

    #[test]
    fn uniform_rows_split_exactly() {
        let job = two_stage(RowGen::Uniform { per_task_bytes: 50 }, 2, 2);
        let out = job.stages[0].output.as_ref().unwrap();
        // 2 writers x 2 readers at 100 total bytes => four 25-byte chunks.
        assert_eq!(out.output_row(0), vec![25, 25]);
        assert_eq!(out.output_row(1), vec![25, 25]);
        assert_eq!(job.total_shuffle_bytes(), 100);
    }

    #[test]
    fn uniform_remainder_goes_to_low_partitions() {
        let out = OutputSpec { out_partitions: 3, rows: RowGen::Uniform { per_task_bytes: 10 } };
        assert_eq!(out.output_row(0), vec![4, 3, 3]);
        assert_eq!(out.task_total(0), 10);
    }

    #[test]
    fn skewed_rows_put_fraction_on_hot_partition() {
        let out = OutputSpec {
            out_partitions: 4,
            rows: RowGen::Skewed { per_task_bytes: 1000, hot_partition: 0, hot_fraction: 0.9 },
        };
        let row = out.output_row(0);
        assert_eq!(row[0], 900);
        assert_eq!(row.iter().sum::<u64>(), 1000);
        // Cold partitions are within a byte of each other.
        assert!(row[1..].iter().max().unwrap() - row[1..].iter().min().unwrap() <= 1);
    }

    #[test]
    fn validate_catches_partition_mismatch() {
        let job = two_stage(RowGen::Uniform { per_task_bytes: 10 }, 3, 2);
        assert_eq!(
            job.validate(),
            Err(JobSpecError::PartitionMismatch(StageId(0), StageId(1), 3, 2))
        );
    }

    #[test]
    fn validate_catches_cycle() {
        let mut job = two_stage(RowGen::Uniform { per_task_bytes: 10 }, 2, 2);
        job.stages[1].output =
            Some(OutputSpec { out_partitions: 2, rows: RowGen::Uniform { per_task_bytes: 1 } });
        job.edges.push((StageId(1), StageId(0)));
        assert_eq!(job.validate(), Err(JobSpecError::Cycle));
    }

    #[test]
    fn chain_order() {
        let job = two_stage(RowGen::Uniform { per_task_bytes: 10 }, 2, 2);
        assert_eq!(job.validate_chain().unwrap(), vec![StageId(0), StageId(1)]);
    }
}
