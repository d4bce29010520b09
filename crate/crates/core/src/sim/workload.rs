//! Workload shapes: turn a small declarative description into concrete job
//! specs plus arrival rules. Byte volumes are desk-scale by convention
//! (MB where a production trace would say GB); shapes keep their ratios.

use serde::{Deserialize, Serialize};

use crate::ids::{JobId, StageId};
use crate::job::{JobSpec, OperatorKind, OutputSpec, RowGen, StageSpec};

/// Canonical mixed-workload shapes before any scaling: a large job and two
/// small ones per round.
pub const MIXED_LARGE_PARALLELISM: u32 = 512;
pub const MIXED_SMALL_PARALLELISM: u32 = 256;
pub const MIXED_LARGE_BYTES: u64 = 3_000_000_000;
pub const MIXED_SMALL_BYTES: u64 = 300_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WorkloadShape {
    /// `jobs` identical two-stage jobs, every partition equal.
    Uniform {
        jobs: u32,
        writers: u32,
        readers: u32,
        bytes_per_job: u64,
    },
    /// One job whose partition 0 receives `hot_fraction` of all bytes.
    Skewed {
        writers: u32,
        readers: u32,
        total_bytes: u64,
        hot_fraction: f64,
    },
    /// Per round, one large job plus two small ones; the next round starts
    /// when the previous round's jobs have all finished. `scale` multiplies
    /// bytes; `parallelism_divisor` shrinks the canonical 512/256 shapes for
    /// desk-scale runs.
    MixedLargeSmall {
        rounds: u32,
        scale: f64,
        parallelism_divisor: u32,
    },
    /// A single sort-shaped job: the downstream stage has barrier input.
    TeraSortLike { tasks: u32, total_bytes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ArrivalPolicy {
    AllAtOnce,
    /// Job i arrives at `i * gap_s`.
    Staggered { gap_s: f64 },
}

/// When a job enters the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Arrival {
    AtTime(f64),
    /// Submitted the moment every listed job has finished.
    AfterJobs(Vec<JobId>),
}

fn two_stage_job(
    job_id: JobId,
    writers: u32,
    readers: u32,
    rows: RowGen,
    input_per_task: u64,
    barrier: bool,
    payload_seed: u64,
) -> JobSpec {
    JobSpec {
        job_id,
        priority: 0,
        payload_seed,
        stages: vec![
            StageSpec {
                stage_id: StageId(0),
                operator: OperatorKind::Map,
                parallelism: writers,
                input_bytes_per_task: input_per_task,
                output: Some(OutputSpec {
                    out_partitions: readers,
                    rows,
                }),
                barrier_input: false,
                keys_out: None,
            },
            StageSpec {
                stage_id: StageId(1),
                operator: if barrier {
                    OperatorKind::Sort
                } else {
                    OperatorKind::Reduce
                },
                parallelism: readers,
                input_bytes_per_task: 0,
                output: None,
                barrier_input: barrier,
                keys_out: None,
            },
        ],
        edges: vec![(StageId(0), StageId(1))],
    }
}

/// Expand a shape into (spec, arrival) pairs with sequential job ids
/// starting at 1. `base_seed` feeds each job's payload identity.
pub fn generate(
    shape: WorkloadShape,
    arrival: ArrivalPolicy,
    base_seed: u64,
) -> Vec<(JobSpec, Arrival)> {
    let arrive = |i: usize| match arrival {
        ArrivalPolicy::AllAtOnce => Arrival::AtTime(0.0),
        ArrivalPolicy::Staggered { gap_s } => Arrival::AtTime(i as f64 * gap_s),
    };
    match shape {
        WorkloadShape::Uniform {
            jobs,
            writers,
            readers,
            bytes_per_job,
        } => (0..jobs)
            .map(|i| {
                let per_task = bytes_per_job / u64::from(writers);
                let spec = two_stage_job(
                    JobId(u64::from(i) + 1),
                    writers,
                    readers,
                    RowGen::Uniform {
                        per_task_bytes: per_task,
                    },
                    per_task,
                    false,
                    base_seed.wrapping_add(u64::from(i)),
                );
                (spec, arrive(i as usize))
            })
            .collect(),
        WorkloadShape::Skewed {
            writers,
            readers,
            total_bytes,
            hot_fraction,
        } => {
            let per_task = total_bytes / u64::from(writers);
            let spec = two_stage_job(
                JobId(1),
                writers,
                readers,
                RowGen::Skewed {
                    per_task_bytes: per_task,
                    hot_partition: 0,
                    hot_fraction,
                },
                per_task,
                false,
                base_seed,
            );
            vec![(spec, arrive(0))]
        }
        WorkloadShape::MixedLargeSmall {
            rounds,
            scale,
            parallelism_divisor,
        } => {
            let div = parallelism_divisor.max(1);
            let large_par = (MIXED_LARGE_PARALLELISM / div).max(1);
            let small_par = (MIXED_SMALL_PARALLELISM / div).max(1);
            let large_bytes = (MIXED_LARGE_BYTES as f64 * scale) as u64;
            let small_bytes = (MIXED_SMALL_BYTES as f64 * scale) as u64;
            let mut out = Vec::new();
            let mut next_id = 1u64;
            let mut prev_round: Vec<JobId> = Vec::new();
            for round in 0..rounds {
                let mut this_round = Vec::new();
                for (par, bytes) in [
                    (large_par, large_bytes),
                    (small_par, small_bytes),
                    (small_par, small_bytes),
                ] {
                    let id = JobId(next_id);
                    next_id += 1;
                    let per_task = (bytes / u64::from(par)).max(1);
                    let spec = two_stage_job(
                        id,
                        par,
                        par,
                        RowGen::Uniform {
                            per_task_bytes: per_task,
                        },
                        per_task,
                        false,
                        base_seed.wrapping_add(id.0),
                    );
                    let when = if round == 0 {
                        Arrival::AtTime(0.0)
                    } else {
                        Arrival::AfterJobs(prev_round.clone())
                    };
                    out.push((spec, when));
                    this_round.push(id);
                }
                prev_round = this_round;
            }
            out
        }
        WorkloadShape::TeraSortLike { tasks, total_bytes } => {
            let per_task = total_bytes / u64::from(tasks);
            let spec = two_stage_job(
                JobId(1),
                tasks,
                tasks,
                RowGen::Uniform {
                    per_task_bytes: per_task,
                },
                per_task,
                true,
                base_seed,
            );
            vec![(spec, arrive(0))]
        }
    }
}
