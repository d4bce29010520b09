//! Per-job and per-run metrics, derived two ways: the engine keeps online
//! accumulators while it runs, and [`account`] recomputes the same numbers
//! from a recorded trace. Tests hold the two within a hair of each other,
//! which catches drift in either direction.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ids::JobId;
use crate::sim::trace::{TaskKind, TraceEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub job: JobId,
    pub submit_s: f64,
    pub done_s: f64,
    pub completed: bool,
    /// Wall-clock from submission to completion.
    pub e2e_s: f64,
    /// Slot occupancy across all task attempts, in slot-minutes.
    pub cu_slot_min: f64,
    /// Task attempts beyond each task's first.
    pub rerun_times: u64,
    pub write_task_s: f64,
    pub read_task_s: f64,
    pub shuffle_bytes: u64,
    pub mem_served_bytes: u64,
    pub disk_served_bytes: u64,
    /// Fraction of fetched shuffle bytes served straight from agent memory.
    pub memory_shuffle_util: f64,
}

impl JobMetrics {
    fn new(job: JobId) -> Self {
        JobMetrics {
            job,
            submit_s: 0.0,
            done_s: f64::NAN,
            completed: false,
            e2e_s: f64::NAN,
            cu_slot_min: 0.0,
            rerun_times: 0,
            write_task_s: 0.0,
            read_task_s: 0.0,
            shuffle_bytes: 0,
            mem_served_bytes: 0,
            disk_served_bytes: 0,
            memory_shuffle_util: 0.0,
        }
    }

    fn finish(&mut self) {
        let total = self.mem_served_bytes + self.disk_served_bytes;
        self.memory_shuffle_util = if total == 0 {
            0.0
        } else {
            self.mem_served_bytes as f64 / total as f64
        };
        if self.completed {
            self.e2e_s = self.done_s - self.submit_s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub jobs: Vec<JobMetrics>,
    /// Last event time in the run.
    pub makespan_s: f64,
    pub total_cu_slot_min: f64,
    pub total_rerun_times: u64,
    pub total_write_task_s: f64,
    pub total_read_task_s: f64,
    pub total_mem_served_bytes: u64,
    pub total_disk_served_bytes: u64,
    pub memory_shuffle_util: f64,
    pub jobs_completed: u32,
}

impl RunMetrics {
    pub fn job(&self, id: JobId) -> Option<&JobMetrics> {
        self.jobs.iter().find(|j| j.job == id)
    }

    /// Sum of per-job end-to-end times over completed jobs.
    pub fn total_e2e_s(&self) -> f64 {
        self.jobs
            .iter()
            .filter(|j| j.completed)
            .map(|j| j.e2e_s)
            .sum()
    }

    pub fn from_jobs(jobs: Vec<JobMetrics>, makespan_s: f64) -> Self {
        let mut m = RunMetrics {
            jobs,
            makespan_s,
            total_cu_slot_min: 0.0,
            total_rerun_times: 0,
            total_write_task_s: 0.0,
            total_read_task_s: 0.0,
            total_mem_served_bytes: 0,
            total_disk_served_bytes: 0,
            memory_shuffle_util: 0.0,
            jobs_completed: 0,
        };
        for j in &m.jobs {
            m.total_cu_slot_min += j.cu_slot_min;
            m.total_rerun_times += j.rerun_times;
            m.total_write_task_s += j.write_task_s;
            m.total_read_task_s += j.read_task_s;
            m.total_mem_served_bytes += j.mem_served_bytes;
            m.total_disk_served_bytes += j.disk_served_bytes;
            if j.completed {
                m.jobs_completed += 1;
            }
        }
        let total = m.total_mem_served_bytes + m.total_disk_served_bytes;
        m.memory_shuffle_util = if total == 0 {
            0.0
        } else {
            m.total_mem_served_bytes as f64 / total as f64
        };
        m
    }

    /// Write one CSV row per job plus a trailing `total` row.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "job",
            "submit_s",
            "done_s",
            "completed",
            "e2e_s",
            "cu_slot_min",
            "rerun_times",
            "write_task_s",
            "read_task_s",
            "shuffle_bytes",
            "mem_served_bytes",
            "disk_served_bytes",
            "memory_shuffle_util",
        ])?;
        for j in &self.jobs {
            out.write_record([
                j.job.0.to_string(),
                format!("{:.6}", j.submit_s),
                format!("{:.6}", j.done_s),
                j.completed.to_string(),
                format!("{:.6}", j.e2e_s),
                format!("{:.6}", j.cu_slot_min),
                j.rerun_times.to_string(),
                format!("{:.6}", j.write_task_s),
                format!("{:.6}", j.read_task_s),
                j.shuffle_bytes.to_string(),
                j.mem_served_bytes.to_string(),
                j.disk_served_bytes.to_string(),
                format!("{:.6}", j.memory_shuffle_util),
            ])?;
        }
        out.write_record([
            "total".to_string(),
            String::new(),
            format!("{:.6}", self.makespan_s),
            self.jobs_completed.to_string(),
            format!("{:.6}", self.total_e2e_s()),
            format!("{:.6}", self.total_cu_slot_min),
            self.total_rerun_times.to_string(),
            format!("{:.6}", self.total_write_task_s),
            format!("{:.6}", self.total_read_task_s),
            String::new(),
            self.total_mem_served_bytes.to_string(),
            self.total_disk_served_bytes.to_string(),
            format!("{:.6}", self.memory_shuffle_util),
        ])?;
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("csv into Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// Rebuild [`RunMetrics`] from a trace alone. Events are consumed in
/// recorded order so floating-point sums accumulate exactly as the engine's
/// own counters did.
pub fn account(trace: &[TraceEvent]) -> RunMetrics {
    let mut jobs: BTreeMap<JobId, JobMetrics> = BTreeMap::new();
    let mut starts: BTreeMap<(JobId, u64, u32, u32), f64> = BTreeMap::new();
    let mut makespan = 0.0f64;
    for ev in trace {
        makespan = makespan.max(ev.time());
        match *ev {
            TraceEvent::JobSubmit {
                t,
                job,
                shuffle_bytes,
                ..
            } => {
                let m = jobs.entry(job).or_insert_with(|| JobMetrics::new(job));
                m.submit_s = t;
                m.shuffle_bytes = shuffle_bytes;
            }
            TraceEvent::JobDone { t, job, completed } => {
                let m = jobs.entry(job).or_insert_with(|| JobMetrics::new(job));
                m.done_s = t;
                m.completed = completed;
            }
            TraceEvent::TaskStart {
                t,
                job,
                stage,
                task,
                attempt,
                ..
            } => {
                starts.insert((job, stage.0, task, attempt), t);
            }
            TraceEvent::TaskEnd {
                t,
                job,
                stage,
                task,
                attempt,
                kind,
                ..
            } => {
                let started = starts
                    .remove(&(job, stage.0, task, attempt))
                    .unwrap_or(t);
                let dur = t - started;
                let m = jobs.entry(job).or_insert_with(|| JobMetrics::new(job));
                m.cu_slot_min += dur / 60.0;
                match kind {
                    TaskKind::Writer => m.write_task_s += dur,
                    TaskKind::Reader => m.read_task_s += dur,
                }
            }
            TraceEvent::Rerun { job, .. } => {
                jobs.entry(job)
                    .or_insert_with(|| JobMetrics::new(job))
                    .rerun_times += 1;
            }
            TraceEvent::Fetch {
                job,
                from_memory,
                bytes,
                ..
            } => {
                let m = jobs.entry(job).or_insert_with(|| JobMetrics::new(job));
                if from_memory {
                    m.mem_served_bytes += bytes;
                } else {
                    m.disk_served_bytes += bytes;
                }
            }
            _ => {}
        }
    }
    let mut list: Vec<JobMetrics> = jobs.into_values().collect();
    for j in &mut list {
        j.finish();
    }
    RunMetrics::from_jobs(list, makespan)
}
