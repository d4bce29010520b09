//! Shuffle mode selection: decide per task whether shuffle output goes to
//! agent memory or to disk.
//!
//! The control plane summarizes historical task behaviour as a profile curve
//! over a grid of runtime thresholds τ: `y(τ)` is the fraction of shuffle
//! bytes produced by tasks that finished within τ (the share that would be
//! accelerated if every such task shuffled in memory), and `z(τ)` is the
//! per-machine memory that admitting those tasks would cost. Picking the
//! operating threshold is then a one-dimensional search: the largest τ whose
//! memory bill fits the currently free memory. A task shuffles in memory iff
//! its predicted runtime is at or below the active threshold.
//!
//! Curves are rebuilt rarely (history moves slowly); the threshold is
//! re-evaluated frequently because free memory does not.

use crate::block::ShuffleMode;
use crate::job::OperatorKind;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// How often the active threshold is re-evaluated against free memory.
pub const THRESHOLD_REFRESH_PERIOD_S: f64 = 30.0;
/// How often the profile curve itself is rebuilt from history.
pub const CURVE_REFRESH_PERIOD_S: f64 = 3600.0;
/// Fallback processing rate when no history matches an operator.
pub const DEFAULT_PROC_RATE_BPS: f64 = 10e6;

/// One finished task as remembered by the control plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskHistoryRecord {
    pub operator: OperatorKind,
    pub input_bytes: u64,
    pub runtime_s: f64,
    pub shuffle_bytes: u64,
    pub peak_mem_bytes: u64,
}

impl TaskHistoryRecord {
    fn check(&self) -> Result<(), ModeSelectError> {
        if !self.runtime_s.is_finite() || self.runtime_s < 0.0 {
            return Err(ModeSelectError::InvalidRecord("runtime must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Accelerable-share and memory-cost curves over a threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileCurve {
    /// Strictly increasing candidate thresholds (seconds).
    pub grid: Vec<f64>,
    /// y(τ): fraction of shuffle bytes from tasks with runtime <= τ.
    pub y: Vec<f64>,
    /// z(τ): per-machine memory bytes needed to admit those tasks.
    pub z: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModeSelectError {
    #[error("profile history is empty")]
    EmptyHistory,
    #[error("invalid history record: {0}")]
    InvalidRecord(&'static str),
    #[error("grid must hold at least 2 strictly increasing thresholds")]
    BadGrid,
    #[error("machine count must be positive")]
    NoMachines,
    #[error("curve file: {0}")]
    CurveFile(String),
    #[error("curve is not monotone at grid point {0}")]
    NotMonotone(usize),
}

impl ProfileCurve {
    /// Build the curve from history over an explicit threshold grid.
    /// `machine_count` converts total admitted memory into a per-machine bill.
    pub fn from_history(
        history: &[TaskHistoryRecord],
        grid: &[f64],
        machine_count: u32,
    ) -> Result<ProfileCurve, ModeSelectError> {
        if history.is_empty() {
            return Err(ModeSelectError::EmptyHistory);
        }
        if machine_count == 0 {
            return Err(ModeSelectError::NoMachines);
        }
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) || grid.iter().any(|t| !t.is_finite()) {
            return Err(ModeSelectError::BadGrid);
        }
        for r in history {
            r.check()?;
        }
        let total_shuffle: u64 = history.iter().map(|r| r.shuffle_bytes).sum();
        let mut y = Vec::with_capacity(grid.len());
        let mut z = Vec::with_capacity(grid.len());
        for &tau in grid {
            let mut bytes = 0u64;
            let mut mem = 0u64;
            for r in history {
                if r.runtime_s <= tau {
                    bytes += r.shuffle_bytes;
                    mem += r.peak_mem_bytes;
                }
            }
            y.push(if total_shuffle == 0 { 0.0 } else { bytes as f64 / total_shuffle as f64 });
            z.push(mem as f64 / f64::from(machine_count));
        }
        let curve = ProfileCurve { grid: grid.to_vec(), y, z };
        curve.check_monotone()?;
        Ok(curve)
    }

    /// Convenience grid: `resolution` evenly spaced thresholds from 0 to the
    /// slowest task in history (so y always reaches 1.0 at the top).
    pub fn grid_for(history: &[TaskHistoryRecord], resolution: usize) -> Vec<f64> {
        let max_rt = history.iter().map(|r| r.runtime_s).fold(0.0f64, f64::max).max(1e-9);
        let n = resolution.max(2);
        (0..n).map(|i| max_rt * i as f64 / (n - 1) as f64).collect()
    }

    fn check_monotone(&self) -> Result<(), ModeSelectError> {
        for i in 1..self.grid.len() {
            if self.y[i] < self.y[i - 1] || self.z[i] < self.z[i - 1] {
                return Err(ModeSelectError::NotMonotone(i));
            }
        }
        Ok(())
    }

    /// Load a curve from CSV with columns `tau_seconds,y_ratio,z_bytes`.
    pub fn from_csv(path: &Path) -> Result<ProfileCurve, ModeSelectError> {
        #[derive(Deserialize)]
        struct Row {
            tau_seconds: f64,
            y_ratio: f64,
            z_bytes: f64,
        }
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| ModeSelectError::CurveFile(e.to_string()))?;
        let mut grid = Vec::new();
        let mut y = Vec::new();
        let mut z = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| ModeSelectError::CurveFile(e.to_string()))?;
            grid.push(row.tau_seconds);
            y.push(row.y_ratio);
            z.push(row.z_bytes);
        }
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ModeSelectError::BadGrid);
        }
        let curve = ProfileCurve { grid, y, z };
        curve.check_monotone()?;
        Ok(curve)
    }
}

/// Pick the operating threshold: the largest grid τ whose memory bill fits
/// within `z_available_bytes`. Returns 0.0 when even the smallest point does
/// not fit (nothing shuffles in memory). Because y is non-decreasing in τ,
/// maximizing τ maximizes the accelerated share subject to the budget.
pub fn select_threshold(curve: &ProfileCurve, z_available_bytes: f64) -> f64 {
    let mut best = 0.0;
    for i in 0..curve.grid.len() {
        if curve.z[i] <= z_available_bytes {
            best = curve.grid[i];
        }
    }
    best
}

/// Where a runtime estimate came from; surfaced in debug dumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EstimateBasis {
    /// Median runtime-per-byte of operator-matched history.
    History { samples: usize },
    /// No matching history; default processing rate assumed.
    DefaultRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRuntimeEstimate {
    pub t_hat_s: f64,
    pub basis: EstimateBasis,
}

/// Predict a task's runtime from operator-matched history (median seconds per
/// input byte, scaled by this task's input), falling back to a flat default
/// rate when history has nothing comparable.
pub fn estimate_runtime(
    operator: OperatorKind,
    input_bytes: u64,
    history: &[TaskHistoryRecord],
    default_rate_bps: f64,
) -> TaskRuntimeEstimate {
    let mut ratios: Vec<f64> = history
        .iter()
        .filter(|r| r.operator == operator && r.input_bytes > 0)
        .map(|r| r.runtime_s / r.input_bytes as f64)
        .collect();
    if ratios.is_empty() {
        return TaskRuntimeEstimate {
            t_hat_s: input_bytes as f64 / default_rate_bps,
            basis: EstimateBasis::DefaultRate,
        };
    }
    ratios.sort_by(|a, b| a.total_cmp(b));
    let mid = ratios.len() / 2;
    let median = if ratios.len() % 2 == 1 {
        ratios[mid]
    } else {
        (ratios[mid - 1] + ratios[mid]) / 2.0
    };
    TaskRuntimeEstimate {
        t_hat_s: median * input_bytes as f64,
        basis: EstimateBasis::History { samples: ratios.len() },
    }
}

/// The mode rule: shuffle in memory iff the predicted runtime is within the
/// active threshold. The boundary case goes in-memory.
pub fn choose_mode(t_hat_s: f64, tau_star_s: f64) -> ShuffleMode {
    if t_hat_s <= tau_star_s {
        ShuffleMode::InMemory
    } else {
        ShuffleMode::OnDisk
    }
}
