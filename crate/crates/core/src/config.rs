//! Declarative experiment configuration: a flat `key.path = value` text
//! format with an embedded schema version.
//!
//! The same module produces the canonical echo — every key explicit, sorted,
//! defaults materialized — which is what gets hashed for provenance. A run
//! is reproducible from its echo alone, and comparisons across runs check
//! the workload-identity hash (workload + cluster + rates + seed) so that
//! only like-for-like runs are compared.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest as _, Sha256};

use crate::agent::MemoryWatermarks;
use crate::job::JobSpec;
use crate::sched::SchedMode;
use crate::sim::engine::{BackupMode, SimConfig};
use crate::sim::fault::{FaultPlan, FaultSpec, FaultTarget, FaultTrigger};
use crate::sim::workload::{generate, Arrival, ArrivalPolicy, WorkloadShape};

pub const SCHEMA_VERSION: u64 = 1;

/// One field-level problem found while parsing or validating a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigDiag {
    /// 1-based line number when the problem is tied to a specific line.
    pub line: Option<usize>,
    pub key: String,
    pub msg: String,
}

impl fmt::Display for ConfigDiag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {}: {}: {}", n, self.key, self.msg),
            None => write!(f, "{}: {}", self.key, self.msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub diags: Vec<ConfigDiag>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid config ({} problem(s)):", self.diags.len())?;
        for d in &self.diags {
            writeln!(f, "  {d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// A fully resolved experiment: what to run, on what cluster, with which
/// policies, faults, and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Seed from the file; the CLI `--seed` flag takes precedence.
    pub seed: Option<u64>,
    pub shape: WorkloadShape,
    pub arrival: ArrivalPolicy,
    pub sim: SimConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut p = Parser::scan(text);

        match p.take_u64("schema") {
            Some(SCHEMA_VERSION) => {}
            Some(v) => p.diag(
                "schema",
                format!("unsupported schema version {v} (expected {SCHEMA_VERSION})"),
            ),
            None => p.require_missing("schema"),
        }
        let seed = p.take_u64("seed");

        let shape = p.parse_shape();
        let arrival = p.parse_arrival();
        let sim = p.parse_sim();

        // Anything still unconsumed is a key we don't know (or one that does
        // not apply to the chosen workload shape).
        let leftovers: Vec<(String, (usize, String))> =
            p.map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (key, (line, _)) in leftovers {
            p.diags.push(ConfigDiag {
                line: Some(line),
                key,
                msg: "unknown or inapplicable key".into(),
            });
        }

        if !p.diags.is_empty() {
            return Err(ConfigError { diags: p.diags });
        }
        Ok(ExperimentConfig {
            seed,
            shape: shape.expect("no diags means shape parsed"),
            arrival,
            sim,
        })
    }

    /// Final seed for a run: CLI flag wins, then the file, else an error —
    /// runs without a pinned seed are not reproducible.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, ConfigError> {
        flag.or(self.seed).ok_or_else(|| ConfigError {
            diags: vec![ConfigDiag {
                line: None,
                key: "seed".into(),
                msg: "no seed in config and no --seed flag".into(),
            }],
        })
    }

    pub fn workload(&self, seed: u64) -> Vec<(JobSpec, Arrival)> {
        generate(self.shape.clone(), self.arrival.clone(), seed)
    }

    /// Canonical text form: every key explicit, values normalized, sorted.
    /// Parsing the echo reproduces this config exactly.
    pub fn canonical(&self, seed: u64) -> String {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));

        put("schema", SCHEMA_VERSION.to_string());
        put("seed", seed.to_string());

        match &self.shape {
            WorkloadShape::Uniform { jobs, writers, readers, bytes_per_job } => {
                put("workload.shape", "uniform".into());
                put("workload.jobs", jobs.to_string());
                put("workload.writers", writers.to_string());
                put("workload.readers", readers.to_string());
                put("workload.bytes_per_job", bytes_per_job.to_string());
            }
            WorkloadShape::Skewed { writers, readers, total_bytes, hot_fraction } => {
                put("workload.shape", "skewed".into());
                put("workload.writers", writers.to_string());
                put("workload.readers", readers.to_string());
                put("workload.total_bytes", total_bytes.to_string());
                put("workload.hot_fraction", hot_fraction.to_string());
            }
            WorkloadShape::MixedLargeSmall { rounds, scale, parallelism_divisor } => {
                put("workload.shape", "mixed".into());
                put("workload.rounds", rounds.to_string());
                put("workload.scale", scale.to_string());
                put("workload.parallelism_divisor", parallelism_divisor.to_string());
            }
            WorkloadShape::TeraSortLike { tasks, total_bytes } => {
                put("workload.shape", "terasort".into());
                put("workload.tasks", tasks.to_string());
                put("workload.total_bytes", total_bytes.to_string());
            }
        }
        match &self.arrival {
            ArrivalPolicy::AllAtOnce => put("workload.arrival", "all_at_once".into()),
            ArrivalPolicy::Staggered { gap_s } => {
                put("workload.arrival", "staggered".into());
                put("workload.arrival_gap_s", gap_s.to_string());
            }
        }

        let c = &self.sim.cluster;
        put("cluster.compute_nodes", c.compute_nodes.to_string());
        put("cluster.compute_memory", c.compute_memory_bytes.to_string());
        put("cluster.compute_slots", c.compute_slots.to_string());
        put("cluster.compute_disk_bps", c.compute_disk_bps.to_string());
        put("cluster.storage_nodes", c.storage_nodes.to_string());
        put("cluster.storage_disk_bps", c.storage_disk_bps.to_string());
        put("cluster.ingress_bps", c.ingress_bps.to_string());
        put("cluster.egress_bps", c.egress_bps.to_string());
        put("cluster.latency_s", c.latency_s.to_string());

        let r = &self.sim.rates;
        put("rates.map_bps", r.map_bps.to_string());
        put("rates.reduce_bps", r.reduce_bps.to_string());
        put("rates.task_startup_s", r.task_startup_s.to_string());
        put("rates.task_mem", r.task_mem_bytes.to_string());
        put("rates.jitter_frac", r.jitter_frac.to_string());
        put("rates.emission_rounds", r.emission_rounds.to_string());
        put("rates.poll_interval_s", r.poll_interval_s.to_string());
        put("rates.heartbeat_period_s", r.heartbeat_period_s.to_string());

        let s = &self.sim.sched;
        put(
            "sched.mode",
            match s.forced_mode {
                None => "auto".into(),
                Some(SchedMode::Staged) => "staged".into(),
                Some(SchedMode::Gang) => "gang".into(),
                Some(SchedMode::Progressive) => "progressive".into(),
            },
        );
        put("sched.lambda", s.lambda.to_string());
        put("sched.low_parallelism_cutoff", s.low_parallelism_cutoff.to_string());
        put("sched.dispatch_latency_s", s.dispatch_latency_s.to_string());

        let t = &self.sim.thresholds;
        put("layout.alpha_s", t.alpha_s.to_string());
        put("layout.beta_bytes", t.beta_bytes.to_string());
        put("layout.gamma_bytes", t.gamma_bytes.to_string());

        put(
            "backup.mode",
            match self.sim.backup_mode {
                BackupMode::NoBackup => "none".into(),
                BackupMode::AllBackup => "all".into(),
                BackupMode::Adaptive => "adaptive".into(),
            },
        );
        put("grouping.size", self.sim.group_size.to_string());
        put("grouping.replicas", self.sim.group_replicas.to_string());

        put("proxy.enabled", self.sim.proxy_enabled.to_string());
        put("proxy.flush_bytes", self.sim.proxy_flush_bytes.to_string());
        put("proxy.flush_interval_s", self.sim.proxy_flush_interval_s.to_string());

        put("mode_select.enabled", self.sim.mode_select_enabled.to_string());
        put(
            "mode_select.initial_threshold_s",
            self.sim.initial_mode_threshold_s.to_string(),
        );
        put("mode_select.memory_frac", self.sim.shuffle_memory_frac.to_string());
        put(
            "mode_select.threshold_refresh_s",
            self.sim.threshold_refresh_s.to_string(),
        );
        put("mode_select.curve_refresh_s", self.sim.curve_refresh_s.to_string());

        put("memory.enabled", self.sim.memory_mgmt_enabled.to_string());
        put("memory.yellow", self.sim.watermarks.yellow.to_string());
        put("memory.red", self.sim.watermarks.red.to_string());
        put(
            "memory.heavy_backup_bytes",
            self.sim.heavy_backup_threshold.to_string(),
        );

        put("ft.enabled", self.sim.ft_enabled.to_string());
        put("dpi.enabled", self.sim.dpi_enabled.to_string());
        put("dpi.target_bytes", self.sim.dpi_target_bytes.to_string());

        for (i, f) in self.sim.faults.faults.iter().enumerate() {
            let pre = format!("fault.{i}");
            match f.trigger {
                FaultTrigger::Periodic { min_interval_s, max_interval_s } => {
                    put(&format!("{pre}.trigger"), "periodic".into());
                    put(&format!("{pre}.min_gap_s"), min_interval_s.to_string());
                    put(&format!("{pre}.max_gap_s"), max_interval_s.to_string());
                }
                FaultTrigger::AtWritePhase { job_index, delay_s } => {
                    put(&format!("{pre}.trigger"), "write_phase".into());
                    put(&format!("{pre}.job"), job_index.to_string());
                    put(&format!("{pre}.delay_s"), delay_s.to_string());
                }
                FaultTrigger::AtReadPhase { job_index, delay_s } => {
                    put(&format!("{pre}.trigger"), "read_phase".into());
                    put(&format!("{pre}.job"), job_index.to_string());
                    put(&format!("{pre}.delay_s"), delay_s.to_string());
                }
            }
            put(
                &format!("{pre}.target"),
                match f.target {
                    FaultTarget::RandomCompute => "random_compute".into(),
                    FaultTarget::RandomStorage => "random_storage".into(),
                    FaultTarget::Node(n) => format!("node:{}", n.0),
                },
            );
            put(&format!("{pre}.duration_s"), f.duration_s.to_string());
        }

        put("run.max_task_attempts", self.sim.max_task_attempts.to_string());
        put("run.max_events", self.sim.max_events.to_string());

        kv.sort();
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

/// Hash of the full canonical config (including seed): two runs with equal
/// hashes are byte-identical reruns.
pub fn config_hash(canonical: &str) -> String {
    hex(&Sha256::digest(canonical.as_bytes()))
}

/// Hash over the workload-defining subset (workload, cluster, rates, seed):
/// runs may only be compared when these agree, while policy toggles differ.
pub fn workload_hash(canonical: &str) -> String {
    let subset: String = canonical
        .lines()
        .filter(|l| {
            l.starts_with("workload.")
                || l.starts_with("cluster.")
                || l.starts_with("rates.")
                || l.starts_with("seed ")
                || l.starts_with("schema ")
        })
        .map(|l| format!("{l}\n"))
        .collect();
    hex(&Sha256::digest(subset.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── parser internals ────────────────────────────────────────────────────────

struct Parser {
    map: BTreeMap<String, (usize, String)>,
    diags: Vec<ConfigDiag>,
}

impl Parser {
    fn scan(text: &str) -> Self {
        let mut map = BTreeMap::new();
        let mut diags = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                diags.push(ConfigDiag {
                    line: Some(line_no),
                    key: line.to_string(),
                    msg: "expected `key = value`".into(),
                });
                continue;
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() || value.is_empty() {
                diags.push(ConfigDiag {
                    line: Some(line_no),
                    key: key.clone(),
                    msg: "empty key or value".into(),
                });
                continue;
            }
            if map.insert(key.clone(), (line_no, value)).is_some() {
                diags.push(ConfigDiag {
                    line: Some(line_no),
                    key,
                    msg: "duplicate key".into(),
                });
            }
        }
        Parser { map, diags }
    }

    fn diag(&mut self, key: &str, msg: String) {
        self.diags.push(ConfigDiag { line: None, key: key.to_string(), msg });
    }

    fn diag_at(&mut self, line: usize, key: &str, msg: String) {
        self.diags.push(ConfigDiag { line: Some(line), key: key.to_string(), msg });
    }

    fn require_missing(&mut self, key: &str) {
        self.diag(key, "required key is missing".into());
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn take_u64(&mut self, key: &str) -> Option<u64> {
        let (line, v) = self.take_raw(key)?;
        match v.parse::<u64>() {
            Ok(x) => Some(x),
            Err(_) => {
                self.diag_at(line, key, format!("expected unsigned integer, got `{v}`"));
                None
            }
        }
    }

    fn take_u32(&mut self, key: &str) -> Option<u32> {
        let (line, v) = self.take_raw(key)?;
        match v.parse::<u32>() {
            Ok(x) => Some(x),
            Err(_) => {
                self.diag_at(line, key, format!("expected unsigned integer, got `{v}`"));
                None
            }
        }
    }

    fn take_f64(&mut self, key: &str) -> Option<f64> {
        let (line, v) = self.take_raw(key)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Some(x),
            _ => {
                self.diag_at(line, key, format!("expected finite number, got `{v}`"));
                None
            }
        }
    }

    /// Byte sizes: plain integers, or a number with a binary suffix
    /// (`64MB`, `1.5GB`, `512K`). 1KB = 1024 bytes.
    fn take_bytes(&mut self, key: &str) -> Option<u64> {
        let (line, v) = self.take_raw(key)?;
        match parse_bytes(&v) {
            Some(x) => Some(x),
            None => {
                self.diag_at(
                    line,
                    key,
                    format!("expected byte size (e.g. 1048576 or 64MB), got `{v}`"),
                );
                None
            }
        }
    }

    fn take_bool(&mut self, key: &str) -> Option<bool> {
        let (line, v) = self.take_raw(key)?;
        match v.as_str() {
            "true" | "on" | "yes" => Some(true),
            "false" | "off" | "no" => Some(false),
            _ => {
                self.diag_at(line, key, format!("expected true/false, got `{v}`"));
                None
            }
        }
    }

    fn parse_shape(&mut self) -> Option<WorkloadShape> {
        let (line, shape) = match self.take_raw("workload.shape") {
            Some(x) => x,
            None => {
                self.require_missing("workload.shape");
                return None;
            }
        };
        match shape.as_str() {
            "uniform" => {
                let jobs = self.req_u32("workload.jobs")?;
                let writers = self.req_u32("workload.writers")?;
                let readers = self.req_u32("workload.readers")?;
                let bytes_per_job = self.req_bytes("workload.bytes_per_job")?;
                Some(WorkloadShape::Uniform { jobs, writers, readers, bytes_per_job })
            }
            "skewed" => {
                let writers = self.req_u32("workload.writers")?;
                let readers = self.req_u32("workload.readers")?;
                let total_bytes = self.req_bytes("workload.total_bytes")?;
                let hot_fraction = self.req_f64("workload.hot_fraction")?;
                Some(WorkloadShape::Skewed { writers, readers, total_bytes, hot_fraction })
            }
            "mixed" => {
                let rounds = self.req_u32("workload.rounds")?;
                let scale = self.take_f64("workload.scale").unwrap_or(1.0);
                let parallelism_divisor =
                    self.take_u32("workload.parallelism_divisor").unwrap_or(1);
                Some(WorkloadShape::MixedLargeSmall { rounds, scale, parallelism_divisor })
            }
            "terasort" => {
                let tasks = self.req_u32("workload.tasks")?;
                let total_bytes = self.req_bytes("workload.total_bytes")?;
                Some(WorkloadShape::TeraSortLike { tasks, total_bytes })
            }
            other => {
                self.diag_at(
                    line,
                    "workload.shape",
                    format!("unknown shape `{other}` (uniform|skewed|mixed|terasort)"),
                );
                None
            }
        }
    }

    fn req_u32(&mut self, key: &str) -> Option<u32> {
        if !self.map.contains_key(key) {
            self.require_missing(key);
            return None;
        }
        self.take_u32(key)
    }

    fn req_f64(&mut self, key: &str) -> Option<f64> {
        if !self.map.contains_key(key) {
            self.require_missing(key);
            return None;
        }
        self.take_f64(key)
    }

    fn req_bytes(&mut self, key: &str) -> Option<u64> {
        if !self.map.contains_key(key) {
            self.require_missing(key);
            return None;
        }
        self.take_bytes(key)
    }

    fn parse_arrival(&mut self) -> ArrivalPolicy {
        let Some((line, v)) = self.take_raw("workload.arrival") else {
            return ArrivalPolicy::AllAtOnce;
        };
        match v.as_str() {
            "all_at_once" => ArrivalPolicy::AllAtOnce,
            "staggered" => {
                let gap_s = self.take_f64("workload.arrival_gap_s").unwrap_or(1.0);
                ArrivalPolicy::Staggered { gap_s }
            }
            other => {
                self.diag_at(
                    line,
                    "workload.arrival",
                    format!("unknown arrival `{other}` (all_at_once|staggered)"),
                );
                ArrivalPolicy::AllAtOnce
            }
        }
    }

    fn parse_sim(&mut self) -> SimConfig {
        let mut sim = SimConfig::default();

        macro_rules! set {
            ($field:expr, $taken:expr) => {
                if let Some(v) = $taken {
                    $field = v;
                }
            };
        }

        set!(sim.cluster.compute_nodes, self.take_u32("cluster.compute_nodes"));
        set!(sim.cluster.compute_memory_bytes, self.take_bytes("cluster.compute_memory"));
        set!(sim.cluster.compute_slots, self.take_u32("cluster.compute_slots"));
        set!(sim.cluster.compute_disk_bps, self.take_f64("cluster.compute_disk_bps"));
        set!(sim.cluster.storage_nodes, self.take_u32("cluster.storage_nodes"));
        set!(sim.cluster.storage_disk_bps, self.take_f64("cluster.storage_disk_bps"));
        set!(sim.cluster.ingress_bps, self.take_f64("cluster.ingress_bps"));
        set!(sim.cluster.egress_bps, self.take_f64("cluster.egress_bps"));
        set!(sim.cluster.latency_s, self.take_f64("cluster.latency_s"));

        set!(sim.rates.map_bps, self.take_f64("rates.map_bps"));
        set!(sim.rates.reduce_bps, self.take_f64("rates.reduce_bps"));
        set!(sim.rates.task_startup_s, self.take_f64("rates.task_startup_s"));
        set!(sim.rates.task_mem_bytes, self.take_bytes("rates.task_mem"));
        set!(sim.rates.jitter_frac, self.take_f64("rates.jitter_frac"));
        set!(sim.rates.emission_rounds, self.take_u32("rates.emission_rounds"));
        set!(sim.rates.poll_interval_s, self.take_f64("rates.poll_interval_s"));
        set!(sim.rates.heartbeat_period_s, self.take_f64("rates.heartbeat_period_s"));

        if let Some((line, v)) = self.take_raw("sched.mode") {
            sim.sched.forced_mode = match v.as_str() {
                "auto" => None,
                "staged" => Some(SchedMode::Staged),
                "gang" => Some(SchedMode::Gang),
                "progressive" => Some(SchedMode::Progressive),
                other => {
                    self.diag_at(
                        line,
                        "sched.mode",
                        format!("unknown mode `{other}` (auto|staged|gang|progressive)"),
                    );
                    None
                }
            };
        }
        set!(sim.sched.lambda, self.take_f64("sched.lambda"));
        set!(
            sim.sched.low_parallelism_cutoff,
            self.take_u32("sched.low_parallelism_cutoff")
        );
        set!(sim.sched.dispatch_latency_s, self.take_f64("sched.dispatch_latency_s"));

        set!(sim.thresholds.alpha_s, self.take_f64("layout.alpha_s"));
        set!(sim.thresholds.beta_bytes, self.take_bytes("layout.beta_bytes"));
        set!(sim.thresholds.gamma_bytes, self.take_bytes("layout.gamma_bytes"));

        if let Some((line, v)) = self.take_raw("backup.mode") {
            match v.as_str() {
                "adaptive" => sim.backup_mode = BackupMode::Adaptive,
                "all" => sim.backup_mode = BackupMode::AllBackup,
                "none" => sim.backup_mode = BackupMode::NoBackup,
                other => self.diag_at(
                    line,
                    "backup.mode",
                    format!("unknown backup mode `{other}` (adaptive|all|none)"),
                ),
            }
        }
        set!(sim.group_size, self.take_u32("grouping.size"));
        set!(sim.group_replicas, self.take_u32("grouping.replicas"));

        set!(sim.proxy_enabled, self.take_bool("proxy.enabled"));
        set!(sim.proxy_flush_bytes, self.take_bytes("proxy.flush_bytes"));
        set!(sim.proxy_flush_interval_s, self.take_f64("proxy.flush_interval_s"));

        set!(sim.mode_select_enabled, self.take_bool("mode_select.enabled"));
        set!(
            sim.initial_mode_threshold_s,
            self.take_f64("mode_select.initial_threshold_s")
        );
        set!(sim.shuffle_memory_frac, self.take_f64("mode_select.memory_frac"));
        set!(sim.threshold_refresh_s, self.take_f64("mode_select.threshold_refresh_s"));
        set!(sim.curve_refresh_s, self.take_f64("mode_select.curve_refresh_s"));

        set!(sim.memory_mgmt_enabled, self.take_bool("memory.enabled"));
        let mut wm = MemoryWatermarks::default();
        let mut wm_touched = false;
        if let Some(y) = self.take_f64("memory.yellow") {
            wm.yellow = y;
            wm_touched = true;
        }
        if let Some(r) = self.take_f64("memory.red") {
            wm.red = r;
            wm_touched = true;
        }
        if wm_touched {
            if !(0.0 < wm.yellow && wm.yellow < wm.red && wm.red <= 1.0) {
                self.diag(
                    "memory.yellow",
                    format!(
                        "watermarks must satisfy 0 < yellow < red <= 1 (got {} / {})",
                        wm.yellow, wm.red
                    ),
                );
            }
            sim.watermarks = wm;
        }
        set!(sim.heavy_backup_threshold, self.take_bytes("memory.heavy_backup_bytes"));

        set!(sim.ft_enabled, self.take_bool("ft.enabled"));
        set!(sim.dpi_enabled, self.take_bool("dpi.enabled"));
        set!(sim.dpi_target_bytes, self.take_bytes("dpi.target_bytes"));

        sim.faults = self.parse_faults();

        set!(sim.max_task_attempts, self.take_u32("run.max_task_attempts"));
        set!(sim.max_events, self.take_u64("run.max_events"));

        sim
    }

    fn parse_faults(&mut self) -> FaultPlan {
        let mut faults = Vec::new();
        for i in 0.. {
            let pre = format!("fault.{i}");
            if !self.map.keys().any(|k| k.starts_with(&format!("{pre}."))) {
                break;
            }
            let trigger_key = format!("{pre}.trigger");
            let trigger = match self.take_raw(&trigger_key) {
                Some((line, v)) => match v.as_str() {
                    "periodic" => {
                        let min = self.take_f64(&format!("{pre}.min_gap_s")).unwrap_or(600.0);
                        let max = self.take_f64(&format!("{pre}.max_gap_s")).unwrap_or(min);
                        Some(FaultTrigger::Periodic {
                            min_interval_s: min,
                            max_interval_s: max,
                        })
                    }
                    "write_phase" => {
                        let job = self.take_u32(&format!("{pre}.job")).unwrap_or(0);
                        let delay = self.take_f64(&format!("{pre}.delay_s")).unwrap_or(0.0);
                        Some(FaultTrigger::AtWritePhase { job_index: job, delay_s: delay })
                    }
                    "read_phase" => {
                        let job = self.take_u32(&format!("{pre}.job")).unwrap_or(0);
                        let delay = self.take_f64(&format!("{pre}.delay_s")).unwrap_or(0.0);
                        Some(FaultTrigger::AtReadPhase { job_index: job, delay_s: delay })
                    }
                    other => {
                        self.diag_at(
                            line,
                            &trigger_key,
                            format!(
                                "unknown trigger `{other}` (periodic|write_phase|read_phase)"
                            ),
                        );
                        None
                    }
                },
                None => {
                    self.require_missing(&trigger_key);
                    None
                }
            };
            let target_key = format!("{pre}.target");
            let target = match self.take_raw(&target_key) {
                Some((line, v)) => match v.as_str() {
                    "random_compute" => Some(FaultTarget::RandomCompute),
                    "random_storage" => Some(FaultTarget::RandomStorage),
                    other => match other.strip_prefix("node:").and_then(|n| n.parse().ok()) {
                        Some(id) => Some(FaultTarget::Node(crate::ids::NodeId(id))),
                        None => {
                            self.diag_at(
                                line,
                                &target_key,
                                format!(
                                    "unknown target `{other}` \
                                     (random_compute|random_storage|node:<id>)"
                                ),
                            );
                            None
                        }
                    },
                },
                None => Some(FaultTarget::RandomCompute),
            };
            let duration = self.take_f64(&format!("{pre}.duration_s")).unwrap_or(30.0);
            if let (Some(trigger), Some(target)) = (trigger, target) {
                faults.push(FaultSpec { trigger, target, duration_s: duration });
            }
        }
        FaultPlan { faults }
    }
}

fn parse_bytes(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    let upper = s.to_ascii_uppercase();
    let (num, mult) = if let Some(p) = upper.strip_suffix("KB").or(upper.strip_suffix("K")) {
        (p, 1u64 << 10)
    } else if let Some(p) = upper.strip_suffix("MB").or(upper.strip_suffix("M")) {
        (p, 1u64 << 20)
    } else if let Some(p) = upper.strip_suffix("GB").or(upper.strip_suffix("G")) {
        (p, 1u64 << 30)
    } else if let Some(p) = upper.strip_suffix("TB").or(upper.strip_suffix("T")) {
        (p, 1u64 << 40)
    } else if let Some(p) = upper.strip_suffix("B") {
        (p, 1u64)
    } else {
        return None;
    };
    let x: f64 = num.trim().parse().ok()?;
    if !x.is_finite() || x < 0.0 {
        return None;
    }
    Some((x * mult as f64).round() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
schema = 1
seed = 7
workload.shape = uniform
workload.jobs = 2
workload.writers = 8
workload.readers = 8
workload.bytes_per_job = 16MB
";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).expect("parses");
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(
            cfg.shape,
            WorkloadShape::Uniform { jobs: 2, writers: 8, readers: 8, bytes_per_job: 16 << 20 }
        );
        assert_eq!(cfg.arrival, ArrivalPolicy::AllAtOnce);
        assert_eq!(cfg.sim, SimConfig::default());
    }

    #[test]
    fn byte_suffixes_parse_as_binary_multiples() {
        assert_eq!(parse_bytes("1024"), Some(1024));
        assert_eq!(parse_bytes("1K"), Some(1024));
        assert_eq!(parse_bytes("64MB"), Some(64 << 20));
        assert_eq!(parse_bytes("1.5GB"), Some(3 << 29));
        assert_eq!(parse_bytes("512 B"), Some(512));
        assert_eq!(parse_bytes("wat"), None);
        assert_eq!(parse_bytes("-3MB"), None);
    }

    #[test]
    fn canonical_round_trips_exactly() {
        let text = format!(
            "{MINIMAL}\
sched.mode = progressive
sched.lambda = 0.75
layout.gamma_bytes = 5MB
ft.enabled = false
fault.0.trigger = periodic
fault.0.min_gap_s = 72
fault.0.max_gap_s = 90
fault.0.duration_s = 3
fault.0.target = random_compute
"
        );
        let cfg = ExperimentConfig::parse(&text).expect("parses");
        let canon = cfg.canonical(7);
        let reparsed = ExperimentConfig::parse(&canon).expect("echo parses");
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.canonical(7), canon);
        // Echo is sorted.
        let lines: Vec<&str> = canon.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
    }

    #[test]
    fn diagnostics_carry_line_and_key() {
        let bad = "\
schema = 1
workload.shape = uniform
workload.jobs = many
workload.writers = 4
workload.readers = 4
workload.bytes_per_job = 1MB
nonsense.key = 3
";
        let err = ExperimentConfig::parse(bad).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("workload.jobs"), "{text}");
        assert!(text.contains("line 3"), "{text}");
        assert!(text.contains("nonsense.key"), "{text}");
    }

    #[test]
    fn missing_schema_is_rejected() {
        let err = ExperimentConfig::parse("workload.shape = uniform\n").unwrap_err();
        assert!(err.diags.iter().any(|d| d.key == "schema"));
    }

    #[test]
    fn workload_hash_ignores_policy_toggles() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.sim.ft_enabled = false;
        b.sim.backup_mode = BackupMode::NoBackup;
        assert_ne!(config_hash(&a.canonical(7)), config_hash(&b.canonical(7)));
        assert_eq!(workload_hash(&a.canonical(7)), workload_hash(&b.canonical(7)));
        // ...but not workload changes or the seed.
        let mut c = a.clone();
        c.shape = WorkloadShape::Uniform {
            jobs: 3,
            writers: 8,
            readers: 8,
            bytes_per_job: 16 << 20,
        };
        assert_ne!(workload_hash(&a.canonical(7)), workload_hash(&c.canonical(7)));
        assert_ne!(workload_hash(&a.canonical(7)), workload_hash(&a.canonical(8)));
    }

    #[test]
    fn seed_flag_beats_file_and_absence_errors() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.resolve_seed(None).unwrap(), 7);
        assert_eq!(cfg.resolve_seed(Some(99)).unwrap(), 99);
        let no_seed = MINIMAL.replace("seed = 7\n", "");
        let cfg = ExperimentConfig::parse(&no_seed).unwrap();
        assert!(cfg.resolve_seed(None).is_err());
        assert_eq!(cfg.resolve_seed(Some(3)).unwrap(), 3);
    }

    #[test]
    fn fault_entries_parse_by_index() {
        let text = format!(
            "{MINIMAL}\
fault.0.trigger = write_phase
fault.0.job = 1
fault.0.delay_s = 0.5
fault.0.target = node:3
fault.0.duration_s = 10
fault.1.trigger = periodic
fault.1.min_gap_s = 100
fault.1.max_gap_s = 200
fault.1.duration_s = 5
fault.1.target = random_storage
"
        );
        let cfg = ExperimentConfig::parse(&text).expect("parses");
        assert_eq!(cfg.sim.faults.faults.len(), 2);
        assert_eq!(
            cfg.sim.faults.faults[0],
            FaultSpec {
                trigger: FaultTrigger::AtWritePhase { job_index: 1, delay_s: 0.5 },
                target: FaultTarget::Node(crate::ids::NodeId(3)),
                duration_s: 10.0,
            }
        );
        assert_eq!(
            cfg.sim.faults.faults[1],
            FaultSpec {
                trigger: FaultTrigger::Periodic { min_interval_s: 100.0, max_interval_s: 200.0 },
                target: FaultTarget::RandomStorage,
                duration_s: 5.0,
            }
        );
    }
}
