//! Release acceptance suite.
//!
//! Each test pins one headline behavior of the simulator end to end and, on
//! success, prints a `PASS <name>: ...` line with the measured numbers (show
//! them with `cargo test --test acceptance -- --nocapture`). Every tolerance
//! is a named constant below so a failing check points at the exact bound
//! that moved. All runs are seeded and deterministic: a green suite stays
//! green.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shufflesim::agent::{AgentAction, AgentState, IngestOutcome, MemoryWatermarks};
use shufflesim::block::{BlockIdent, DataBlock, ShuffleMode};
use shufflesim::checksum::{block_digest, payload_token};
use shufflesim::ids::{JobId, NodeId, PartitionId, WriterId};
use shufflesim::job::OperatorKind;
use shufflesim::layout::LayoutThresholds;
use shufflesim::mode_select::{select_threshold, ProfileCurve, TaskHistoryRecord};
use shufflesim::reader::{ConsumedRecord, ReaderLedger};
use shufflesim::sched::{SchedConfig, SchedMode, StageManifest};
use shufflesim::sim::cluster::ClusterSpec;
use shufflesim::sim::engine::{run, BackupMode, RunResult, SimConfig};
use shufflesim::sim::fault::{FaultPlan, FaultSpec, FaultTarget, FaultTrigger};
use shufflesim::sim::trace::{to_ndjson, RerunReason, TraceEvent};
use shufflesim::sim::workload::{generate, Arrival, ArrivalPolicy, WorkloadShape};
use shufflesim::job::JobSpec;

// ── pinned tolerances ───────────────────────────────────────────────────────

/// Progressive launch must land within this fraction of gang latency.
const PS_WITHIN_GS_FRAC: f64 = 0.15;
/// Adaptive backups must stay within this fraction of the no-backup E2E.
const ADAPTIVE_WITHIN_NOBACKUP_FRAC: f64 = 0.10;
/// Fault-tolerant rerun counts must undercut the unprotected run by this.
const FT_RERUN_RATIO_MIN: f64 = 10.0;
/// Single-disconnect runs: protected degradation bound vs the no-fault run.
const FT_DEGRADATION_MAX_FRAC: f64 = 0.10;
/// Periodic-disconnect runs: protected degradation bound vs no-fault.
const PERIODIC_FT_DEGRADATION_MAX_FRAC: f64 = 0.15;
/// Periodic-disconnect runs: unprotected degradation must be this much worse.
const PERIODIC_FT_OFF_WORSE_MIN: f64 = 2.0;
/// Randomized (curve, budget) pairs checked against the threshold oracle.
const ORACLE_PAIRS: usize = 1000;
/// Randomized agent pressure sequences checked against the eviction oracle.
const PRESSURE_SEQUENCES: usize = 1000;
/// Seeded single-fault scenarios for the exactly-once check.
const FAULT_SCENARIOS: u64 = 100;
/// Randomized manifests for the duplicate/missing detection check.
const VERIFY_TRIALS: usize = 100;

// ── helpers ─────────────────────────────────────────────────────────────────

fn must_run(wl: &[(JobSpec, Arrival)], cfg: &SimConfig, seed: u64) -> RunResult {
    run(wl, cfg, seed).expect("simulation run completes")
}

fn job_metrics(r: &RunResult, job: JobId) -> &shufflesim::sim::metrics::JobMetrics {
    r.metrics
        .jobs
        .iter()
        .find(|j| j.job == job)
        .expect("job present in metrics")
}

fn frac_over(baseline: f64, observed: f64) -> f64 {
    (observed - baseline) / baseline
}

/// Reruns of `job` caused by shuffle-data problems rather than the direct
/// loss of the node the task was running on.
fn data_reruns(trace: &[TraceEvent], job: JobId) -> u64 {
    trace
        .iter()
        .filter(|e| {
            matches!(e, TraceEvent::Rerun { job: j, reason, .. }
                if *j == job && *reason != RerunReason::NodeLoss)
        })
        .count() as u64
}

fn count_events(trace: &[TraceEvent], pred: impl Fn(&TraceEvent) -> bool) -> u64 {
    trace.iter().filter(|e| pred(e)).count() as u64
}

// ── determinism ─────────────────────────────────────────────────────────────

#[test]
fn replaying_a_seed_is_bytewise_identical() {
    let wl = generate(
        WorkloadShape::Uniform { jobs: 3, writers: 16, readers: 16, bytes_per_job: 32 << 20 },
        ArrivalPolicy::Staggered { gap_s: 0.2 },
        7,
    );
    let mut cfg = SimConfig::default();
    // Random node outages force the fault RNG into the replay as well.
    cfg.faults = FaultPlan {
        faults: vec![FaultSpec {
            trigger: FaultTrigger::Periodic { min_interval_s: 1.0, max_interval_s: 2.0 },
            target: FaultTarget::RandomCompute,
            duration_s: 0.5,
        }],
    };
    let a = must_run(&wl, &cfg, 42);
    let b = must_run(&wl, &cfg, 42);
    assert_eq!(
        to_ndjson(&a.trace),
        to_ndjson(&b.trace),
        "same config and seed must replay to an identical trace"
    );
    assert_eq!(
        a.metrics.to_csv_string(),
        b.metrics.to_csv_string(),
        "same config and seed must replay to identical metrics"
    );
    assert_eq!(
        serde_json::to_string(&a.details).unwrap(),
        serde_json::to_string(&b.details).unwrap(),
        "same config and seed must replay to identical run details"
    );
    println!(
        "PASS determinism: {} trace events and {} jobs replay byte-identically",
        a.trace.len(),
        a.metrics.jobs.len()
    );
}

// ── operating-threshold selection ───────────────────────────────────────────

#[test]
fn threshold_selection_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c2);
    for trial in 0..ORACLE_PAIRS {
        let n = rng.gen_range(1..=40);
        let history: Vec<TaskHistoryRecord> = (0..n)
            .map(|k| TaskHistoryRecord {
                operator: if k % 2 == 0 { OperatorKind::Map } else { OperatorKind::Reduce },
                input_bytes: rng.gen_range(0..1_000_000_000),
                runtime_s: rng.gen_range(0.0..100.0),
                shuffle_bytes: rng.gen_range(0..10_000_000),
                peak_mem_bytes: rng.gen_range(0..10_000_000),
            })
            .collect();
        let grid = ProfileCurve::grid_for(&history, rng.gen_range(2..24));
        let machines = rng.gen_range(1..10);
        let curve = ProfileCurve::from_history(&history, &grid, machines).expect("profile curve");
        let budget = match trial % 16 {
            0 => 1e18,  // sky-high budget: expect the top of the grid
            1 => -1.0,  // infeasible budget: expect 0.0
            _ => rng.gen_range(0.0..2.0e7),
        };
        // Independent oracle: walk the grid from the top and take the first
        // candidate whose memory demand fits the budget.
        let expect = (0..curve.grid.len())
            .rev()
            .find(|&i| curve.z[i] <= budget)
            .map(|i| curve.grid[i])
            .unwrap_or(0.0);
        let got = select_threshold(&curve, budget);
        assert!(
            got == expect,
            "trial {trial}: select_threshold returned {got}, oracle says {expect} \
             (budget {budget}, grid len {})",
            curve.grid.len()
        );
    }
    println!("PASS threshold oracle: {ORACLE_PAIRS} randomized (curve, budget) pairs agree exactly");
}

// ── launch-policy tradeoff ──────────────────────────────────────────────────

#[test]
fn launch_policies_trade_latency_for_utilization() {
    let wl = generate(
        WorkloadShape::Uniform { jobs: 1, writers: 64, readers: 64, bytes_per_job: 512 << 20 },
        ArrivalPolicy::AllAtOnce,
        11,
    );
    let run_mode = |mode: SchedMode| {
        let mut cfg = SimConfig::default();
        // Enough slots to gang-launch both stages at once, and enough writer
        // groups that read bandwidth is not bound by a single agent. Fast
        // reads keep slot time spent actually fetching small next to slot
        // time spent waiting for commits, which is what the policies trade.
        cfg.cluster = ClusterSpec {
            compute_nodes: 16,
            compute_slots: 8,
            egress_bps: 4e9,
            ..ClusterSpec::default()
        };
        cfg.group_size = 8;
        cfg.rates.reduce_bps = 40e6;
        // Wide runtime jitter spreads writer completions out, which is what
        // separates launching at a commit fraction from launching at the end.
        cfg.rates.jitter_frac = 0.8;
        cfg.sched =
            SchedConfig { forced_mode: Some(mode), lambda: 0.3, ..SchedConfig::default() };
        let r = must_run(&wl, &cfg, 5);
        assert_eq!(r.details.per_job[&JobId(1)].policy.mode, mode, "forced mode applied");
        r
    };
    let ss = run_mode(SchedMode::Staged);
    let gs = run_mode(SchedMode::Gang);
    let ps = run_mode(SchedMode::Progressive);

    let e = |r: &RunResult| job_metrics(r, JobId(1)).e2e_s;
    let cu = |r: &RunResult| job_metrics(r, JobId(1)).cu_slot_min;
    let (e_ss, e_gs, e_ps) = (e(&ss), e(&gs), e(&ps));
    let (c_ss, c_gs, c_ps) = (cu(&ss), cu(&gs), cu(&ps));

    assert!(e_ss > e_ps, "staged must be slowest: staged {e_ss:.3}s vs progressive {e_ps:.3}s");
    assert!(e_ps >= e_gs, "gang must be fastest: progressive {e_ps:.3}s vs gang {e_gs:.3}s");
    let gap = frac_over(e_gs, e_ps);
    assert!(
        gap <= PS_WITHIN_GS_FRAC,
        "progressive must stay within {PS_WITHIN_GS_FRAC:.0}% of gang latency, got {:.1}%",
        gap * 100.0
    );
    assert!(
        c_ss < c_ps && c_ps < c_gs,
        "utilization cost must rise staged < progressive < gang, got {c_ss:.3} / {c_ps:.3} / {c_gs:.3} slot-min"
    );
    println!(
        "PASS launch policies: e2e staged {e_ss:.3}s > progressive {e_ps:.3}s >= gang {e_gs:.3}s \
         (gap {:.1}%), cu {c_ss:.3} < {c_ps:.3} < {c_gs:.3} slot-min",
        gap * 100.0
    );
}

// ── backup policy ablation ──────────────────────────────────────────────────

#[test]
fn adaptive_backups_lead_in_normal_and_exception_phases() {
    // One large job (32 writers, ~23 MB each) and two small ones (16 writers,
    // ~4.7 MB each), concurrently. Beta sits between the two per-writer
    // volumes, so the adaptive layout backs up only the large job.
    let wl = generate(
        WorkloadShape::MixedLargeSmall { rounds: 1, scale: 0.25, parallelism_divisor: 16 },
        ArrivalPolicy::AllAtOnce,
        3,
    );
    let cfg_with = |mode: BackupMode, faults: FaultPlan| {
        let mut cfg = SimConfig::default();
        // Tight agent links make replication traffic compete with writer
        // inflow, so backing everything up has a visible price.
        cfg.cluster =
            ClusterSpec { ingress_bps: 300e6, egress_bps: 300e6, ..ClusterSpec::default() };
        cfg.group_size = 8;
        cfg.thresholds = LayoutThresholds { beta_bytes: 10 << 20, ..LayoutThresholds::default() };
        cfg.backup_mode = mode;
        cfg.faults = faults;
        cfg
    };
    let e = |r: &RunResult| r.metrics.total_e2e_s();

    // Normal phase: no faults.
    let none = must_run(&wl, &cfg_with(BackupMode::NoBackup, FaultPlan::none()), 9);
    let all = must_run(&wl, &cfg_with(BackupMode::AllBackup, FaultPlan::none()), 9);
    let adapt = must_run(&wl, &cfg_with(BackupMode::Adaptive, FaultPlan::none()), 9);
    assert!(
        e(&adapt) <= e(&all),
        "normal phase: adaptive ({:.3}s) must not lose to all-backup ({:.3}s)",
        e(&adapt),
        e(&all)
    );
    let over_none = frac_over(e(&none), e(&adapt));
    assert!(
        over_none <= ADAPTIVE_WITHIN_NOBACKUP_FRAC,
        "normal phase: adaptive must stay within {ADAPTIVE_WITHIN_NOBACKUP_FRAC:.0}% of \
         no-backup, got {:.1}%",
        over_none * 100.0
    );

    // Exception phase: an agent buffering part of the large job drops out
    // early in the large job's read phase, taking that buffer with it. Pick
    // a group primary that the small jobs put nothing on, so the outage
    // tests the adaptive policy's choice of what deserved a backup.
    let small_agents: BTreeSet<NodeId> = [JobId(2), JobId(3)]
        .iter()
        .flat_map(|j| adapt.details.per_job[j].group_agents.iter().flatten())
        .copied()
        .collect();
    let target = adapt.details.per_job[&JobId(1)]
        .group_agents
        .iter()
        .map(|replicas| replicas[0])
        .find(|primary| !small_agents.contains(primary))
        .expect("a large-job group primary free of small-job placements");
    let fault = FaultPlan {
        faults: vec![FaultSpec {
            trigger: FaultTrigger::AtReadPhase { job_index: 0, delay_s: 0.15 },
            target: FaultTarget::Node(target),
            duration_s: 2.5,
        }],
    };
    let none_x = must_run(&wl, &cfg_with(BackupMode::NoBackup, fault.clone()), 9);
    let all_x = must_run(&wl, &cfg_with(BackupMode::AllBackup, fault.clone()), 9);
    let adapt_x = must_run(&wl, &cfg_with(BackupMode::Adaptive, fault), 9);
    assert!(
        e(&adapt_x) <= e(&none_x) && e(&adapt_x) <= e(&all_x),
        "exception phase: adaptive ({:.3}s) must lead no-backup ({:.3}s) and all-backup ({:.3}s)",
        e(&adapt_x),
        e(&none_x),
        e(&all_x)
    );
    // Mechanism sanity: the unprotected run regenerates lost data, the
    // adaptive run serves the large job from its backups.
    assert!(
        e(&none_x) > e(&none),
        "the injected fault must actually hurt the unprotected run"
    );
    assert!(
        data_reruns(&none_x.trace, JobId(1)) > 0,
        "no-backup run must pay regeneration reruns for the lost agent data"
    );
    assert_eq!(
        data_reruns(&adapt_x.trace, JobId(1)),
        0,
        "adaptive backups must cover the large job's lost data without reruns"
    );
    println!(
        "PASS backup ablation: normal e2e adaptive {:.3}s <= all {:.3}s, {:+.1}% vs none {:.3}s; \
         exception e2e adaptive {:.3}s <= min(none {:.3}s, all {:.3}s)",
        e(&adapt),
        e(&all),
        over_none * 100.0,
        e(&none),
        e(&adapt_x),
        e(&none_x),
        e(&all_x)
    );
}

// ── giant-chunk bypass ──────────────────────────────────────────────────────

#[test]
fn giant_chunk_bypass_relieves_hotspots() {
    // 90% of all shuffle bytes funnel into partition 0, so each writer emits
    // one ~3.6 MB chunk. Routing those monsters through the agents drags the
    // whole job across a handful of agent disks; the bypass writes them
    // straight to replicated storage.
    let wl = generate(
        WorkloadShape::Skewed {
            writers: 32,
            readers: 32,
            total_bytes: 128 << 20,
            hot_fraction: 0.9,
        },
        ArrivalPolicy::AllAtOnce,
        13,
    );
    let run_gamma = |gamma_bytes: u64| {
        let mut cfg = SimConfig::default();
        cfg.cluster = ClusterSpec { compute_disk_bps: 50e6, ..ClusterSpec::default() };
        // Disk-backed shuffle: the hotspot shows up on the agent disks.
        cfg.mode_select_enabled = false;
        cfg.group_size = 8;
        cfg.thresholds = LayoutThresholds { gamma_bytes, ..LayoutThresholds::default() };
        must_run(&wl, &cfg, 21)
    };
    let on = run_gamma(1 << 20); // hot chunks exceed gamma: bypass engaged
    let off = run_gamma(u64::MAX); // bypass disabled

    let write_time = |r: &RunResult| {
        let d = &r.details.per_job[&JobId(1)];
        d.last_commit_s - d.first_write_s
    };
    let (wt_on, wt_off) = (write_time(&on), write_time(&off));
    let (e_on, e_off) = (job_metrics(&on, JobId(1)).e2e_s, job_metrics(&off, JobId(1)).e2e_s);
    let (c_on, c_off) = (
        job_metrics(&on, JobId(1)).cu_slot_min,
        job_metrics(&off, JobId(1)).cu_slot_min,
    );
    assert!(wt_on < wt_off, "bypass must cut write time: {wt_on:.3}s vs {wt_off:.3}s");
    assert!(e_on < e_off, "bypass must cut e2e runtime: {e_on:.3}s vs {e_off:.3}s");
    assert!(c_on < c_off, "bypass must cut slot usage: {c_on:.3} vs {c_off:.3} slot-min");
    println!(
        "PASS giant-chunk bypass: write {wt_on:.3}s < {wt_off:.3}s, \
         e2e {e_on:.3}s < {e_off:.3}s, cu {c_on:.2} < {c_off:.2} slot-min"
    );
}

// ── single-disconnect fault tolerance ───────────────────────────────────────

fn disconnect_workload() -> Vec<(JobSpec, Arrival)> {
    // One 64-task job and two 32-task jobs; small per-task volumes keep the
    // rerun tail short next to the multi-wave phase length.
    generate(
        WorkloadShape::MixedLargeSmall { rounds: 1, scale: 0.01, parallelism_divisor: 8 },
        ArrivalPolicy::AllAtOnce,
        17,
    )
}

fn disconnect_cfg(ft: bool) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.cluster = ClusterSpec { compute_slots: 2, ..ClusterSpec::default() };
    cfg.group_size = 16;
    // Desk-scale thresholds: every writer's output is worth a backup copy.
    cfg.thresholds = LayoutThresholds { beta_bytes: 50 << 10, ..LayoutThresholds::default() };
    cfg.rates.heartbeat_period_s = 0.25;
    cfg.ft_enabled = ft;
    cfg
}

#[test]
fn single_disconnect_is_absorbed_with_protections_on() {
    let wl = disconnect_workload();
    let clean = must_run(&wl, &disconnect_cfg(true), 23);
    assert_eq!(clean.metrics.jobs_completed, 3);
    let target = clean.details.per_job[&JobId(1)].group_agents[0][0];

    let with_fault = |trigger: FaultTrigger, ft: bool| {
        let mut cfg = disconnect_cfg(ft);
        cfg.faults = FaultPlan {
            faults: vec![FaultSpec { trigger, target: FaultTarget::Node(target), duration_s: 30.0 }],
        };
        must_run(&wl, &cfg, 23)
    };

    let phases = [
        ("write", FaultTrigger::AtWritePhase { job_index: 0, delay_s: 0.3 }),
        ("read", FaultTrigger::AtReadPhase { job_index: 0, delay_s: 0.1 }),
    ];
    let mut summary = String::new();
    for (name, trigger) in phases {
        let on = with_fault(trigger, true);
        let off = with_fault(trigger, false);
        let (r_on, r_off) =
            (on.metrics.total_rerun_times as f64, off.metrics.total_rerun_times as f64);
        assert!(
            r_on <= r_off / FT_RERUN_RATIO_MIN,
            "{name}-phase disconnect: protected reruns ({r_on}) must be at least \
             {FT_RERUN_RATIO_MIN}x below unprotected ({r_off})"
        );
        assert_eq!(on.metrics.jobs_completed, 3, "{name}-phase protected run completes");
        let d_e2e = frac_over(clean.metrics.total_e2e_s(), on.metrics.total_e2e_s());
        let d_cu = frac_over(clean.metrics.total_cu_slot_min, on.metrics.total_cu_slot_min);
        assert!(
            d_e2e <= FT_DEGRADATION_MAX_FRAC && d_cu <= FT_DEGRADATION_MAX_FRAC,
            "{name}-phase disconnect: protected degradation must stay within \
             {:.0}% (e2e {:.1}%, cu {:.1}%)",
            FT_DEGRADATION_MAX_FRAC * 100.0,
            d_e2e * 100.0,
            d_cu * 100.0
        );
        assert_eq!(
            data_reruns(&on.trace, JobId(1)),
            0,
            "{name}-phase disconnect: the large job must not pay any shuffle-data reruns"
        );
        summary.push_str(&format!(
            " {name}: reruns {r_on}/{r_off}, e2e {:+.1}%, cu {:+.1}%;",
            d_e2e * 100.0,
            d_cu * 100.0
        ));
    }
    println!("PASS single disconnect:{summary}");
}

// ── periodic-disconnect fault tolerance ─────────────────────────────────────

#[test]
fn periodic_disconnects_degrade_gracefully_with_protections_on() {
    // 50 jobs arriving on a cadence; nodes drop out every 12-15 s for 0.5 s
    // (the same 24-30:1 interval-to-outage ratio as a production soak).
    let wl = generate(
        WorkloadShape::Uniform { jobs: 50, writers: 8, readers: 8, bytes_per_job: 8 << 20 },
        ArrivalPolicy::Staggered { gap_s: 0.6 },
        29,
    );
    let cfg_with = |ft: bool, faulted: bool| {
        let mut cfg = SimConfig::default();
        cfg.group_size = 2;
        cfg.thresholds = LayoutThresholds { beta_bytes: 512 << 10, ..LayoutThresholds::default() };
        cfg.rates.heartbeat_period_s = 0.25;
        cfg.ft_enabled = ft;
        if faulted {
            cfg.faults = FaultPlan {
                faults: vec![FaultSpec {
                    trigger: FaultTrigger::Periodic { min_interval_s: 12.0, max_interval_s: 15.0 },
                    target: FaultTarget::RandomCompute,
                    duration_s: 0.5,
                }],
            };
        }
        cfg
    };
    let clean = must_run(&wl, &cfg_with(true, false), 29);
    let on = must_run(&wl, &cfg_with(true, true), 29);
    let off = must_run(&wl, &cfg_with(false, true), 29);
    assert_eq!(clean.metrics.jobs_completed, 50);
    assert_eq!(on.metrics.jobs_completed, 50, "protected sequence completes");
    assert_eq!(off.metrics.jobs_completed, 50, "unprotected sequence completes");

    let downs = count_events(&on.trace, |e| matches!(e, TraceEvent::NodeDown { .. }));
    assert!(downs >= 2, "the soak must actually inject repeated outages, saw {downs}");

    let d_on_e2e = frac_over(clean.metrics.total_e2e_s(), on.metrics.total_e2e_s());
    let d_on_cu = frac_over(clean.metrics.total_cu_slot_min, on.metrics.total_cu_slot_min);
    let d_off_e2e = frac_over(clean.metrics.total_e2e_s(), off.metrics.total_e2e_s());
    let d_off_cu = frac_over(clean.metrics.total_cu_slot_min, off.metrics.total_cu_slot_min);
    assert!(
        d_on_e2e <= PERIODIC_FT_DEGRADATION_MAX_FRAC && d_on_cu <= PERIODIC_FT_DEGRADATION_MAX_FRAC,
        "protected degradation must stay within {:.0}%: e2e {:.1}%, cu {:.1}%",
        PERIODIC_FT_DEGRADATION_MAX_FRAC * 100.0,
        d_on_e2e * 100.0,
        d_on_cu * 100.0
    );
    assert!(
        d_off_e2e >= PERIODIC_FT_OFF_WORSE_MIN * d_on_e2e,
        "unprotected e2e degradation ({:.1}%) must be at least {PERIODIC_FT_OFF_WORSE_MIN}x \
         the protected one ({:.1}%)",
        d_off_e2e * 100.0,
        d_on_e2e * 100.0
    );
    assert!(
        d_off_cu > d_on_cu,
        "unprotected slot-time degradation ({:.1}%) must exceed the protected one ({:.1}%)",
        d_off_cu * 100.0,
        d_on_cu * 100.0
    );
    println!(
        "PASS periodic disconnects: {downs} outages; protected e2e {:+.1}% cu {:+.1}%, \
         unprotected e2e {:+.1}% cu {:+.1}%",
        d_on_e2e * 100.0,
        d_on_cu * 100.0,
        d_off_e2e * 100.0,
        d_off_cu * 100.0
    );
}

// ── exactly-once consumption ────────────────────────────────────────────────

#[test]
fn single_faults_never_duplicate_or_drop_consumed_blocks() {
    let wl = generate(
        WorkloadShape::Uniform { jobs: 1, writers: 6, readers: 6, bytes_per_job: 12 << 20 },
        ArrivalPolicy::AllAtOnce,
        31,
    );
    let base_cfg = || {
        let mut cfg = SimConfig::default();
        cfg.group_size = 3;
        cfg.thresholds = LayoutThresholds { beta_bytes: 512 << 10, ..LayoutThresholds::default() };
        cfg.rates.heartbeat_period_s = 0.25;
        cfg
    };
    for i in 0..FAULT_SCENARIOS {
        let seed = 1000 + i;
        let clean = must_run(&wl, &base_cfg(), seed);
        let trigger = if i % 2 == 0 {
            FaultTrigger::AtWritePhase { job_index: 0, delay_s: 0.05 + (i % 5) as f64 * 0.12 }
        } else {
            FaultTrigger::AtReadPhase { job_index: 0, delay_s: 0.02 + (i % 5) as f64 * 0.10 }
        };
        let mut cfg = base_cfg();
        cfg.faults = FaultPlan {
            faults: vec![FaultSpec {
                trigger,
                target: FaultTarget::RandomCompute,
                duration_s: 1.0 + (i % 3) as f64 * 0.5,
            }],
        };
        let faulted = must_run(&wl, &cfg, seed);
        assert_eq!(faulted.metrics.jobs_completed, 1, "scenario {i}: faulted run completes");
        assert_eq!(
            faulted.details.per_job[&JobId(1)].consumed,
            clean.details.per_job[&JobId(1)].consumed,
            "scenario {i}: consumed multiset must match the fault-free run exactly"
        );
    }
    println!(
        "PASS exactly-once: {FAULT_SCENARIOS} seeded single-fault scenarios consumed \
         identical block multisets"
    );
}

// ── memory watermark safety ─────────────────────────────────────────────────

#[test]
fn watermarks_hold_under_heavy_worker_pressure() {
    // Worker memory alone swings the agents across the red line whenever two
    // tasks share a node, forcing spill and discard storms. The engine
    // asserts the post-event watermark invariant after every handled event
    // in debug builds, so completing at all is the safety proof; here we
    // also check that the pressure was real.
    let wl = generate(
        WorkloadShape::Uniform { jobs: 2, writers: 8, readers: 2, bytes_per_job: 32 << 20 },
        ArrivalPolicy::AllAtOnce,
        37,
    );
    let mut cfg = SimConfig::default();
    cfg.cluster = ClusterSpec {
        compute_nodes: 6,
        compute_memory_bytes: 48 << 20,
        compute_slots: 2,
        storage_nodes: 4,
        ..ClusterSpec::default()
    };
    cfg.rates.task_mem_bytes = 20 << 20;
    cfg.heavy_backup_threshold = 256 << 10;
    cfg.group_size = 4;
    let r = must_run(&wl, &cfg, 41);
    assert_eq!(r.metrics.jobs_completed, 2, "pressured run still completes");
    let spills = count_events(&r.trace, |e| matches!(e, TraceEvent::Spill { .. }));
    let discards = count_events(&r.trace, |e| matches!(e, TraceEvent::Discard { .. }));
    assert!(spills > 0, "the workload must actually push agents over the yellow line");
    assert!(discards > 0, "the workload must actually push agents over the red line");
    println!(
        "PASS watermark safety: invariant held across {} events ({} spills, {} discards)",
        r.details.event_count, spills, discards
    );
}

#[test]
fn eviction_follows_priority_then_arrival_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE71C);
    let mut checked_victims = 0u64;
    for seq_no in 0..PRESSURE_SEQUENCES {
        let capacity = rng.gen_range(800_000..1_500_000);
        let mut agent = AgentState::new(
            NodeId(1),
            capacity,
            MemoryWatermarks { yellow: 0.70, red: 0.80 },
            u64::MAX, // no fallback backups: keep the action stream to spills/discards
            false,
        );
        // Shadow model: the resident set ordered the way eviction must walk it.
        let mut resident: BTreeSet<(i64, u64, BlockIdent)> = BTreeSet::new();
        let mut place: BTreeMap<BlockIdent, (i64, u64)> = BTreeMap::new();
        let mut next_seq = 0u64;
        let ops = rng.gen_range(10..40);
        for op in 0..ops {
            let pre = resident.clone();
            let (victims, arrival) = if rng.gen_bool(0.8) {
                let priority = rng.gen_range(-2..3);
                let block = DataBlock {
                    job_id: JobId(1),
                    writer_id: WriterId(u64::from(op)),
                    retry_idx: 0,
                    partition_id: PartitionId(rng.gen_range(0..4)),
                    backup_seq: op,
                    size_bytes: rng.gen_range(20_000..400_000),
                    priority,
                    checksum: block_digest(
                        WriterId(u64::from(op)),
                        PartitionId(0),
                        op,
                        u64::from(op),
                    ),
                    mode: ShuffleMode::InMemory,
                };
                let ident = block.ident();
                let (outcome, actions) = agent.ingest(block, true);
                let admitted = matches!(
                    outcome,
                    IngestOutcome::Accepted
                        | IngestOutcome::AcceptedSpilled
                        | IngestOutcome::AcceptedDiscarded
                );
                let victims: Vec<BlockIdent> = actions
                    .iter()
                    .map(|a| match a {
                        AgentAction::SpillToDisk { ident, .. }
                        | AgentAction::Discarded { ident, .. } => *ident,
                        other => panic!("unexpected action {other:?}"),
                    })
                    .collect();
                (victims, admitted.then_some((priority, ident)))
            } else {
                let worker = rng.gen_range(0..capacity);
                let actions = agent.memory_tick(worker);
                let victims: Vec<BlockIdent> = actions
                    .iter()
                    .map(|a| match a {
                        AgentAction::SpillToDisk { ident, .. }
                        | AgentAction::Discarded { ident, .. } => *ident,
                        other => panic!("unexpected action {other:?}"),
                    })
                    .collect();
                (victims, None)
            };

            // Oracle: sort the candidate pool (pre-state residents plus the
            // admitted arrival) ascending by (priority, arrival order); the
            // victims must be exactly the leading run of that order.
            let mut candidates = pre.clone();
            if let Some((priority, ident)) = arrival {
                candidates.insert((priority, next_seq, ident));
                place.insert(ident, (priority, next_seq));
                resident.insert((priority, next_seq, ident));
                next_seq += 1;
            }
            let expect: Vec<BlockIdent> = candidates
                .iter()
                .take(victims.len())
                .map(|&(_, _, ident)| ident)
                .collect();
            assert_eq!(
                victims, expect,
                "sequence {seq_no} op {op}: eviction order diverged from the sort oracle"
            );
            for v in &victims {
                let (p, s) = place.remove(v).expect("victim was resident");
                resident.remove(&(p, s, *v));
            }
            checked_victims += victims.len() as u64;
            assert!(agent.watermark_invariant_holds(), "sequence {seq_no} op {op}: watermark");
            assert!(agent.conservation_holds(), "sequence {seq_no} op {op}: byte conservation");
        }
    }
    println!(
        "PASS eviction order: {PRESSURE_SEQUENCES} randomized pressure sequences, \
         {checked_victims} evictions matched the sort oracle"
    );
}

// ── writer grouping fan-in ──────────────────────────────────────────────────

#[test]
fn writer_grouping_caps_agent_fanin() {
    let wl = generate(
        WorkloadShape::Uniform { jobs: 1, writers: 1000, readers: 20, bytes_per_job: 200 << 20 },
        ArrivalPolicy::AllAtOnce,
        43,
    );
    let run_k = |group_size: u32| {
        let mut cfg = SimConfig::default();
        cfg.cluster = ClusterSpec {
            compute_nodes: 20,
            compute_slots: 64,
            compute_memory_bytes: 2 << 30,
            ..ClusterSpec::default()
        };
        cfg.rates.task_mem_bytes = 1 << 20;
        cfg.rates.emission_rounds = 1;
        cfg.group_size = group_size;
        must_run(&wl, &cfg, 47)
    };
    let grouped = run_k(100);
    let flat = run_k(1000);
    let peak = |r: &RunResult| {
        *r.details.per_job[&JobId(1)].peak_fanin.values().max().expect("fan-in recorded")
    };
    let (peak_g, peak_f) = (peak(&grouped), peak(&flat));
    assert!(
        peak_g <= 100,
        "grouping at k=100 must cap concurrent writer flows per agent, saw {peak_g}"
    );
    assert!(peak_f > 100, "the ungrouped run must actually concentrate load, saw {peak_f}");
    let ingest = |r: &RunResult| r.details.per_job[&JobId(1)].last_commit_s;
    let (t_g, t_f) = (ingest(&grouped), ingest(&flat));
    assert!(
        t_g < t_f,
        "spreading 1000 writers over groups must finish ingesting strictly earlier \
         ({t_g:.3}s vs {t_f:.3}s)"
    );
    println!(
        "PASS grouping fan-in: peak {peak_g} <= 100 vs {peak_f} ungrouped; \
         ingest completes {t_g:.3}s < {t_f:.3}s"
    );
}

// ── duplicate / missing detection ───────────────────────────────────────────

#[test]
fn aggregate_checksums_catch_duplicates_and_omissions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11C);
    for trial in 0..VERIFY_TRIALS {
        let writers = rng.gen_range(2..8);
        let partition = PartitionId(rng.gen_range(0..4));
        let job_seed = rng.gen::<u64>();
        let mut manifest = StageManifest::new();
        let mut consumed: Vec<ConsumedRecord> = Vec::new();
        for w in 0..writers {
            for s in 0..rng.gen_range(1..20) {
                let token = payload_token(job_seed, WriterId(w), partition, s);
                let digest = block_digest(WriterId(w), partition, s, token);
                let bytes = rng.gen_range(1_000..100_000);
                manifest.record_block(WriterId(w), 0, partition, digest, bytes);
                consumed.push(ConsumedRecord {
                    writer_id: WriterId(w),
                    retry_idx: 0,
                    backup_seq: s,
                    checksum: digest,
                    bytes,
                });
            }
        }
        let ledger_of = |records: &[ConsumedRecord]| {
            let mut l = ReaderLedger::new();
            for r in records {
                l.record(r.clone());
            }
            l
        };
        assert!(
            ledger_of(&consumed).verify(&manifest, partition).is_ok(),
            "trial {trial}: the intact consumed set must verify"
        );
        let pick = rng.gen_range(0..consumed.len());
        let mut duplicated = consumed.clone();
        duplicated.push(consumed[pick].clone());
        assert!(
            ledger_of(&duplicated).verify(&manifest, partition).is_err(),
            "trial {trial}: duplicating a consumed block must fail verification"
        );
        let mut missing = consumed.clone();
        missing.remove(pick);
        assert!(
            ledger_of(&missing).verify(&manifest, partition).is_err(),
            "trial {trial}: dropping a consumed block must fail verification"
        );
    }
    println!(
        "PASS corruption detection: {VERIFY_TRIALS}/{VERIFY_TRIALS} duplicated and \
         {VERIFY_TRIALS}/{VERIFY_TRIALS} missing blocks rejected"
    );
}
