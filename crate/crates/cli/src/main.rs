//! Experiment runner for the shuffle-service simulator.
//!
//! Declarative configs in, report files out:
//!
//! ```text
//! shufflesim run      --config exp.conf [--seed N] --out dir [--trace]
//! shufflesim compare  <run-dir>... --baseline <run-dir>
//! shufflesim sweep    --config exp.conf --out dir --seeds N [--base-seed S]
//!                     [--key path --values a,b,c]
//! shufflesim validate --config exp.conf [--seed N]
//! ```
//!
//! Every run directory is self-describing: `config.echo` (canonical config +
//! seed, reparseable), `metrics.json` (machine-readable, with config and
//! workload hashes), `metrics.csv`, `summary.txt`, and `trace.ndjson` when
//! `--trace` is given. Exit codes: 0 success, 2 config error, 3 simulation
//! or invariant failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use shufflesim::config::{config_hash, workload_hash, ExperimentConfig};
use shufflesim::sim::engine::{self, RunResult};
use shufflesim::sim::metrics::account;
use shufflesim::sim::trace::to_ndjson;

const EXIT_CONFIG: u8 = 2;
const EXIT_SIM: u8 = 3;

#[derive(Parser)]
#[command(
    name = "shufflesim",
    about = "Deterministic shuffle-service simulator and experiment runner",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one simulation and write a report directory.
    Run(RunArgs),
    /// Compare finished runs against a baseline run (relative ratios).
    Compare(CompareArgs),
    /// Run many seeds (and optionally one config-key sweep) in parallel.
    Sweep(SweepArgs),
    /// Parse and validate a config without running anything.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (key.path = value format).
    #[arg(long)]
    config: PathBuf,
    /// Seed override; wins over the `seed` key in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the report files (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Also write the full event trace as trace.ndjson.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories to compare (each must contain metrics.json).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Baseline run directory ratios are computed against.
    #[arg(long)]
    baseline: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of consecutive seeds to run.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// First seed of the sweep (default: config seed, else 0).
    #[arg(long)]
    base_seed: Option<u64>,
    /// Config key to sweep (e.g. mode_select.initial_threshold_s).
    #[arg(long)]
    key: Option<String>,
    /// Comma-separated values for --key.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Also write per-run event traces.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(&a),
        Cmd::Compare(a) => cmd_compare(&a),
        Cmd::Sweep(a) => cmd_sweep(&a),
        Cmd::Validate(a) => cmd_validate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    msg: String,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_CONFIG, msg: msg.into() }
}

fn sim_err(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_SIM, msg: msg.into() }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(|e| config_err(e.to_string()))
}

/// One full simulation: run, then cross-check the online metrics against a
/// replay of the emitted trace before reporting anything.
fn execute(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult, CliError> {
    let workload = cfg.workload(seed);
    let result = engine::run(&workload, &cfg.sim, seed)
        .map_err(|e| sim_err(format!("simulation failed: {e}")))?;
    verify_accounting(&result)?;
    Ok(result)
}

/// The engine keeps online accumulators; replaying the trace must agree.
/// A mismatch means the trace or the accounting is wrong — refuse to report.
fn verify_accounting(result: &RunResult) -> Result<(), CliError> {
    let replayed = account(&result.trace);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    if replayed.jobs.len() != result.metrics.jobs.len() {
        return Err(sim_err("metrics/trace mismatch: job count"));
    }
    for (a, b) in result.metrics.jobs.iter().zip(replayed.jobs.iter()) {
        if a.job != b.job
            || a.rerun_times != b.rerun_times
            || a.mem_served_bytes != b.mem_served_bytes
            || a.disk_served_bytes != b.disk_served_bytes
            || !close(a.cu_slot_min, b.cu_slot_min)
        {
            return Err(sim_err(format!(
                "metrics/trace mismatch on {}: online vs replayed accounting disagree",
                a.job
            )));
        }
    }
    Ok(())
}

fn write_run_dir(
    dir: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    result: &RunResult,
    with_trace: bool,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| sim_err(format!("cannot create {}: {e}", dir.display())))?;
    let io = |e: std::io::Error| sim_err(format!("write failed in {}: {e}", dir.display()));

    let canonical = cfg.canonical(seed);
    let chash = config_hash(&canonical);
    let whash = workload_hash(&canonical);
    fs::write(dir.join("config.echo"), &canonical).map_err(io)?;

    let json = serde_json::json!({
        "config_hash": chash,
        "workload_hash": whash,
        "seed": seed,
        "metrics": result.metrics,
        "details": result.details,
    });
    let mut body = serde_json::to_string_pretty(&json)
        .map_err(|e| sim_err(format!("serialize metrics: {e}")))?;
    body.push('\n');
    fs::write(dir.join("metrics.json"), body).map_err(io)?;
    fs::write(dir.join("metrics.csv"), result.metrics.to_csv_string()).map_err(io)?;
    fs::write(dir.join("summary.txt"), render_summary(cfg, seed, result, &chash, &whash))
        .map_err(io)?;
    if with_trace {
        fs::write(dir.join("trace.ndjson"), to_ndjson(&result.trace)).map_err(io)?;
    }
    Ok(())
}

fn render_summary(
    cfg: &ExperimentConfig,
    seed: u64,
    result: &RunResult,
    chash: &str,
    whash: &str,
) -> String {
    use std::fmt::Write as _;
    let m = &result.metrics;
    let mut s = String::new();
    let _ = writeln!(s, "shufflesim run summary");
    let _ = writeln!(s, "seed            {seed}");
    let _ = writeln!(s, "config hash     {chash}");
    let _ = writeln!(s, "workload hash   {whash}");
    let _ = writeln!(s, "jobs            {} ({} completed)", m.jobs.len(), m.jobs_completed);
    let _ = writeln!(s, "makespan        {:10.3} s", m.makespan_s);
    let _ = writeln!(s, "total E2E       {:10.3} s", m.total_e2e_s());
    let _ = writeln!(s, "total CU        {:10.3} slot-min", m.total_cu_slot_min);
    let _ = writeln!(s, "total reruns    {:7}", m.total_rerun_times);
    let _ = writeln!(
        s,
        "memory shuffle  {:9.1}%  ({} of {} bytes served)",
        m.memory_shuffle_util * 100.0,
        m.total_mem_served_bytes,
        m.total_mem_served_bytes + m.total_disk_served_bytes,
    );
    let _ = writeln!(s, "events          {:7}", result.details.event_count);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>6} {:>9} {:>12} {:>12} {:>7} {:>8} {:>9} {:>6}",
        "job", "mode", "e2e_s", "cu_slotmin", "reruns", "mem%", "policy", "done"
    );
    for j in &m.jobs {
        let d = result.details.per_job.get(&j.job);
        let mode = d.map_or("?", |d| match d.mode {
            shufflesim::block::ShuffleMode::InMemory => "memory",
            shufflesim::block::ShuffleMode::OnDisk => "disk",
        });
        let policy = d.map_or("?".to_string(), |d| format!("{:?}", d.policy.mode).to_lowercase());
        let _ = writeln!(
            s,
            "{:>6} {:>9} {:>12.3} {:>12.3} {:>7} {:>8.1} {:>9} {:>6}",
            j.job.0,
            mode,
            j.e2e_s,
            j.cu_slot_min,
            j.rerun_times,
            j.memory_shuffle_util * 100.0,
            policy,
            if j.completed { "yes" } else { "NO" },
        );
    }
    let _ = cfg; // config is fully captured in config.echo next to this file
    s
}

fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let seed = cfg.resolve_seed(a.seed).map_err(|e| config_err(e.to_string()))?;
    let workload = cfg.workload(seed);
    engine::validate_setup(&workload, &cfg.sim, seed)
        .map_err(|e| config_err(format!("config rejected: {e}")))?;
    let result = execute(&cfg, seed)?;
    write_run_dir(&a.out, &cfg, seed, &result, a.trace)?;
    println!(
        "run complete: {} job(s), makespan {:.3} s, {} rerun(s) -> {}",
        result.metrics.jobs.len(),
        result.metrics.makespan_s,
        result.metrics.total_rerun_times,
        a.out.display()
    );
    Ok(())
}

#[derive(Clone)]
struct LoadedRun {
    name: String,
    workload_hash: String,
    e2e_s: f64,
    cu_slot_min: f64,
    reruns: u64,
    makespan_s: f64,
    mem_util: f64,
}

fn load_run_dir(dir: &Path) -> Result<LoadedRun, CliError> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("bad JSON in {}: {e}", path.display())))?;
    let m = &v["metrics"];
    let total_e2e = m["jobs"]
        .as_array()
        .map(|jobs| {
            jobs.iter()
                .filter(|j| j["completed"].as_bool().unwrap_or(false))
                .map(|j| j["e2e_s"].as_f64().unwrap_or(0.0))
                .sum()
        })
        .unwrap_or(0.0);
    Ok(LoadedRun {
        name: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        workload_hash: v["workload_hash"].as_str().unwrap_or("").to_string(),
        e2e_s: total_e2e,
        cu_slot_min: m["total_cu_slot_min"].as_f64().unwrap_or(0.0),
        reruns: m["total_rerun_times"].as_u64().unwrap_or(0),
        makespan_s: m["makespan_s"].as_f64().unwrap_or(0.0),
        mem_util: m["memory_shuffle_util"].as_f64().unwrap_or(0.0),
    })
}

fn cmd_compare(a: &CompareArgs) -> Result<(), CliError> {
    let base = load_run_dir(&a.baseline)?;
    let mut rows = Vec::new();
    for dir in &a.runs {
        let run = load_run_dir(dir)?;
        if run.workload_hash != base.workload_hash {
            return Err(config_err(format!(
                "workload mismatch: {} ran a different workload than baseline {} \
                 ({} vs {}); comparison refused",
                run.name, base.name, run.workload_hash, base.workload_hash
            )));
        }
        rows.push(run);
    }
    let ratio = |x: f64, b: f64| if b == 0.0 { f64::NAN } else { x / b };
    println!(
        "{:<24} {:>10} {:>10} {:>10} {:>8} {:>8}",
        "run", "e2e_ratio", "cu_ratio", "makespan", "reruns", "mem%"
    );
    println!(
        "{:<24} {:>10} {:>10} {:>10.3} {:>8} {:>8.1}  (baseline)",
        base.name, "1.000", "1.000", base.makespan_s, base.reruns, base.mem_util * 100.0
    );
    for r in &rows {
        println!(
            "{:<24} {:>10.3} {:>10.3} {:>10.3} {:>8} {:>8.1}",
            r.name,
            ratio(r.e2e_s, base.e2e_s),
            ratio(r.cu_slot_min, base.cu_slot_min),
            r.makespan_s,
            r.reruns,
            r.mem_util * 100.0,
        );
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    if a.key.is_some() != !a.values.is_empty() {
        return Err(config_err("--key and --values must be given together"));
    }
    let base_seed = a.base_seed.or(cfg.seed).unwrap_or(0);

    // Build the config variants: the cartesian product of seeds x key values.
    let mut variants: Vec<(String, ExperimentConfig, u64)> = Vec::new();
    let keyed: Vec<(String, ExperimentConfig)> = match (&a.key, &a.values) {
        (Some(key), values) if !values.is_empty() => {
            let base_canon = cfg.canonical(base_seed);
            values
                .iter()
                .map(|v| {
                    let patched = patch_canonical(&base_canon, key, v)?;
                    let c = ExperimentConfig::parse(&patched)
                        .map_err(|e| config_err(format!("--key {key}={v}: {e}")))?;
                    Ok((format!("{}-{}", key.replace('.', "_"), v), c))
                })
                .collect::<Result<_, CliError>>()?
        }
        _ => vec![(String::from("base"), cfg.clone())],
    };
    for seed in base_seed..base_seed + a.seeds.max(1) {
        for (tag, c) in &keyed {
            variants.push((format!("{tag}-seed{seed}"), c.clone(), seed));
        }
    }

    for (_, c, seed) in &variants {
        let workload = c.workload(*seed);
        engine::validate_setup(&workload, &c.sim, *seed)
            .map_err(|e| config_err(format!("config rejected: {e}")))?;
    }

    fs::create_dir_all(&a.out)
        .map_err(|e| sim_err(format!("cannot create {}: {e}", a.out.display())))?;

    // Independent simulations; each one is single-threaded inside.
    let results: Vec<Result<(String, u64, RunResult), CliError>> = variants
        .par_iter()
        .map(|(name, c, seed)| {
            let r = execute(c, *seed)?;
            write_run_dir(&a.out.join(name), c, *seed, &r, a.trace)?;
            Ok((name.clone(), *seed, r))
        })
        .collect();

    let mut table = String::from("name,seed,e2e_s,cu_slot_min,reruns,makespan_s,mem_util\n");
    let mut rows: Vec<(String, u64, RunResult)> = Vec::new();
    for r in results {
        rows.push(r?);
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    for (name, seed, r) in &rows {
        use std::fmt::Write as _;
        let _ = writeln!(
            table,
            "{},{},{:.6},{:.6},{},{:.6},{:.6}",
            name,
            seed,
            r.metrics.total_e2e_s(),
            r.metrics.total_cu_slot_min,
            r.metrics.total_rerun_times,
            r.metrics.makespan_s,
            r.metrics.memory_shuffle_util,
        );
    }
    fs::write(a.out.join("sweep.csv"), table)
        .map_err(|e| sim_err(format!("write sweep.csv: {e}")))?;
    println!("sweep complete: {} run(s) -> {}", rows.len(), a.out.display());
    Ok(())
}

/// Replace (or insert) one `key = value` line in a canonical config text.
fn patch_canonical(canonical: &str, key: &str, value: &str) -> Result<String, CliError> {
    let mut out = String::new();
    let mut replaced = false;
    for line in canonical.lines() {
        if line.starts_with(&format!("{key} = ")) {
            out.push_str(&format!("{key} = {value}\n"));
            replaced = true;
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    if !replaced {
        out.push_str(&format!("{key} = {value}\n"));
    }
    Ok(out)
}

fn cmd_validate(a: &ValidateArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let seed = cfg.resolve_seed(a.seed).map_err(|e| config_err(e.to_string()))?;
    let workload = cfg.workload(seed);
    engine::validate_setup(&workload, &cfg.sim, seed)
        .map_err(|e| config_err(format!("config rejected: {e}")))?;
    println!(
        "config ok: {} job(s), seed {}, config hash {}",
        workload.len(),
        seed,
        config_hash(&cfg.canonical(seed))
    );
    Ok(())
}

