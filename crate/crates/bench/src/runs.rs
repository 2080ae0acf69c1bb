//! The three experiment modes.

use crate::config::{Mode, RunConfig, SamplerKind, TransportKind};
use crate::output::{emit_plot_data, write_json, CsvLog, CurveRecord, IoContext, OutputError};
use rollout_grid::exec::{PoolConfig, PoolError, SocketMode, Transport, WorkerPool};
use rollout_grid::opt::{
    parse_trial_log, run_bo, run_cem, BoConfig, CemRunConfig, OptError, Sampler, Study, StudyError, Trial,
    TrialLogWriter,
};
use rollout_grid::rng::derive_seed;
use serde_json::{json, Value};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const THROUGHPUT_HEADER: [&str; 9] = [
    "n_env",
    "n_s",
    "repeat",
    "round_trips",
    "env_steps",
    "wall_clock_s",
    "env_steps_per_s",
    "mean_barrier_latency_s",
    "spawn_time_s",
];
pub const CURVE_HEADER: [&str; 2] = ["wall_clock_s", "best_value"];
pub const TRAINING_HEADER: [&str; 4] = ["wall_clock_s", "mean_return", "mse_x", "mse_y"];

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Log(#[from] StudyError),
    #[error("{0}")]
    Usage(String),
}

/// Host-side settings that are not part of the experiment itself.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    /// Executable started for socket workers; defaults to this process.
    pub worker_program: Option<PathBuf>,
    /// Replay an existing trial log in the output directory (BO only).
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub n_env: usize,
    pub n_s: u32,
    pub repeat: u32,
    pub round_trips: u64,
    pub env_steps: u64,
    pub wall_clock_s: f64,
    pub env_steps_per_s: f64,
    pub mean_barrier_latency_s: f64,
    pub spawn_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunSummary {
    Throughput(Vec<ThroughputRow>),
    Bo { best: Option<Trial>, trials: usize },
    Cem { best_return: f64, iterations: usize },
}

pub fn pool_config(cfg: &RunConfig, ctx: &RunContext) -> Result<PoolConfig, RunError> {
    let transport = match cfg.transport {
        TransportKind::InProcess => Transport::InProcess,
        TransportKind::Socket => {
            let program = match &ctx.worker_program {
                Some(p) => p.clone(),
                None => std::env::current_exe().map_err(|e| RunError::Usage(format!("locating worker binary: {e}")))?,
            };
            Transport::Socket(SocketMode::Processes {
                program,
                args: Vec::new(),
            })
        }
    };
    Ok(PoolConfig::new(&cfg.env)
        .with_env_config(cfg.env_config.clone())
        .with_n_s(cfg.n_s)
        .with_padding(cfg.padding)
        .with_transport(transport))
}

fn host_info() -> Value {
    json!({
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "logical_cpus": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    })
}

fn manifest(cfg: &RunConfig, status: &str, extra: Value) -> Value {
    let mut m = json!({
        "config": cfg.to_json(),
        "seed": cfg.seed,
        "versions": {
            "rollout-grid": rollout_grid::VERSION,
            "rollout-grid-bench": env!("CARGO_PKG_VERSION"),
        },
        "host": host_info(),
        "status": status,
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    m
}

/// Reads the run configuration back out of a manifest.
pub fn config_from_manifest(text: &str) -> Result<RunConfig, crate::config::ConfigError> {
    let v: Value = serde_json::from_str(text).map_err(|e| crate::config::ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let inner = v.get("config").cloned().unwrap_or(Value::Null);
    crate::config::parse_config(&inner.to_string())
}

/// Runs the configured mode, writing into `cfg.output_dir`. The manifest is
/// written first with status "running" and rewritten on exit.
pub fn run(cfg: &RunConfig, ctx: &RunContext) -> Result<RunSummary, RunError> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).at(dir)?;
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest(cfg, "running", json!({})))?;
    let started = Instant::now();
    let result = match cfg.mode {
        Mode::Throughput => run_throughput(cfg, ctx).map(RunSummary::Throughput),
        Mode::Bo => run_study(cfg, ctx),
        Mode::Cem => run_training(cfg, ctx),
    };
    let elapsed = started.elapsed().as_secs_f64();
    let extra = match &result {
        Ok(s) => {
            let mut e = json!({ "total_s": elapsed });
            match s {
                RunSummary::Bo { best, trials } => {
                    e["trials"] = json!(trials);
                    e["best"] = serde_json::to_value(best).expect("serializable");
                }
                RunSummary::Cem {
                    best_return,
                    iterations,
                } => {
                    e["iterations"] = json!(iterations);
                    e["best_return"] = json!(best_return);
                }
                RunSummary::Throughput(rows) => e["rows"] = json!(rows.len()),
            }
            e
        }
        Err(err) => json!({ "total_s": elapsed, "error": err.to_string() }),
    };
    let status = if result.is_ok() { "complete" } else { "failed" };
    write_json(&manifest_path, &manifest(cfg, status, extra))?;
    result
}

/// Fixed zero-action rollouts over every pool size in the sweep.
pub fn run_throughput(cfg: &RunConfig, ctx: &RunContext) -> Result<Vec<ThroughputRow>, RunError> {
    let path = cfg.output_dir.join("throughput.csv");
    let mut csv = CsvLog::create(&path, &THROUGHPUT_HEADER)?;
    let sweep = if cfg.throughput.sweep.is_empty() {
        vec![cfg.n_env]
    } else {
        cfg.throughput.sweep.clone()
    };
    let rounds = cfg.throughput.steps.div_ceil(cfg.n_s as u64);
    let mut rows = Vec::new();
    for &w in &sweep {
        for repeat in 0..cfg.throughput.repeats {
            let mut pool = WorkerPool::spawn(pool_config(cfg, ctx)?, w)?;
            let seeds: Vec<u64> = (0..w as u64).map(|i| derive_seed(cfg.seed, i)).collect();
            pool.reset_all(&seeds)?;
            let actions = vec![vec![0.0; pool.spec().act_dim]; w];
            let mut latency = 0.0;
            for _ in 0..rounds {
                latency += pool.step_all(&actions)?.barrier_latency.as_secs_f64();
            }
            let wall = pool.ready_at().elapsed().as_secs_f64();
            let env_steps = rounds * cfg.n_s as u64 * w as u64;
            let row = ThroughputRow {
                n_env: w,
                n_s: cfg.n_s,
                repeat,
                round_trips: rounds,
                env_steps,
                wall_clock_s: wall,
                env_steps_per_s: env_steps as f64 / wall,
                mean_barrier_latency_s: latency / rounds as f64,
                spawn_time_s: pool.spawn_time().as_secs_f64(),
            };
            pool.close_all();
            csv.row([
                row.n_env.to_string(),
                row.n_s.to_string(),
                row.repeat.to_string(),
                row.round_trips.to_string(),
                row.env_steps.to_string(),
                row.wall_clock_s.to_string(),
                row.env_steps_per_s.to_string(),
                row.mean_barrier_latency_s.to_string(),
                row.spawn_time_s.to_string(),
            ])?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn bo_config(cfg: &RunConfig) -> Result<BoConfig, RunError> {
    let lander: rollout_grid::lander::LanderConfig = serde_json::from_value(cfg.env_config.clone())
        .map_err(|e| RunError::Usage(format!("env_config: {e}")))?;
    let sampler = match cfg.bo.sampler {
        SamplerKind::Tpe => Sampler::Tpe(cfg.bo.tpe),
        SamplerKind::Random => Sampler::Random,
    };
    Ok(BoConfig {
        priors: lander.priors,
        ..BoConfig::new(sampler, cfg.bo.n_trials, cfg.batch(), cfg.seed)
    })
}

/// Best-so-far rows for already-recorded trials, in completion order.
fn replayed_curve(trials: &[Trial]) -> Vec<(f64, f64)> {
    let mut order: Vec<&Trial> = trials.iter().collect();
    order.sort_by(|a, b| a.t_end.total_cmp(&b.t_end).then(a.number.cmp(&b.number)));
    let mut best: Option<f64> = None;
    let mut out = Vec::new();
    for t in order {
        if let Some(v) = t.value {
            best = Some(best.map_or(v, |b| b.min(v)));
        }
        if let Some(b) = best {
            out.push((t.t_end, b));
        }
    }
    out
}

/// BO study: `trials.jsonl`, `curve.csv` and `plot/`.
pub fn run_study(cfg: &RunConfig, ctx: &RunContext) -> Result<RunSummary, RunError> {
    let dir = &cfg.output_dir;
    let log_path = dir.join("trials.jsonl");
    let prior: Vec<Trial> = if ctx.resume && log_path.exists() {
        parse_trial_log(&std::fs::read_to_string(&log_path).at(&log_path)?)?
    } else {
        Vec::new()
    };
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(ctx.resume)
        .truncate(!ctx.resume)
        .open(&log_path)
        .at(&log_path)?;
    let mut log = TrialLogWriter::new(file);
    let curve_path = dir.join("curve.csv");
    let mut curve = CsvLog::create(&curve_path, &CURVE_HEADER)?;
    let mut records = Vec::new();
    for (t, b) in replayed_curve(&prior) {
        curve.row([t.to_string(), b.to_string()])?;
        records.push(CurveRecord::new(t, "best_value", b));
    }
    let study = Study::replay(prior);
    let bo = bo_config(cfg)?;
    let mut pool = WorkerPool::spawn(pool_config(cfg, ctx)?, cfg.n_env)?;
    let mut sink_err: Option<OutputError> = None;
    let out = run_bo(&mut pool, &bo, study, |trials, points| {
        for t in trials {
            log.append(t)?;
        }
        for &(t, b) in points {
            records.push(CurveRecord::new(t, "best_value", b));
            if let Err(e) = curve.row([t.to_string(), b.to_string()]) {
                let io = std::io::Error::other(e.to_string());
                sink_err = Some(e);
                return Err(io);
            }
        }
        Ok(())
    });
    pool.close_all();
    if let Some(e) = sink_err {
        return Err(e.into());
    }
    let out = out.map_err(|e| match e {
        OptError::Io(io) => RunError::Output(OutputError {
            path: log_path.clone(),
            source: io,
        }),
        other => other.into(),
    })?;
    emit_plot_data(&records, &["best_value"], &dir.join("plot"))?;
    Ok(RunSummary::Bo {
        best: out.best,
        trials: out.study.len(),
    })
}

/// CEM training: `training.csv`, `policy.json` and `plot/`.
pub fn run_training(cfg: &RunConfig, ctx: &RunContext) -> Result<RunSummary, RunError> {
    let dir = &cfg.output_dir;
    let path = dir.join("training.csv");
    let mut csv = CsvLog::create(&path, &TRAINING_HEADER)?;
    let mut pool = WorkerPool::spawn(pool_config(cfg, ctx)?, cfg.n_env)?;
    let rc = CemRunConfig {
        cem: cfg.cem.cem_config(),
        iterations: cfg.cem.iterations,
        seed: cfg.seed,
    };
    let mut records = Vec::new();
    let mut sink_err = None;
    let out = run_cem(&mut pool, &rc, |r| {
        let t = r.wall_clock_s;
        records.push(CurveRecord::new(t, "mean_return", r.mean_return));
        records.push(CurveRecord::new(t, "mse_x", r.mse_x));
        records.push(CurveRecord::new(t, "mse_y", r.mse_y));
        csv.row([t, r.mean_return, r.mse_x, r.mse_y].map(|x| x.to_string()))
            .map_err(|e| {
                let io = std::io::Error::other(e.to_string());
                sink_err = Some(e);
                io
            })
    });
    pool.close_all();
    if let Some(e) = sink_err {
        return Err(e.into());
    }
    let out = out?;
    let policy_path = dir.join("policy.json");
    write_json(&policy_path, &serde_json::to_value(&out.best).expect("serializable"))?;
    emit_plot_data(&records, &["mean_return", "mse_x", "mse_y"], &dir.join("plot"))?;
    Ok(RunSummary::Cem {
        best_return: out.best_return,
        iterations: out.curve.len(),
    })
}

/// Loads a trial log written by a BO run.
pub fn read_trials(path: &Path) -> Result<Vec<Trial>, RunError> {
    let mut text = String::new();
    std::io::Read::read_to_string(&mut File::open(path).at(path)?, &mut text).at(path)?;
    Ok(parse_trial_log(&text)?)
}
