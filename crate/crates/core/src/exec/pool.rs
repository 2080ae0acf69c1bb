//! Driver side: a fixed set of persistent workers stepped behind a barrier.

use super::transport::{launcher, Conn, Envelope, Event, Inbox, Launcher, Transport};
use super::wire::{Reply, Request, WireError};
use super::worker::WorkerInit;
use crate::env::{make_env, validate_action, EnvError, Info, ScenarioSpec, StepPadding, StepResult, ENV_NAMES};
use crate::rng::derive_seed;
use serde_json::Value;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};
use thiserror::Error;

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_SPAWN_TIMEOUT: Duration = Duration::from_secs(30);
pub const CLOSE_GRACE: Duration = Duration::from_secs(5);
pub const TIMEOUT_ENV_VAR: &str = "ROLLOUT_GRID_TIMEOUT_SECS";

/// Info keys the worker adds on top of the environment's own.
pub const WORKER_INFO_KEYS: [&str; 2] = ["worker_clock", "substeps"];

const RESTART_STREAM: u64 = 0x5EED_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultPolicy {
    /// Any worker failure or barrier timeout aborts the batch.
    #[default]
    FailFast,
    /// A failed or late worker is replaced, reseeded, and reported as a
    /// truncated episode with `info.worker_restarted = true`.
    Restart,
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub env: String,
    pub env_config: Value,
    pub padding: StepPadding,
    pub n_s: u32,
    pub transport: Transport,
    /// Overridden by `ROLLOUT_GRID_TIMEOUT_SECS` when set.
    pub barrier_timeout: Duration,
    pub spawn_timeout: Duration,
    pub fault_policy: FaultPolicy,
    /// Workers sleep a uniform random time up to this before each STEP reply.
    pub delay_max_ms: u64,
    pub delay_seed: u64,
    /// Record a send/receive log for every step.
    pub trace: bool,
}

impl PoolConfig {
    pub fn new(env: &str) -> Self {
        Self {
            env: env.to_string(),
            env_config: Value::Null,
            padding: StepPadding::default(),
            n_s: 1,
            transport: Transport::InProcess,
            barrier_timeout: DEFAULT_BARRIER_TIMEOUT,
            spawn_timeout: DEFAULT_SPAWN_TIMEOUT,
            fault_policy: FaultPolicy::FailFast,
            delay_max_ms: 0,
            delay_seed: 0,
            trace: false,
        }
    }

    pub fn with_env_config(mut self, config: Value) -> Self {
        self.env_config = config;
        self
    }

    pub fn with_n_s(mut self, n_s: u32) -> Self {
        self.n_s = n_s;
        self
    }

    pub fn with_transport(mut self, transport: Transport) -> Self {
        self.transport = transport;
        self
    }

    pub fn with_padding(mut self, padding: StepPadding) -> Self {
        self.padding = padding;
        self
    }

    fn effective_barrier_timeout(&self) -> Duration {
        std::env::var(TIMEOUT_ENV_VAR)
            .ok()
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|s| *s > 0.0 && s.is_finite())
            .map_or(self.barrier_timeout, Duration::from_secs_f64)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkerFault {
    #[error("worker reported error {code}: {message}")]
    Reported { code: u32, message: String },
    #[error("worker disconnected")]
    Disconnected,
    #[error("protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchOutcome {
    Reset(Vec<f64>),
    Step(StepResult),
}

/// Per-worker outcomes of a batch in which at least one worker failed.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{operation} failed on workers {:?}", self.failed())]
pub struct BatchError {
    pub operation: &'static str,
    pub outcomes: Vec<Result<BatchOutcome, WorkerFault>>,
}

impl BatchError {
    pub fn failed(&self) -> Vec<usize> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.is_err().then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("cannot start worker {index:?}: {cause}")]
    Spawn { index: Option<usize>, cause: String },
    #[error("workers {missing:?} not ready within {timeout:?}")]
    SpawnTimeout { missing: Vec<usize>, timeout: Duration },
    #[error("expected {expected} rows, got {got}")]
    BatchShape { expected: usize, got: usize },
    #[error("worker {worker}: {source}")]
    Action { worker: usize, source: EnvError },
    #[error("step {step_index}: workers {laggards:?} missed the {timeout:?} barrier")]
    BarrierTimeout {
        step_index: u64,
        laggards: Vec<usize>,
        timeout: Duration,
    },
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("pool unusable after earlier failure: {0}")]
    Poisoned(String),
    #[error("pool is closed")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Send,
    Recv,
}

/// One entry of the driver's step log, in the order the driver saw it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub step_index: u64,
    pub worker: usize,
    pub kind: TraceKind,
}

/// Output of one barrier-synchronized step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStep {
    pub step_index: u64,
    pub actions: Vec<Vec<f64>>,
    pub results: Vec<StepResult>,
    /// Send-to-receive time per worker.
    pub reply_times: Vec<Duration>,
    /// Slowest reply time.
    pub barrier_latency: Duration,
    /// When the requests went out.
    pub sent_at: Instant,
}

struct Slot {
    conn: Option<Box<dyn Conn>>,
    generation: u64,
    seed: u64,
    options: Info,
    restarts: u64,
}

/// Ordered set of `W` persistent workers hosting the same environment.
pub struct WorkerPool {
    cfg: PoolConfig,
    barrier_timeout: Duration,
    spec: ScenarioSpec,
    launcher: Box<dyn Launcher>,
    slots: Vec<Slot>,
    inbox_tx: Inbox,
    inbox: Receiver<Envelope>,
    step_index: u64,
    trace: Vec<TraceEvent>,
    poisoned: Option<String>,
    closed: bool,
    spawn_time: Duration,
    ready_at: Instant,
}

impl WorkerPool {
    /// Starts `w` workers and returns once all have acknowledged INIT.
    pub fn spawn(cfg: PoolConfig, w: usize) -> Result<Self, PoolError> {
        let t0 = Instant::now();
        let spawn_err = |index, cause: String| PoolError::Spawn { index, cause };
        if w == 0 {
            return Err(spawn_err(None, "worker count must be >= 1".into()));
        }
        if cfg.n_s == 0 {
            return Err(spawn_err(None, "n_s must be >= 1".into()));
        }
        if !ENV_NAMES.contains(&cfg.env.as_str()) {
            return Err(spawn_err(None, format!("unknown environment `{}`", cfg.env)));
        }
        // validates the config and yields the shapes without touching a worker
        let probe = make_env(&cfg.env, &cfg.env_config, StepPadding::default())
            .map_err(|e| spawn_err(None, e.to_string()))?;
        let spec = probe.spec().clone();
        drop(probe);

        let launcher = launcher(&cfg.transport, &cfg.env, cfg.spawn_timeout)
            .map_err(|e| spawn_err(None, format!("transport setup: {e}")))?;
        let (inbox_tx, inbox) = mpsc::channel();
        let mut pool = Self {
            barrier_timeout: cfg.effective_barrier_timeout(),
            cfg,
            spec,
            launcher,
            slots: Vec::with_capacity(w),
            inbox_tx,
            inbox,
            step_index: 0,
            trace: Vec::new(),
            poisoned: None,
            closed: false,
            spawn_time: Duration::ZERO,
            ready_at: t0,
        };
        for index in 0..w {
            let conn = pool
                .launcher
                .launch(index, 0, pool.inbox_tx.clone())
                .map_err(|cause| spawn_err(Some(index), cause));
            let conn = match conn {
                Ok(c) => c,
                Err(e) => {
                    pool.close_all();
                    return Err(e);
                }
            };
            pool.slots.push(Slot {
                conn: Some(conn),
                generation: 0,
                seed: 0,
                options: Info::new(),
                restarts: 0,
            });
        }
        let all: Vec<usize> = (0..w).collect();
        if let Err(e) = pool.init_workers(&all) {
            pool.close_all();
            return Err(e);
        }
        pool.ready_at = Instant::now();
        pool.spawn_time = pool.ready_at - t0;
        Ok(pool)
    }

    fn init_frame(&self, index: usize) -> Vec<u8> {
        let init = WorkerInit {
            env: self.cfg.env.clone(),
            config: self.cfg.env_config.clone(),
            padding: self.cfg.padding,
            n_s: self.cfg.n_s,
            index,
            delay_max_ms: self.cfg.delay_max_ms,
            delay_seed: self.cfg.delay_seed,
        };
        Request::Init(serde_json::to_value(init).expect("plain struct"))
            .encode()
            .expect("INIT fits in a frame")
    }

    fn init_workers(&mut self, targets: &[usize]) -> Result<(), PoolError> {
        let mut sent = Vec::new();
        for &i in targets {
            let frame = self.init_frame(i);
            if let Err(e) = self.send_to(i, &frame) {
                return Err(PoolError::Spawn {
                    index: Some(i),
                    cause: e.to_string(),
                });
            }
            sent.push(i);
        }
        let deadline = Instant::now() + self.cfg.spawn_timeout;
        let (replies, _) = self.collect(&sent, deadline, None);
        let mut missing = Vec::new();
        for (&i, r) in sent.iter().zip(replies) {
            match r {
                Some(Ok(Reply::Ready)) => {}
                Some(Ok(other)) => {
                    return Err(PoolError::Spawn {
                        index: Some(i),
                        cause: format!("expected READY, got tag 0x{:02x}", other.tag()),
                    })
                }
                Some(Err(fault)) => {
                    return Err(PoolError::Spawn {
                        index: Some(i),
                        cause: fault.to_string(),
                    })
                }
                None => missing.push(i),
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(PoolError::SpawnTimeout {
                missing,
                timeout: self.cfg.spawn_timeout,
            })
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn config(&self) -> &PoolConfig {
        &self.cfg
    }

    pub fn n_s(&self) -> u32 {
        self.cfg.n_s
    }

    pub fn barrier_timeout(&self) -> Duration {
        self.barrier_timeout
    }

    /// Time from the spawn call until every worker was ready.
    pub fn spawn_time(&self) -> Duration {
        self.spawn_time
    }

    pub fn ready_at(&self) -> Instant {
        self.ready_at
    }

    /// Steps completed so far; the next [`BatchStep`] carries this index.
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    fn usable(&self) -> Result<(), PoolError> {
        if self.closed {
            return Err(PoolError::Closed);
        }
        if let Some(why) = &self.poisoned {
            return Err(PoolError::Poisoned(why.clone()));
        }
        Ok(())
    }

    fn send_to(&mut self, i: usize, frame: &[u8]) -> Result<(), WorkerFault> {
        match self.slots[i].conn.as_mut() {
            Some(c) => c.send(frame).map_err(|_| WorkerFault::Disconnected),
            None => Err(WorkerFault::Disconnected),
        }
    }

    /// Waits for one reply from each of `targets`. `None` entries timed out.
    #[allow(clippy::type_complexity)]
    fn collect(
        &mut self,
        targets: &[usize],
        deadline: Instant,
        step: Option<(u64, Instant)>,
    ) -> (Vec<Option<Result<Reply, WorkerFault>>>, Vec<Duration>) {
        let mut out: Vec<Option<Result<Reply, WorkerFault>>> = vec![None; targets.len()];
        let mut times = vec![Duration::ZERO; targets.len()];
        let mut pending = targets.len();
        while pending > 0 {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            let (idx, generation, event) = match self.inbox.recv_timeout(deadline - now) {
                Ok(e) => e,
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => unreachable!("pool holds a sender"),
            };
            if idx >= self.slots.len() || generation != self.slots[idx].generation {
                continue;
            }
            let Some(pos) = targets.iter().position(|&t| t == idx) else {
                continue;
            };
            if out[pos].is_some() {
                continue;
            }
            let r = match event {
                Event::Frame(f) => Reply::decode(&f).map_err(|e: WireError| WorkerFault::Protocol(e.to_string())),
                Event::Gone => {
                    self.slots[idx].conn = None;
                    Err(WorkerFault::Disconnected)
                }
            };
            let r = r.and_then(|reply| match reply {
                Reply::Err { code, message } => Err(WorkerFault::Reported { code, message }),
                ok => Ok(ok),
            });
            if let Some((step_index, sent_at)) = step {
                times[pos] = sent_at.elapsed();
                if self.cfg.trace {
                    self.trace.push(TraceEvent {
                        step_index,
                        worker: idx,
                        kind: TraceKind::Recv,
                    });
                }
            }
            out[pos] = Some(r);
            pending -= 1;
        }
        (out, times)
    }

    /// Resets every worker with its own seed and no options.
    pub fn reset_all(&mut self, seeds: &[u64]) -> Result<Vec<Vec<f64>>, PoolError> {
        let options = vec![Info::new(); seeds.len()];
        self.reset_all_with(seeds, &options)
    }

    /// Resets worker `i` with `seeds[i]` and `options[i]`. Later automatic
    /// resets of that worker reuse the same options.
    pub fn reset_all_with(&mut self, seeds: &[u64], options: &[Info]) -> Result<Vec<Vec<f64>>, PoolError> {
        self.usable()?;
        let w = self.len();
        if seeds.len() != w || options.len() != w {
            return Err(PoolError::BatchShape {
                expected: w,
                got: if seeds.len() != w { seeds.len() } else { options.len() },
            });
        }
        let mut outcomes: Vec<Option<Result<BatchOutcome, WorkerFault>>> = vec![None; w];
        let mut sent = Vec::new();
        for i in 0..w {
            let frame = Request::Reset {
                seed: seeds[i],
                options: options[i].clone(),
            }
            .encode()
            .map_err(|e| PoolError::Spawn {
                index: Some(i),
                cause: e.to_string(),
            })?;
            match self.send_to(i, &frame) {
                Ok(()) => sent.push(i),
                Err(f) => outcomes[i] = Some(Err(f)),
            }
            self.slots[i].seed = seeds[i];
            self.slots[i].options = options[i].clone();
        }
        let deadline = Instant::now() + self.barrier_timeout;
        let (replies, _) = self.collect(&sent, deadline, None);
        let mut laggards = Vec::new();
        for (&i, r) in sent.iter().zip(replies) {
            outcomes[i] = match r {
                Some(Ok(Reply::ResetRes(obs))) => Some(Ok(BatchOutcome::Reset(obs))),
                Some(Ok(other)) => Some(Err(WorkerFault::Protocol(format!(
                    "expected RESETRES, got tag 0x{:02x}",
                    other.tag()
                )))),
                Some(Err(f)) => Some(Err(f)),
                None => {
                    laggards.push(i);
                    None
                }
            };
        }
        if !laggards.is_empty() {
            self.poisoned = Some(format!("reset timed out on {laggards:?}"));
            return Err(PoolError::BarrierTimeout {
                step_index: self.step_index,
                laggards,
                timeout: self.barrier_timeout,
            });
        }
        let outcomes: Vec<_> = outcomes.into_iter().map(|o| o.expect("every worker accounted")).collect();
        if outcomes.iter().any(Result::is_err) {
            return Err(BatchError {
                operation: "reset",
                outcomes,
            }
            .into());
        }
        Ok(outcomes
            .into_iter()
            .map(|o| match o {
                Ok(BatchOutcome::Reset(obs)) => obs,
                _ => unreachable!(),
            })
            .collect())
    }

    /// Broadcasts one action per worker and returns once every worker has
    /// replied (or the barrier timed out).
    pub fn step_all(&mut self, actions: &[Vec<f64>]) -> Result<BatchStep, PoolError> {
        self.usable()?;
        let w = self.len();
        if actions.len() != w {
            return Err(PoolError::BatchShape {
                expected: w,
                got: actions.len(),
            });
        }
        for (worker, a) in actions.iter().enumerate() {
            validate_action(a, self.spec.act_dim).map_err(|source| PoolError::Action { worker, source })?;
        }
        let step_index = self.step_index;
        let sent_at = Instant::now();
        let mut faults: Vec<Option<WorkerFault>> = vec![None; w];
        let mut sent = Vec::with_capacity(w);
        for (i, a) in actions.iter().enumerate() {
            let frame = Request::Step(a.clone()).encode().map_err(|e| PoolError::Action {
                worker: i,
                source: EnvError::Config(e.to_string()),
            })?;
            if self.cfg.trace {
                self.trace.push(TraceEvent {
                    step_index,
                    worker: i,
                    kind: TraceKind::Send,
                });
            }
            match self.send_to(i, &frame) {
                Ok(()) => sent.push(i),
                Err(f) => faults[i] = Some(f),
            }
        }
        let deadline = sent_at + self.barrier_timeout;
        let (replies, times) = self.collect(&sent, deadline, Some((step_index, sent_at)));

        let mut results: Vec<Option<StepResult>> = vec![None; w];
        let mut reply_times = vec![Duration::ZERO; w];
        let mut laggards = Vec::new();
        for ((&i, r), t) in sent.iter().zip(replies).zip(times) {
            reply_times[i] = t;
            match r {
                Some(Ok(Reply::StepRes {
                    observation,
                    reward,
                    terminated,
                    truncated,
                    info,
                })) => {
                    results[i] = Some(StepResult {
                        observation,
                        reward,
                        terminated,
                        truncated,
                        info,
                    })
                }
                Some(Ok(other)) => {
                    faults[i] = Some(WorkerFault::Protocol(format!(
                        "expected STEPRES, got tag 0x{:02x}",
                        other.tag()
                    )))
                }
                Some(Err(f)) => faults[i] = Some(f),
                None => laggards.push(i),
            }
        }

        match self.cfg.fault_policy {
            FaultPolicy::FailFast => {
                if !laggards.is_empty() {
                    self.poisoned = Some(format!("step {step_index} timed out on {laggards:?}"));
                    return Err(PoolError::BarrierTimeout {
                        step_index,
                        laggards,
                        timeout: self.barrier_timeout,
                    });
                }
                if faults.iter().any(Option::is_some) {
                    self.step_index += 1;
                    let outcomes = results
                        .into_iter()
                        .zip(faults)
                        .map(|(r, f)| match f {
                            Some(f) => Err(f),
                            None => Ok(BatchOutcome::Step(r.expect("reply present"))),
                        })
                        .collect();
                    return Err(BatchError {
                        operation: "step",
                        outcomes,
                    }
                    .into());
                }
            }
            FaultPolicy::Restart => {
                let mut broken: Vec<(usize, String)> = laggards
                    .iter()
                    .map(|&i| (i, format!("missed the {:?} barrier", self.barrier_timeout)))
                    .collect();
                broken.extend(faults.iter().enumerate().filter_map(|(i, f)| f.as_ref().map(|f| (i, f.to_string()))));
                for (i, why) in broken {
                    results[i] = Some(self.restart(i, &why)?);
                }
            }
        }

        self.step_index += 1;
        let barrier_latency = reply_times.iter().copied().max().unwrap_or_default();
        Ok(BatchStep {
            step_index,
            actions: actions.to_vec(),
            results: results.into_iter().map(|r| r.expect("all replies present")).collect(),
            reply_times,
            barrier_latency,
            sent_at,
        })
    }

    /// Replaces worker `i` and starts it on a fresh episode.
    fn restart(&mut self, i: usize, why: &str) -> Result<StepResult, PoolError> {
        if let Some(mut c) = self.slots[i].conn.take() {
            c.terminate();
        }
        let slot = &mut self.slots[i];
        slot.generation += 1;
        slot.restarts += 1;
        let generation = slot.generation;
        let conn = self
            .launcher
            .launch(i, generation, self.inbox_tx.clone())
            .map_err(|cause| PoolError::Spawn { index: Some(i), cause })?;
        self.slots[i].conn = Some(conn);
        self.init_workers(&[i])?;
        let slot = &self.slots[i];
        let seed = derive_seed(slot.seed, RESTART_STREAM + slot.restarts);
        let frame = Request::Reset {
            seed,
            options: slot.options.clone(),
        }
        .encode()
        .expect("options fit in a frame");
        self.send_to(i, &frame).map_err(|f| PoolError::Spawn {
            index: Some(i),
            cause: f.to_string(),
        })?;
        let deadline = Instant::now() + self.cfg.spawn_timeout;
        let (mut r, _) = self.collect(&[i], deadline, None);
        match r.pop().flatten() {
            Some(Ok(Reply::ResetRes(observation))) => {
                let mut info = Info::new();
                info.insert("worker_restarted".into(), Value::Bool(true));
                info.insert("worker_fault".into(), Value::String(why.to_string()));
                Ok(StepResult {
                    observation,
                    reward: 0.0,
                    terminated: false,
                    truncated: true,
                    info,
                })
            }
            other => Err(PoolError::Spawn {
                index: Some(i),
                cause: format!("restarted worker did not reset: {other:?}"),
            }),
        }
    }

    /// Sends CLOSE to every worker, waits up to [`CLOSE_GRACE`] for them to
    /// exit, then terminates the rest. Calling it again does nothing.
    pub fn close_all(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        let close = Request::Close.encode().expect("empty frame");
        for slot in &mut self.slots {
            if let Some(c) = slot.conn.as_mut() {
                let _ = c.send(&close);
            }
        }
        let deadline = Instant::now() + CLOSE_GRACE;
        loop {
            let running = self
                .slots
                .iter_mut()
                .filter_map(|s| s.conn.as_mut())
                .map(|c| !c.is_finished())
                .filter(|running| *running)
                .count();
            if running == 0 || Instant::now() >= deadline {
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        for slot in &mut self.slots {
            if let Some(mut c) = slot.conn.take() {
                if c.is_finished() {
                    c.reap();
                } else {
                    c.terminate();
                }
            }
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.close_all();
    }
}

/// Copy of `info` without the keys added by the worker loop.
pub fn strip_worker_info(info: &Info) -> Info {
    let mut out = info.clone();
    for k in WORKER_INFO_KEYS {
        out.remove(k);
    }
    out
}
