//! Driver/worker execution layer.
//!
//! A [`WorkerPool`] owns `W` workers, each hosting one environment for the
//! pool's lifetime. [`WorkerPool::step_all`] broadcasts one action per worker
//! and returns only when every worker has replied. Each worker runs `n_s`
//! decision steps per request, sums their rewards, and on episode end stores
//! the last observation under `info.final_observation` and resets itself
//! with `derive_seed(reset_seed, episode_count)`.

pub mod pool;
pub mod transport;
pub mod wire;
pub mod worker;

pub use pool::{
    strip_worker_info, BatchError, BatchOutcome, BatchStep, FaultPolicy, PoolConfig, PoolError, TraceEvent,
    TraceKind, WorkerFault, WorkerPool,
};
pub use transport::{serve_tcp, SocketMode, Transport};
