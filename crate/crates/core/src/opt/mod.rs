//! Batch-parallel optimizers: TPE for lander designs, CEM for tracker
//! policies, both evaluating through a worker pool.

pub mod cem;
pub mod drivers;
pub mod study;
pub mod tpe;

pub use cem::{cem_iterate, CemConfig, CemState, LinearPolicy};
pub use drivers::{
    rollout_policies, run_bo, run_cem, BoConfig, BoOutcome, CemOutcome, CemRecord, CemRunConfig, EpisodeStats,
    OptError, Sampler,
};
pub use study::{parse_trial_log, tpe_split, Params, Study, StudyError, Trial, TrialLogWriter, TrialState};
pub use tpe::{parzen_pdf, tpe_ask, Dimension, Parzen, SearchSpace, TpeConfig};
