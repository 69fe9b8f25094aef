//! Server and client round state machines for the double-momentum family.
//!
//! Every method is one [`MethodConfig`]: server momentum `μ_s`, local
//! momentum `μ_l`, the boundary rule for local buffers, the fusion mode,
//! and the step constants `α`, `β`, `η`, `P`.

mod config;
mod round;
mod run;

pub use config::{
    method_from_name, Boundary, Fusion, Method, MethodConfig, DEFAULT_ALPHA, DEFAULT_BETA,
    DEFAULT_ETA, DEFAULT_LOCAL_STEPS, DEFAULT_MU_L, DEFAULT_MU_S,
};
pub use round::{
    infer_server_momentum, local_round, sample_participants, server_round, ClientState,
    LocalOutput, LocalRecord, RoundResult, ServerState,
};
pub use run::{
    floats_per_participant, local_steps_from_epochs, run, Experiment, RoundMetrics, RunOutput,
    Sampling, Simulator, DEFAULT_TRACE_CAP,
};
