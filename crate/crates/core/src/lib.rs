//! Simulation of compressed federated learning with error feedback.
//!
//! The crate is organised bottom-up:
//!
//! - [`param_space`]: grouped parameter vectors and their arithmetic,
//! - [`compressors`]: biased and unbiased compression operators with bit costs,
//! - [`problems`]: objectives and client datasets,
//! - [`local_trainer`]: client local steps and error-compensated uploads,
//! - [`server`]: global SGD / AMSGrad and the compressed broadcast channel,
//! - [`federation_engine`]: round orchestration and runtime invariants,
//! - [`metrics`]: per-round records and their CSV / JSON formats.

pub mod compressors;
pub mod error;
pub mod federation_engine;
pub mod local_trainer;
pub mod metrics;
pub mod param_space;
pub mod problems;
pub mod server;
pub mod streams;

pub use compressors::{compress, deviation_bound, CompressedUpdate, CompressorSpec, Payload};
pub use error::{Error, Result};
pub use federation_engine::{run_experiment, Engine, ExperimentOutcome, ExperimentSummary, RestartPolicy, RunConfig};
pub use local_trainer::{ClientState, Hyperparams};
pub use metrics::RoundRecord;
pub use param_space::{GroupLayout, ParamVector};
pub use problems::{Problem, ProblemSpec};
pub use server::GlobalOptimizer;
