//! Interference-token purification and calibrated rollout policy
//! optimization on a small, exactly differentiable token policy.

pub mod checkpoint;
pub mod config;
pub mod crpo;
pub mod env;
pub mod error;
pub mod experiments;
pub mod interference;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod types;

pub use config::{ExperimentConfig, Method};
pub use error::{
    CheckpointError, ConfigError, ConfigViolation, EnvError, InterferenceError, LossError,
    PolicyError, TrainError, TypeError,
};
pub use policy::{PolicyConfig, PolicyParams};
pub use types::{Prompt, TokenId, VocabLayout};
