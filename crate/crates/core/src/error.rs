//! Error types for every module of the crate.

use std::path::PathBuf;

use crate::types::TokenId;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("distractor mask length {mask} does not match token length {tokens}")]
    MaskLength { tokens: usize, mask: usize },
    #[error("every vocabulary region needs at least one id")]
    EmptyVocabRegion,
    #[error("vocabulary size {0} is below the minimum of 8")]
    VocabTooSmall(usize),
}

/// One violated configuration bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigViolation {
    pub field: &'static str,
    pub value: String,
    pub message: String,
}

impl std::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (got {} = {})", self.message, self.field, self.value)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value {value:?} for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ConfigViolation>),
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PolicyError {
    #[error("non-finite params")]
    NonFiniteParams,
    #[error("response must contain at least one token")]
    EmptyResponse,
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("invalid policy config: {0}")]
    Config(String),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated: expected {expected} parameter bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("key range holds {available} ids but {pairs} distinct keys are required")]
    NotEnoughKeys { available: usize, pairs: usize },
    #[error("distractor rate {0} outside [0, 1]")]
    DistractorRate(f64),
    #[error("at least one key/value pair is required")]
    NoPairs,
    #[error("golden instance parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Type(#[from] TypeError),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InterferenceError {
    #[error("position {position} out of range for prompt of length {len}")]
    BadPosition { position: usize, len: usize },
    #[error("purification would remove all {0} prompt tokens")]
    RemovesEverything(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("group {group}: non-finite {what}")]
    NonFinite { group: usize, what: &'static str },
    #[error("group {group}: {reason}")]
    BadGroup { group: usize, reason: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("step {step}: {source}")]
    Loss { step: u64, source: LossError },
    #[error("step {step}: non-finite loss")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Interference(#[from] InterferenceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
