//! Experiment configuration: a flat `key = value` text format.
//!
//! ```text
//! # comment
//! method = lens
//! tau = 0.5
//! gamma = 0.03
//! ```
//!
//! Unknown keys are rejected. Overrides (`--set key=value` on the command
//! line) are applied with [`ExperimentConfig::set`] after the file is read.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::env::TaskConfig;
use crate::error::{ConfigError, ConfigViolation};
use crate::policy::PolicyConfig;
use crate::types::VocabLayout;

/// Training method driving group construction and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Grpo,
    Lens,
    DapoFilter,
    Resample,
    RandomPrune,
    GradPrune,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Grpo,
        Method::Lens,
        Method::DapoFilter,
        Method::Resample,
        Method::RandomPrune,
        Method::GradPrune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Lens => "lens",
            Method::DapoFilter => "dapo_filter",
            Method::Resample => "resample",
            Method::RandomPrune => "random_prune",
            Method::GradPrune => "grad_prune",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                format!("expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    /// Rollouts per prompt (m).
    pub group_size: usize,
    /// Success-rate threshold below which a prompt is purified.
    pub tau: f64,
    /// Deletion ratio; k = ceil(gamma * |x|).
    pub gamma: f64,
    pub clip_eps: f64,
    /// KL coefficient.
    pub beta: f64,
    /// Floor on the weighted reward std; below it all advantages are zero.
    pub sigma_eps: f64,
    /// Maximum response length L.
    pub max_response_len: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    /// Replace the success-rate weights by 1 everywhere.
    pub uniform_weights: bool,
    /// Use the normalized weights (instead of the raw ones) as the
    /// per-rollout multiplier of the surrogate term.
    pub normalized_surrogate_weights: bool,
    /// Key/value pairs per prompt (P).
    pub pairs: usize,
    /// Distractor injection rate.
    pub distractor_rate: f64,
    pub num_keys: u32,
    pub num_values: u32,
    pub num_distractors: u32,
    pub embed_dim: usize,
    pub window: usize,
    pub init_scale: f64,
    /// Write a checkpoint every this many steps (0: only at exit).
    pub checkpoint_every: u64,
    pub parallel: bool,
    /// Fill the `wall_ms` metrics column with measured time. Off by default
    /// so metrics files are byte-reproducible.
    pub record_wall_time: bool,
    pub threshold_target: f64,
    pub threshold_window: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            method: Method::Lens,
            group_size: 8,
            tau: 0.5,
            gamma: 0.03,
            clip_eps: 0.2,
            beta: 0.001,
            sigma_eps: 1e-8,
            max_response_len: 4,
            temperature: 1.0,
            batch_size: 64,
            steps: 300,
            learning_rate: 0.02,
            uniform_weights: false,
            normalized_surrogate_weights: false,
            pairs: 3,
            distractor_rate: 0.2,
            num_keys: 8,
            num_values: 8,
            num_distractors: 8,
            embed_dim: 16,
            window: 8,
            init_scale: 0.1,
            checkpoint_every: 0,
            parallel: true,
            record_wall_time: false,
            threshold_target: 0.7,
            threshold_window: 20,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "method",
    "group_size",
    "tau",
    "gamma",
    "clip_eps",
    "beta",
    "sigma_eps",
    "max_response_len",
    "temperature",
    "batch_size",
    "steps",
    "learning_rate",
    "uniform_weights",
    "normalized_surrogate_weights",
    "pairs",
    "distractor_rate",
    "num_keys",
    "num_values",
    "num_distractors",
    "embed_dim",
    "window",
    "init_scale",
    "checkpoint_every",
    "parallel",
    "record_wall_time",
    "threshold_target",
    "threshold_window",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn unquote(value: &str) -> &str {
    let v = value.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

impl ExperimentConfig {
    /// Parse config text on top of the defaults. Does not validate bounds.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_text(&text)
    }

    /// Apply one `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_string(),
        })?;
        self.set(k.trim(), v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = unquote(value);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "method" => self.method = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "clip_eps" => self.clip_eps = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "sigma_eps" => self.sigma_eps = parse(key, v)?,
            "max_response_len" => self.max_response_len = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "uniform_weights" => self.uniform_weights = parse(key, v)?,
            "normalized_surrogate_weights" => self.normalized_surrogate_weights = parse(key, v)?,
            "pairs" => self.pairs = parse(key, v)?,
            "distractor_rate" => self.distractor_rate = parse(key, v)?,
            "num_keys" => self.num_keys = parse(key, v)?,
            "num_values" => self.num_values = parse(key, v)?,
            "num_distractors" => self.num_distractors = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "init_scale" => self.init_scale = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "parallel" => self.parallel = parse(key, v)?,
            "record_wall_time" => self.record_wall_time = parse(key, v)?,
            "threshold_target" => self.threshold_target = parse(key, v)?,
            "threshold_window" => self.threshold_window = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "method" => self.method.to_string(),
            "group_size" => self.group_size.to_string(),
            "tau" => self.tau.to_string(),
            "gamma" => self.gamma.to_string(),
            "clip_eps" => self.clip_eps.to_string(),
            "beta" => self.beta.to_string(),
            "sigma_eps" => self.sigma_eps.to_string(),
            "max_response_len" => self.max_response_len.to_string(),
            "temperature" => self.temperature.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "uniform_weights" => self.uniform_weights.to_string(),
            "normalized_surrogate_weights" => self.normalized_surrogate_weights.to_string(),
            "pairs" => self.pairs.to_string(),
            "distractor_rate" => self.distractor_rate.to_string(),
            "num_keys" => self.num_keys.to_string(),
            "num_values" => self.num_values.to_string(),
            "num_distractors" => self.num_distractors.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "window" => self.window.to_string(),
            "init_scale" => self.init_scale.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "parallel" => self.parallel.to_string(),
            "record_wall_time" => self.record_wall_time.to_string(),
            "threshold_target" => self.threshold_target.to_string(),
            "threshold_window" => self.threshold_window.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Serialize every key in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key));
            out.push('\n');
        }
        out
    }

    /// Every violated bound, or `Ok` when the config is usable.
    pub fn validate(&self) -> Result<(), Vec<ConfigViolation>> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, field: &'static str, value: String, message: &str| {
            if !ok {
                errs.push(ConfigViolation {
                    field,
                    value,
                    message: message.to_string(),
                });
            }
        };
        check(
            (0.0..=1.0).contains(&self.tau),
            "tau",
            self.tau.to_string(),
            "tau must be in [0,1]",
        );
        check(
            self.gamma > 0.0 && self.gamma < 1.0,
            "gamma",
            self.gamma.to_string(),
            "gamma must be in (0,1)",
        );
        check(
            self.group_size >= 2,
            "group_size",
            self.group_size.to_string(),
            "m >= 2 required",
        );
        check(
            self.clip_eps > 0.0 && self.clip_eps.is_finite(),
            "clip_eps",
            self.clip_eps.to_string(),
            "clip_eps must be > 0",
        );
        check(
            self.beta >= 0.0 && self.beta.is_finite(),
            "beta",
            self.beta.to_string(),
            "beta must be >= 0",
        );
        check(
            self.sigma_eps > 0.0 && self.sigma_eps.is_finite(),
            "sigma_eps",
            self.sigma_eps.to_string(),
            "sigma_eps must be > 0",
        );
        check(
            self.max_response_len >= 1,
            "max_response_len",
            self.max_response_len.to_string(),
            "max_response_len must be >= 1",
        );
        check(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature",
            self.temperature.to_string(),
            "temperature must be > 0",
        );
        check(
            self.batch_size >= 1,
            "batch_size",
            self.batch_size.to_string(),
            "batch_size must be >= 1",
        );
        check(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            self.learning_rate.to_string(),
            "learning_rate must be >= 0",
        );
        check(
            self.pairs >= 1,
            "pairs",
            self.pairs.to_string(),
            "pairs must be >= 1",
        );
        check(
            (0.0..=1.0).contains(&self.distractor_rate),
            "distractor_rate",
            self.distractor_rate.to_string(),
            "distractor_rate must be in [0,1]",
        );
        check(
            self.num_keys as usize >= self.pairs,
            "num_keys",
            self.num_keys.to_string(),
            "num_keys must be >= pairs",
        );
        check(
            self.num_keys >= 1 && self.num_values >= 1 && self.num_distractors >= 1,
            "num_keys/num_values/num_distractors",
            format!("{}/{}/{}", self.num_keys, self.num_values, self.num_distractors),
            "every vocabulary region needs at least one id",
        );
        let vocab = 4u64 + self.num_keys as u64 + self.num_values as u64 + self.num_distractors as u64;
        check(vocab >= 8, "vocab_size", vocab.to_string(), "vocabulary size must be >= 8");
        check(
            self.embed_dim >= 1,
            "embed_dim",
            self.embed_dim.to_string(),
            "embed_dim must be >= 1",
        );
        check(
            self.window >= 1,
            "window",
            self.window.to_string(),
            "window must be >= 1",
        );
        check(
            self.init_scale >= 0.0 && self.init_scale.is_finite(),
            "init_scale",
            self.init_scale.to_string(),
            "init_scale must be >= 0",
        );
        check(
            (0.0..=1.0).contains(&self.threshold_target),
            "threshold_target",
            self.threshold_target.to_string(),
            "threshold_target must be in [0,1]",
        );
        check(
            self.threshold_window >= 1,
            "threshold_window",
            self.threshold_window.to_string(),
            "threshold_window must be >= 1",
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn validated(self) -> Result<Self, ConfigError> {
        self.validate().map_err(ConfigError::Invalid)?;
        Ok(self)
    }

    /// Vocabulary layout. Panics on an unvalidated config with empty regions.
    pub fn vocab(&self) -> VocabLayout {
        VocabLayout::new(self.num_keys, self.num_values, self.num_distractors)
            .expect("vocabulary layout of a validated config")
    }

    pub fn task(&self) -> TaskConfig {
        TaskConfig {
            pairs: self.pairs,
            distractor_rate: self.distractor_rate,
            vocab: self.vocab(),
        }
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            vocab_size: self.vocab().vocab_size(),
            embed_dim: self.embed_dim,
            window: self.window,
            temperature: self.temperature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_config_validates() {
        let cfg = ExperimentConfig {
            gamma: 0.03,
            tau: 0.5,
            group_size: 8,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn gamma_zero_is_named() {
        let cfg = ExperimentConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let errs = cfg.validate().unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "gamma");
        assert!(errs[0].message.contains("gamma must be in (0,1)"));
        assert_eq!(errs[0].value, "0");
    }

    #[test]
    fn single_rollout_group_rejected() {
        let cfg = ExperimentConfig {
            group_size: 1,
            ..Default::default()
        };
        let errs = cfg.validate().unwrap_err();
        assert_eq!(errs[0].field, "group_size");
        assert!(errs[0].message.contains("m >= 2"));
    }

    #[test]
    fn reports_every_violation() {
        let cfg = ExperimentConfig {
            gamma: 1.5,
            group_size: 0,
            beta: -1.0,
            tau: 2.0,
            ..Default::default()
        };
        let fields: Vec<_> = cfg.validate().unwrap_err().iter().map(|v| v.field).collect();
        assert_eq!(fields, ["tau", "gamma", "group_size", "beta"]);
    }

    #[test]
    fn parses_file_text() {
        let text = "# lab config\nmethod = grpo\n tau=0.25 # inline\n\nuniform_weights = true\nseed = 3\n";
        let cfg = ExperimentConfig::parse_text(text).unwrap();
        assert_eq!(cfg.method, Method::Grpo);
        assert_eq!(cfg.tau, 0.25);
        assert!(cfg.uniform_weights);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_key_is_error() {
        let err = ExperimentConfig::parse_text("learning_rat = 0.1").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "learning_rat"));
    }

    #[test]
    fn syntax_errors_carry_line() {
        let err = ExperimentConfig::parse_text("seed = 1\nnonsense\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
        assert!(ExperimentConfig::parse_text("method = ppo").is_err());
        assert!(ExperimentConfig::parse_text("m = 8").is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = ExperimentConfig::parse_text("tau = 0.25").unwrap();
        cfg.apply_override("tau=0.125").unwrap();
        cfg.apply_override("method=\"grpo\"").unwrap();
        assert_eq!(cfg.tau, 0.125);
        assert_eq!(cfg.method, Method::Grpo);
    }

    #[test]
    fn text_roundtrip() {
        let cfg = ExperimentConfig {
            gamma: 0.1 + 0.2,
            method: Method::GradPrune,
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    fn direct_predicate(c: &ExperimentConfig) -> bool {
        let vocab = 4 + c.num_keys as u64 + c.num_values as u64 + c.num_distractors as u64;
        c.tau >= 0.0
            && c.tau <= 1.0
            && c.gamma > 0.0
            && c.gamma < 1.0
            && c.group_size >= 2
            && c.clip_eps > 0.0
            && c.beta >= 0.0
            && c.sigma_eps > 0.0
            && c.max_response_len >= 1
            && c.temperature > 0.0
            && c.batch_size >= 1
            && c.learning_rate >= 0.0
            && c.pairs >= 1
            && c.distractor_rate >= 0.0
            && c.distractor_rate <= 1.0
            && c.num_keys as usize >= c.pairs
            && c.num_values >= 1
            && c.num_distractors >= 1
            && vocab >= 8
            && c.embed_dim >= 1
            && c.window >= 1
            && c.init_scale >= 0.0
            && c.threshold_target >= 0.0
            && c.threshold_target <= 1.0
            && c.threshold_window >= 1
    }

    proptest! {
        #[test]
        fn validation_matches_direct_predicate(
            tau in -0.5f64..1.5,
            gamma in -0.5f64..1.5,
            group_size in 0usize..5,
            clip_eps in -0.2f64..0.5,
            beta in -0.01f64..0.01,
            sigma_eps in -1e-8f64..1e-8,
            max_len in 0usize..3,
            temperature in -1.0f64..2.0,
            pairs in 0usize..6,
            rate in -0.2f64..1.2,
            keys in 0u32..6,
            values in 0u32..3,
            distractors in 0u32..3,
            window in 0usize..3,
        ) {
            let cfg = ExperimentConfig {
                tau, gamma, group_size, clip_eps, beta, sigma_eps,
                max_response_len: max_len, temperature, pairs,
                distractor_rate: rate, num_keys: keys, num_values: values,
                num_distractors: distractors, window,
                ..Default::default()
            };
            prop_assert_eq!(cfg.validate().is_ok(), direct_predicate(&cfg));
        }
    }
}
