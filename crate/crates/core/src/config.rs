//! Experiment configuration: a TOML file with one section per subsystem,
//! plus named built-in presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::policy::DecodingConfig;
use crate::rewards::RewardConfig;
use crate::tasks::TaskConfig;

/// Seed offset separating the held-out evaluation split from training data.
const EVAL_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
/// Seed offset for drawing the initial policy parameters.
const POLICY_INIT_OFFSET: u64 = 0x517c_c1b7_2722_0a95;

/// Policy architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySettings {
    /// Initialization scale for uniform parameter draws.
    pub init_scale: f64,
    /// Context window length.
    pub window: usize,
    /// Logit bonus on the output-grammar template transitions at init,
    /// standing in for a format-capable supervised starting point. 0
    /// disables priming.
    #[serde(default)]
    pub format_prime: f64,
    /// Logit offset on closing an open think block; negative values make
    /// initial think blocks ramble.
    #[serde(default)]
    pub think_exit_prime: f64,
    /// Logit bonus on digit chains inside the think block, making the
    /// initial policy verbose.
    #[serde(default)]
    pub verbosity_prime: f64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            init_scale: 0.02,
            window: 16,
            format_prime: 0.0,
            think_exit_prime: 0.0,
            verbosity_prime: 0.0,
        }
    }
}

/// Step budget and bookkeeping cadences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    /// Number of training steps; 0 records only the initial evaluation.
    pub steps: u64,
    /// Evaluate every this many steps (the final step always evaluates).
    pub eval_every: u64,
    /// Size of the held-out evaluation split.
    pub eval_count: usize,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self { steps: 2000, eval_every: 100, eval_count: 256, checkpoint_every: 0 }
    }
}

/// Everything one reproducible run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub policy: PolicySettings,
    pub decoding: DecodingConfig,
    pub rewards: RewardConfig,
    pub grpo: GrpoConfig,
    pub training: TrainingSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            output_dir: PathBuf::from("runs"),
            task: TaskConfig::default(),
            policy: PolicySettings::default(),
            decoding: DecodingConfig::default(),
            rewards: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            training: TrainingSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Parses and validates a TOML config string.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() {
            return Err(Error::InvalidConfig("run_name must be non-empty".into()));
        }
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("policy.init_scale must be finite and >= 0".into()));
        }
        if self.policy.window < 1 {
            return Err(Error::InvalidConfig("policy.window must be at least 1".into()));
        }
        if !(self.policy.format_prime >= 0.0 && self.policy.format_prime.is_finite()) {
            return Err(Error::InvalidConfig(
                "policy.format_prime must be finite and >= 0".into(),
            ));
        }
        if !self.policy.think_exit_prime.is_finite() {
            return Err(Error::InvalidConfig("policy.think_exit_prime must be finite".into()));
        }
        if !self.policy.verbosity_prime.is_finite() {
            return Err(Error::InvalidConfig("policy.verbosity_prime must be finite".into()));
        }
        if self.training.eval_every < 1 {
            return Err(Error::InvalidConfig("training.eval_every must be at least 1".into()));
        }
        if self.training.eval_count < 1 {
            return Err(Error::InvalidConfig("training.eval_count must be at least 1".into()));
        }
        self.task.validate()?;
        self.decoding.validate()?;
        self.rewards.validate()?;
        self.grpo.validate()?;
        Ok(())
    }

    /// Applies a command-line seed override to both data generation and the
    /// training loop.
    pub fn override_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.grpo.seed = seed;
    }

    /// Task config of the held-out evaluation split.
    pub fn eval_task(&self) -> TaskConfig {
        TaskConfig {
            seed: self.task.seed ^ EVAL_SEED_OFFSET,
            count: self.training.eval_count,
            ..self.task.clone()
        }
    }

    /// Seed for the initial policy draw.
    pub fn policy_init_seed(&self) -> u64 {
        self.grpo.seed ^ POLICY_INIT_OFFSET
    }
}

/// Names of the built-in presets.
pub const PRESET_NAMES: [&str; 4] = ["quickstart", "appendix-a", "overlong-demo", "cosine-demo"];

/// Returns a built-in preset configuration by name.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "quickstart" => Ok(quickstart()),
        "appendix-a" => Ok(appendix_a()),
        "overlong-demo" => Ok(overlong_demo()),
        "cosine-demo" => Ok(cosine_demo()),
        other => Err(Error::InvalidConfig(format!(
            "unknown preset {other:?}; available: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

/// Desk-scale training run that reaches high held-out accuracy in about a
/// minute: full-support sampling, accuracy + format + repetition rewards.
pub fn quickstart() -> ExperimentConfig {
    ExperimentConfig {
        run_name: "quickstart".into(),
        output_dir: PathBuf::from("runs/quickstart"),
        task: TaskConfig { operand_min: 0, operand_max: 7, num_options: 4, seed: 17, count: 512 },
        policy: PolicySettings {
            init_scale: 0.02,
            window: 16,
            format_prime: 4.0,
            think_exit_prime: 4.0,
            verbosity_prime: 0.0,
        },
        decoding: DecodingConfig {
            temperature: 1.3,
            top_k: 28,
            top_p: 1.0,
            max_new_tokens: 24,
            greedy: false,
        },
        rewards: RewardConfig::default(),
        grpo: GrpoConfig { seed: 17, ..GrpoConfig::default() },
        training: TrainingSettings {
            steps: 2000,
            eval_every: 100,
            eval_count: 256,
            checkpoint_every: 0,
        },
    }
}

/// The reference decoding and optimization values: temperature 0.6,
/// top-k 20, top-p 0.95, four generations per prompt, asymmetric clipping
/// at 0.28, no KL term, learning rate 1e-6.
pub fn appendix_a() -> ExperimentConfig {
    let mut config = quickstart();
    config.run_name = "appendix-a".into();
    config.output_dir = PathBuf::from("runs/appendix-a");
    config.decoding =
        DecodingConfig { temperature: 0.6, top_k: 20, top_p: 0.95, max_new_tokens: 24, greedy: false };
    config.grpo = GrpoConfig {
        group_size: 4,
        eps_low: 0.2,
        eps_high: 0.28,
        kl_beta: 0.0,
        learning_rate: 1e-6,
        seed: 17,
        ..GrpoConfig::default()
    };
    config
}

/// Soft overlong punishment demo: a short-window policy whose mean
/// completion length collapses from its early peak and then partially
/// recovers as format rewards take hold.
pub fn overlong_demo() -> ExperimentConfig {
    ExperimentConfig {
        run_name: "overlong-demo".into(),
        output_dir: PathBuf::from("runs/overlong-demo"),
        task: TaskConfig { operand_min: 0, operand_max: 7, num_options: 4, seed: 29, count: 256 },
        policy: PolicySettings {
            init_scale: 0.02,
            window: 4,
            format_prime: 4.0,
            think_exit_prime: 0.0,
            verbosity_prime: 4.0,
        },
        decoding: DecodingConfig {
            temperature: 1.0,
            top_k: 28,
            top_p: 1.0,
            max_new_tokens: 48,
            greedy: false,
        },
        rewards: RewardConfig {
            overlong_enabled: true,
            repetition_enabled: false,
            max_length: 48,
            overlong_threshold: 24,
            ..RewardConfig::default()
        },
        grpo: GrpoConfig { seed: 29, ..GrpoConfig::default() },
        training: TrainingSettings {
            steps: 800,
            eval_every: 200,
            eval_count: 128,
            checkpoint_every: 0,
        },
    }
}

/// Cosine length-scaling demo: while answers stay mostly wrong, the
/// wrong-answer branch rewards longer completions, so mean length trends
/// upward over training.
pub fn cosine_demo() -> ExperimentConfig {
    ExperimentConfig {
        run_name: "cosine-demo".into(),
        output_dir: PathBuf::from("runs/cosine-demo"),
        task: TaskConfig { operand_min: 0, operand_max: 7, num_options: 4, seed: 31, count: 256 },
        policy: PolicySettings {
            init_scale: 0.02,
            window: 4,
            format_prime: 4.0,
            think_exit_prime: 4.0,
            verbosity_prime: 0.0,
        },
        decoding: DecodingConfig {
            temperature: 1.0,
            top_k: 28,
            top_p: 1.0,
            max_new_tokens: 64,
            greedy: false,
        },
        rewards: RewardConfig {
            cosine_enabled: true,
            cosine_weight: 1.0,
            repetition_enabled: false,
            max_length: 64,
            overlong_threshold: 32,
            ..RewardConfig::default()
        },
        grpo: GrpoConfig { seed: 31, ..GrpoConfig::default() },
        training: TrainingSettings {
            steps: 200,
            eval_every: 100,
            eval_count: 128,
            checkpoint_every: 0,
        },
    }
}
