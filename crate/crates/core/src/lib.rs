//! grpo-lab: a desk-scale laboratory for group-relative policy optimization.
//!
//! The lab trains a small analytic softmax policy on synthetic verifiable
//! multiple-choice questions with the full GRPO machinery: group-relative
//! advantages, a token-level normalized clipped surrogate with an asymmetric
//! (clip-higher) trust region, truncation masking, and a composite reward
//! system (accuracy, format, cosine length scaling, repetition penalty, soft
//! overlong punishment). A separate module verifies the LoRA / rsLoRA / DoRA
//! adapter algebra on dense matrices, gradients included.
//!
//! Every gradient in the crate is analytic and checked against central
//! finite differences; every run is deterministic given its config and seed.

pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grpo;
pub mod metrics;
pub mod peft;
pub mod policy;
pub mod rewards;
pub mod tasks;
pub mod textio;

pub use config::{preset, ExperimentConfig, PolicySettings, TrainingSettings, PRESET_NAMES};
pub use error::{Error, Result};
pub use experiment::{run, RunArtifacts, THREADS_ENV_VAR};
pub use grpo::{
    adam_update, batch_loss_and_grad, compute_advantages, evaluate, token_surrogate, train_step,
    AdamState, BatchResult, Group, GrpoConfig, SurrogateMode,
};
pub use metrics::StepMetrics;
pub use peft::{
    adapter_grad, effective_weight, rank_stability_probe, scaling_factor, AdapterConfig,
    AdapterGrads, AdapterState, AdapterVariant, ProbeRow,
};
pub use policy::{
    logits, logprob, logprob_grad, sample_completion, Completion, DecodingConfig, PolicyParams,
};
pub use rewards::{
    accuracy_reward, compose, cosine_length_reward, format_reward, repetition_penalty,
    soft_overlong_penalty, RewardBreakdown, RewardConfig,
};
pub use tasks::{generate_dataset, grade, load_dataset, save_dataset, McqInstance, TaskConfig};
pub use textio::{extract_ngrams, parse_completion, split_words, NgramCounts, ParsedCompletion, Vocab};
