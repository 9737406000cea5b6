//! The composite reward system: accuracy, format adherence, cosine length
//! scaling, n-gram repetition penalty, and soft overlong punishment, each
//! individually weighted and switchable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Completion;
use crate::tasks::{grade, McqInstance};
use crate::textio::{extract_ngrams, split_words, ParsedCompletion};

/// Weights, bounds, and switches for every reward component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub accuracy_enabled: bool,
    pub accuracy_weight: f64,
    pub format_enabled: bool,
    pub format_weight: f64,
    pub cosine_enabled: bool,
    pub cosine_weight: f64,
    pub repetition_enabled: bool,
    pub repetition_weight: f64,
    pub overlong_enabled: bool,
    pub overlong_weight: f64,

    /// Cosine reward for a correct answer at length 0.
    pub cosine_correct_start: f64,
    /// Cosine reward for a correct answer at `max_length`.
    pub cosine_correct_end: f64,
    /// Cosine reward for a wrong answer at length 0.
    pub cosine_wrong_start: f64,
    /// Cosine reward for a wrong answer at `max_length`.
    pub cosine_wrong_end: f64,
    /// Length cap shared by the cosine and overlong components.
    pub max_length: usize,

    /// n-gram size for the repetition ratio.
    pub repetition_ngram: usize,
    /// Largest repetition penalty magnitude.
    pub repetition_max_penalty: f64,
    /// Repetition ratio below which no penalty applies, in [0, 1).
    pub repetition_threshold: f64,

    /// Length at which the overlong penalty starts, strictly below
    /// `max_length`.
    pub overlong_threshold: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            accuracy_enabled: true,
            accuracy_weight: 1.0,
            format_enabled: true,
            format_weight: 0.5,
            cosine_enabled: false,
            cosine_weight: 0.5,
            repetition_enabled: true,
            repetition_weight: 1.0,
            overlong_enabled: false,
            overlong_weight: 1.0,
            cosine_correct_start: 1.0,
            cosine_correct_end: 0.5,
            cosine_wrong_start: -1.0,
            cosine_wrong_end: -0.5,
            max_length: 24,
            repetition_ngram: 3,
            repetition_max_penalty: 1.0,
            repetition_threshold: 0.0,
            overlong_threshold: 12,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cosine_correct_start < self.cosine_correct_end {
            return Err(Error::InvalidConfig(
                "rewards.cosine_correct_start must be >= rewards.cosine_correct_end".into(),
            ));
        }
        if self.cosine_wrong_start > self.cosine_wrong_end || self.cosine_wrong_end > 0.0 {
            return Err(Error::InvalidConfig(
                "rewards cosine wrong bounds must satisfy wrong_start <= wrong_end <= 0".into(),
            ));
        }
        if self.max_length == 0 {
            return Err(Error::InvalidConfig("rewards.max_length must be positive".into()));
        }
        if self.overlong_threshold == 0 || self.overlong_threshold >= self.max_length {
            return Err(Error::InvalidConfig(
                "rewards.overlong_threshold must satisfy 0 < threshold < max_length".into(),
            ));
        }
        if self.repetition_ngram == 0 {
            return Err(Error::InvalidConfig("rewards.repetition_ngram must be at least 1".into()));
        }
        if self.repetition_max_penalty < 0.0 {
            return Err(Error::InvalidConfig(
                "rewards.repetition_max_penalty must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.repetition_threshold) {
            return Err(Error::InvalidConfig(
                "rewards.repetition_threshold must lie in [0, 1)".into(),
            ));
        }
        let weights = [
            self.accuracy_weight,
            self.format_weight,
            self.cosine_weight,
            self.repetition_weight,
            self.overlong_weight,
        ];
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("reward weights must be finite".into()));
        }
        Ok(())
    }
}

/// Per-component values and the weighted total for one completion.
/// Disabled components hold 0 and do not enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub cosine: f64,
    pub repetition: f64,
    pub overlong: f64,
    pub total: f64,
}

/// +1.0 when the parsed answer matches gold, 0 otherwise.
pub fn accuracy_reward(parsed: &ParsedCompletion, instance: &McqInstance) -> f64 {
    if grade(parsed, instance) {
        1.0
    } else {
        0.0
    }
}

/// 1.0 for a fully well-formed completion, 0.5 for a think block without a
/// boxed answer, 0 otherwise. The partial credit gives early training a
/// gradient toward full compliance.
pub fn format_reward(parsed: &ParsedCompletion) -> f64 {
    if parsed.well_formed {
        1.0
    } else if parsed.has_think_block {
        0.5
    } else {
        0.0
    }
}

/// Half-cosine interpolation between the configured endpoints: decreasing in
/// length for correct answers, increasing for wrong ones. Lengths above
/// `max_length` clamp.
pub fn cosine_length_reward(correct: bool, length: usize, config: &RewardConfig) -> f64 {
    let clamped = length.min(config.max_length) as f64;
    let phase = (std::f64::consts::PI * clamped / config.max_length as f64).cos();
    if correct {
        let (start, end) = (config.cosine_correct_start, config.cosine_correct_end);
        end + 0.5 * (start - end) * (1.0 + phase)
    } else {
        let (start, end) = (config.cosine_wrong_start, config.cosine_wrong_end);
        start + 0.5 * (end - start) * (1.0 - phase)
    }
}

/// Penalty `-max_penalty * rho` when the repetition ratio
/// `rho = 1 - unique/total` n-grams exceeds the threshold, else 0. Texts
/// with no n-grams have `rho = 0`.
pub fn repetition_penalty(words: &[&str], config: &RewardConfig) -> f64 {
    let counts = extract_ngrams(words, config.repetition_ngram)
        .expect("repetition_ngram is validated to be >= 1");
    if counts.total == 0 {
        return 0.0;
    }
    let rho = 1.0 - counts.unique as f64 / counts.total as f64;
    if rho > config.repetition_threshold {
        -config.repetition_max_penalty * rho
    } else {
        0.0
    }
}

/// Piecewise-linear length penalty: 0 up to the threshold, falling linearly
/// to -1 at `max_length`, and -1 beyond.
pub fn soft_overlong_penalty(length: usize, config: &RewardConfig) -> f64 {
    let threshold = config.overlong_threshold as f64;
    let cap = config.max_length as f64;
    let length = length as f64;
    if length <= threshold {
        0.0
    } else if length <= cap {
        (threshold - length) / (cap - threshold)
    } else {
        -1.0
    }
}

/// Evaluates every enabled component for one completion and combines them
/// into the weighted total. The cosine component reuses the accuracy
/// correctness flag; repetition runs on whitespace words of the rendered
/// text; cosine and overlong run on the token length.
pub fn compose(
    instance: &McqInstance,
    completion: &Completion,
    parsed: &ParsedCompletion,
    config: &RewardConfig,
) -> RewardBreakdown {
    let correct = grade(parsed, instance);
    let length = completion.tokens.len();

    let accuracy = if config.accuracy_enabled { accuracy_reward(parsed, instance) } else { 0.0 };
    let format = if config.format_enabled { format_reward(parsed) } else { 0.0 };
    let cosine =
        if config.cosine_enabled { cosine_length_reward(correct, length, config) } else { 0.0 };
    let repetition = if config.repetition_enabled {
        repetition_penalty(&split_words(&completion.text), config)
    } else {
        0.0
    };
    let overlong =
        if config.overlong_enabled { soft_overlong_penalty(length, config) } else { 0.0 };

    let mut total = 0.0;
    if config.accuracy_enabled {
        total += config.accuracy_weight * accuracy;
    }
    if config.format_enabled {
        total += config.format_weight * format;
    }
    if config.cosine_enabled {
        total += config.cosine_weight * cosine;
    }
    if config.repetition_enabled {
        total += config.repetition_weight * repetition;
    }
    if config.overlong_enabled {
        total += config.overlong_weight * overlong;
    }

    RewardBreakdown { accuracy, format, cosine, repetition, overlong, total }
}
