//! The optimization core: group-relative advantages, the token-level
//! normalized clipped surrogate with an asymmetric (clip-higher) trust
//! region, optional KL regularization against the frozen snapshot,
//! truncation masking, Adam updates, and the per-step training loop.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::StepMetrics;
use crate::policy::{
    self, Completion, DecodingConfig, PolicyParams,
};
use crate::rewards::{compose, RewardBreakdown, RewardConfig};
use crate::tasks::{grade, McqInstance};
use crate::textio::{parse_completion, Vocab};

/// Shape of the clipped surrogate objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateMode {
    /// Pessimistic `min(ratio * A, clip(ratio) * A)`; the default.
    MinForm,
    /// Literal clipped term only, `clip(ratio) * A`.
    ClipOnly,
}

/// Hyperparameters of the optimization loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Completions per prompt, K.
    pub group_size: usize,
    /// Lower clip offset; ratios below `1 - eps_low` are clipped.
    pub eps_low: f64,
    /// Upper clip offset; ratios above `1 + eps_high` are clipped. Setting
    /// it above `eps_low` widens the upward trust region.
    pub eps_high: f64,
    /// Weight of the KL term against the frozen snapshot; 0 disables it.
    pub kl_beta: f64,
    /// Optimization passes over each rollout batch.
    pub inner_epochs: usize,
    pub prompts_per_step: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Exclude truncated completions from the loss, numerator and
    /// denominator both.
    pub mask_truncated: bool,
    pub surrogate_mode: SurrogateMode,
    /// Below this reward standard deviation a group counts as degenerate
    /// and gets all-zero advantages.
    pub degenerate_std_epsilon: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            eps_low: 0.2,
            eps_high: 0.28,
            kl_beta: 0.0,
            inner_epochs: 2,
            prompts_per_step: 8,
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            mask_truncated: true,
            surrogate_mode: SurrogateMode::MinForm,
            degenerate_std_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidConfig("grpo.group_size must be at least 2".into()));
        }
        if !(self.eps_low > 0.0) {
            return Err(Error::InvalidConfig("grpo.eps_low must be positive".into()));
        }
        if self.eps_high < self.eps_low {
            return Err(Error::InvalidConfig("grpo.eps_high must be >= grpo.eps_low".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::InvalidConfig("grpo.kl_beta must be non-negative".into()));
        }
        if self.inner_epochs < 1 {
            return Err(Error::InvalidConfig("grpo.inner_epochs must be at least 1".into()));
        }
        if self.prompts_per_step < 1 {
            return Err(Error::InvalidConfig("grpo.prompts_per_step must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("grpo.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidConfig("grpo adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::InvalidConfig("grpo.adam_epsilon must be positive".into()));
        }
        if !(self.degenerate_std_epsilon > 0.0) {
            return Err(Error::InvalidConfig(
                "grpo.degenerate_std_epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One prompt with its sampled completions, rewards, and advantages. Every
/// token of completion `i` carries the same advantage `advantages[i]`.
#[derive(Debug, Clone)]
pub struct Group {
    pub instance: McqInstance,
    pub completions: Vec<Completion>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

/// Group-relative advantages: each reward z-scored by the group's
/// population mean and standard deviation. Degenerate groups (std below
/// `degenerate_std_epsilon`) get all-zero advantages.
pub fn compute_advantages(rewards: &[f64], degenerate_std_epsilon: f64) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::InvalidGroup(format!("group size {k} is below the minimum of 2")));
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64;
    let std = variance.sqrt();
    if std < degenerate_std_epsilon {
        return Ok(vec![0.0; k]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token surrogate value. The loss contribution is the negation.
pub fn token_surrogate(
    ratio: f64,
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
    mode: SurrogateMode,
) -> f64 {
    surrogate_parts(ratio, advantage, eps_low, eps_high, mode).0
}

/// Value, gradient coefficient, and clip activity of one token's surrogate.
///
/// The coefficient is `d(value)/d(log pi_theta)`, i.e. `advantage * ratio`
/// on the unclipped branch and 0 where the selected branch is flat.
fn surrogate_parts(
    ratio: f64,
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
    mode: SurrogateMode,
) -> (f64, f64, bool) {
    let clipped_ratio = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    let unclipped = ratio * advantage;
    let clipped = clipped_ratio * advantage;
    match mode {
        SurrogateMode::MinForm => {
            if unclipped <= clipped {
                (unclipped, advantage * ratio, false)
            } else {
                // The clipped branch is selected and flat in theta.
                (clipped, 0.0, true)
            }
        }
        SurrogateMode::ClipOnly => {
            if ratio < 1.0 - eps_low || ratio > 1.0 + eps_high {
                (clipped, 0.0, true)
            } else {
                (clipped, advantage * ratio, false)
            }
        }
    }
}

/// Output of one loss/gradient evaluation over a rollout batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub grad: Array2<f64>,
    /// Fraction of contributing tokens whose clip branch was active.
    pub clip_fraction: f64,
    /// Tokens entering the normalization (masked completions excluded).
    pub active_tokens: usize,
}

/// Token-level normalized clipped surrogate loss and its analytic gradient.
///
/// `loss = -(1 / sum_i |o_i|) * sum_i sum_t surrogate(ratio_it, A_i)`, with
/// the ratio taken between temperature-1 log-probabilities of the current
/// policy and the frozen snapshot. When `mask_truncated` is set, tokens of
/// truncated completions leave both the numerator and the denominator. With
/// `kl_beta > 0` a per-token KL estimate against the snapshot is added under
/// the same normalization. An all-masked batch yields loss 0 and gradient 0.
pub fn batch_loss_and_grad(
    policy: &PolicyParams,
    old_policy: &PolicyParams,
    groups: &[Group],
    config: &GrpoConfig,
) -> Result<BatchResult> {
    if policy.theta().raw_dim() != old_policy.theta().raw_dim() {
        return Err(Error::ShapeMismatch(format!(
            "policy {:?} vs snapshot {:?}",
            policy.theta().raw_dim(),
            old_policy.theta().raw_dim()
        )));
    }
    for (g, group) in groups.iter().enumerate() {
        if group.completions.len() != group.advantages.len() {
            return Err(Error::ShapeMismatch(format!(
                "group {g}: {} completions vs {} advantages",
                group.completions.len(),
                group.advantages.len()
            )));
        }
        for completion in &group.completions {
            if completion.tokens.len() != completion.old_logprobs.len() {
                return Err(Error::ShapeMismatch(format!(
                    "group {g}: completion with {} tokens but {} sampling log-probs",
                    completion.tokens.len(),
                    completion.old_logprobs.len()
                )));
            }
        }
    }

    let masked = |completion: &Completion| config.mask_truncated && completion.truncated;
    let active_tokens: usize = groups
        .iter()
        .flat_map(|g| g.completions.iter())
        .filter(|c| !masked(c))
        .map(|c| c.tokens.len())
        .sum();
    let mut grad = Array2::zeros(policy.theta().raw_dim());
    if active_tokens == 0 {
        return Ok(BatchResult { loss: 0.0, grad, clip_fraction: 0.0, active_tokens: 0 });
    }

    let normalizer = active_tokens as f64;
    let mut surrogate_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped_tokens = 0usize;

    for group in groups {
        let prompt = &group.instance.prompt_tokens;
        for (completion, &advantage) in group.completions.iter().zip(&group.advantages) {
            if masked(completion) {
                continue;
            }
            for (t, &token) in completion.tokens.iter().enumerate() {
                let context = policy::context_before(
                    prompt,
                    &completion.tokens,
                    t,
                    policy.window(),
                    policy.pad_id(),
                );
                let new_logits = policy::logits(policy, &context);
                let new_logprobs = policy::log_softmax_slice(&new_logits);
                let old_logits = policy::logits(old_policy, &context);
                let old_logprobs = policy::log_softmax_slice(&old_logits);

                let new_lp = new_logprobs[token];
                let old_lp = old_logprobs[token];
                let ratio = (new_lp - old_lp).exp();
                let (value, coeff, clip_active) = surrogate_parts(
                    ratio,
                    advantage,
                    config.eps_low,
                    config.eps_high,
                    config.surrogate_mode,
                );
                surrogate_sum += value;
                if clip_active {
                    clipped_tokens += 1;
                }

                let mut score_coeff = -coeff / normalizer;
                if config.kl_beta > 0.0 {
                    // k3 estimator of KL(pi_theta || snapshot):
                    // exp(delta) - delta - 1 with delta = old_lp - new_lp.
                    let delta = old_lp - new_lp;
                    kl_sum += delta.exp() - delta - 1.0;
                    score_coeff += config.kl_beta * (1.0 - delta.exp()) / normalizer;
                }
                if score_coeff != 0.0 {
                    let probs: Vec<f64> = new_logprobs.iter().map(|lp| lp.exp()).collect();
                    policy::accumulate_score_with_probs(
                        policy,
                        &context,
                        &probs,
                        token,
                        score_coeff,
                        &mut grad,
                    );
                }
            }
        }
    }

    let loss = -surrogate_sum / normalizer + config.kl_beta * kl_sum / normalizer;
    Ok(BatchResult {
        loss,
        grad,
        clip_fraction: clipped_tokens as f64 / active_tokens as f64,
        active_tokens,
    })
}

/// First/second moment accumulators for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Array2<f64>,
    second: Array2<f64>,
    step: u64,
}

impl AdamState {
    pub fn for_params(params: &PolicyParams) -> Self {
        Self {
            first: Array2::zeros(params.theta().raw_dim()),
            second: Array2::zeros(params.theta().raw_dim()),
            step: 0,
        }
    }
}

/// Standard bias-corrected Adam update in place.
pub fn adam_update(
    params: &mut PolicyParams,
    grad: &Array2<f64>,
    state: &mut AdamState,
    config: &GrpoConfig,
) -> Result<()> {
    if params.theta().raw_dim() != grad.raw_dim() {
        return Err(Error::ShapeMismatch(format!(
            "params {:?} vs gradient {:?}",
            params.theta().raw_dim(),
            grad.raw_dim()
        )));
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let correction1 = 1.0 - b1.powi(state.step as i32);
    let correction2 = 1.0 - b2.powi(state.step as i32);
    let theta = params.theta_mut();
    for ((value, g), (m, v)) in theta
        .iter_mut()
        .zip(grad.iter())
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *value -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
    }
    Ok(())
}

/// Samples one group for an instance under the frozen snapshot.
fn rollout_group(
    old_policy: &PolicyParams,
    instance: &McqInstance,
    vocab: &Vocab,
    reward_config: &RewardConfig,
    grpo_config: &GrpoConfig,
    decoding: &DecodingConfig,
    seed: u64,
) -> Result<Group> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut completions = Vec::with_capacity(grpo_config.group_size);
    let mut breakdowns = Vec::with_capacity(grpo_config.group_size);
    for _ in 0..grpo_config.group_size {
        let completion =
            policy::sample_completion(old_policy, &instance.prompt_tokens, decoding, vocab, &mut rng);
        let parsed = parse_completion(&completion.text);
        breakdowns.push(compose(instance, &completion, &parsed, reward_config));
        completions.push(completion);
    }
    let rewards: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
    let advantages = compute_advantages(&rewards, grpo_config.degenerate_std_epsilon)?;
    Ok(Group { instance: instance.clone(), completions, breakdowns, advantages })
}

/// One full GRPO step: snapshot the policy, roll out `prompts_per_step`
/// groups under the snapshot, score and normalize them, then run
/// `inner_epochs` of loss/gradient evaluation and Adam updates.
///
/// Rollouts for distinct prompts run in parallel on independent RNG
/// streams; the result is deterministic in (`config.seed`, `step`)
/// regardless of thread count.
pub fn train_step(
    policy: &mut PolicyParams,
    adam: &mut AdamState,
    dataset: &[McqInstance],
    vocab: &Vocab,
    reward_config: &RewardConfig,
    grpo_config: &GrpoConfig,
    decoding: &DecodingConfig,
    step: u64,
) -> Result<StepMetrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("train_step needs a non-empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(grpo_config.seed);
    rng.set_stream(step.wrapping_add(1));

    let prompt_count = grpo_config.prompts_per_step;
    let indices: Vec<usize> = if dataset.len() >= prompt_count {
        sample_indices(&mut rng, dataset.len(), prompt_count).into_vec()
    } else {
        (0..prompt_count).map(|_| rng.gen_range(0..dataset.len())).collect()
    };
    let rollout_seeds: Vec<u64> = (0..prompt_count).map(|_| rng.gen()).collect();

    let old_policy = policy.snapshot();
    let groups: Vec<Group> = indices
        .par_iter()
        .zip(rollout_seeds.par_iter())
        .map(|(&index, &seed)| {
            rollout_group(
                &old_policy,
                &dataset[index],
                vocab,
                reward_config,
                grpo_config,
                decoding,
                seed,
            )
        })
        .collect::<Result<_>>()?;

    let mut last = BatchResult {
        loss: 0.0,
        grad: Array2::zeros(policy.theta().raw_dim()),
        clip_fraction: 0.0,
        active_tokens: 0,
    };
    for _ in 0..grpo_config.inner_epochs {
        last = batch_loss_and_grad(policy, &old_policy, &groups, grpo_config)?;
        if !last.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: last.loss });
        }
        adam_update(policy, &last.grad, adam, grpo_config)?;
    }

    Ok(summarize_step(step, &groups, &last))
}

fn summarize_step(step: u64, groups: &[Group], result: &BatchResult) -> StepMetrics {
    let completions: Vec<&Completion> =
        groups.iter().flat_map(|g| g.completions.iter()).collect();
    let n = completions.len() as f64;
    let mean = |select: fn(&RewardBreakdown) -> f64| {
        groups.iter().flat_map(|g| g.breakdowns.iter()).map(select).sum::<f64>() / n
    };
    let lengths: Vec<usize> = completions.iter().map(|c| c.tokens.len()).collect();
    let truncated = completions.iter().filter(|c| c.truncated).count();
    let grad_norm = result.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    StepMetrics {
        step,
        reward_accuracy: mean(|b| b.accuracy),
        reward_format: mean(|b| b.format),
        reward_cosine: mean(|b| b.cosine),
        reward_repetition: mean(|b| b.repetition),
        reward_overlong: mean(|b| b.overlong),
        reward_total: mean(|b| b.total),
        mean_length: lengths.iter().sum::<usize>() as f64 / n,
        max_length: lengths.iter().copied().max().unwrap_or(0),
        truncated_fraction: truncated as f64 / n,
        loss: result.loss,
        grad_norm,
        clip_fraction: result.clip_fraction,
        eval_accuracy: None,
    }
}

/// Greedy-decoding accuracy over an evaluation dataset.
pub fn evaluate(
    policy: &PolicyParams,
    vocab: &Vocab,
    eval_set: &[McqInstance],
    decoding: &DecodingConfig,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let greedy = decoding.greedy();
    let correct: usize = eval_set
        .par_iter()
        .map(|instance| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let completion =
                policy::sample_completion(policy, &instance.prompt_tokens, &greedy, vocab, &mut rng);
            let parsed = parse_completion(&completion.text);
            grade(&parsed, instance) as usize
        })
        .sum();
    Ok(correct as f64 / eval_set.len() as f64)
}
