//! Central finite-difference verification of every analytic gradient in the
//! crate. The numerical side only ever evaluates forward passes, so it stays
//! independent of the gradient code it checks.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::grpo::{batch_loss_and_grad, compute_advantages, Group, GrpoConfig};
use crate::peft::{
    adapter_grad, column_norms, effective_weight, scaling_factor, AdapterConfig, AdapterState,
    AdapterVariant,
};
use crate::policy::{logprob, logprob_grad, Completion, PolicyParams};
use crate::tasks::{McqInstance, OPTION_LETTERS};
use crate::textio::Vocab;

/// Outcome of one finite-difference suite entry.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// Largest relative error over the checked coordinates.
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Columns of theta actually touched by the given rollout contexts.
fn active_columns(
    params: &PolicyParams,
    prompt: &[usize],
    completion: &[usize],
) -> Vec<usize> {
    let mut columns = vec![params.window() * params.vocab_size()];
    for t in 0..completion.len() {
        let context = crate::policy::context_before(
            prompt,
            completion,
            t,
            params.window(),
            params.pad_id(),
        );
        for (j, &token) in context.iter().enumerate() {
            if token < params.vocab_size() {
                columns.push(j * params.vocab_size() + token);
            }
        }
    }
    columns.sort_unstable();
    columns.dedup();
    columns
}

/// Finite-difference check of the summed completion log-probability
/// gradient on random coordinates among active features.
pub fn policy_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let vocab = Vocab::standard();
    let mut params = PolicyParams::init(vocab.len(), 4, seed, 0.5);
    let prompt = vocab.tokenize("A 3 B 1 2 + 5 = ?")?;
    let completion = vocab.tokenize("<think>9</think>\\boxed{B}")?;

    let analytic = logprob_grad(&params, &prompt, &completion);
    let columns = active_columns(&params, &prompt, &completion);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let coords = 50;
    for _ in 0..coords {
        let row = rng.gen_range(0..params.vocab_size());
        let col = columns[rng.gen_range(0..columns.len())];
        let numeric = {
            let original = params.theta()[[row, col]];
            params.theta_mut()[[row, col]] = original + h;
            let plus: f64 = logprob(&params, &prompt, &completion).iter().sum();
            params.theta_mut()[[row, col]] = original - h;
            let minus: f64 = logprob(&params, &prompt, &completion).iter().sum();
            params.theta_mut()[[row, col]] = original;
            (plus - minus) / (2.0 * h)
        };
        worst = worst.max(relative_error(analytic[[row, col]], numeric));
    }
    Ok(vec![GradCheck {
        name: "policy.logprob_grad".into(),
        worst_rel_err: worst,
        tolerance: 1e-5,
        coordinates: coords,
    }])
}

fn fixture_instance(vocab: &Vocab, prompt: &str) -> Result<McqInstance> {
    Ok(McqInstance {
        id: 0,
        prompt_tokens: vocab.tokenize(prompt)?,
        option_letters: OPTION_LETTERS[..4].to_vec(),
        gold_letter: 'A',
        difficulty_tag: 0,
    })
}

fn fixture_completion(vocab: &Vocab, text: &str, truncated: bool) -> Result<Completion> {
    let tokens = vocab.tokenize(text)?;
    Ok(Completion {
        old_logprobs: vec![-1.0; tokens.len()],
        tokens,
        text: text.to_string(),
        truncated,
    })
}

/// Finite-difference check of the batch loss gradient on a small two-group
/// batch, with and without the KL term. The policy sits close to the
/// snapshot so no ratio is near a clip boundary.
pub fn grpo_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let vocab = Vocab::standard();
    let old_policy = PolicyParams::init(vocab.len(), 4, seed, 0.4);
    let mut policy = old_policy.clone();
    {
        let noise = PolicyParams::init(vocab.len(), 4, seed ^ 0xabcd, 0.02);
        let theta = policy.theta_mut();
        for (value, delta) in theta.iter_mut().zip(noise.theta().iter()) {
            *value += delta;
        }
    }

    let groups = vec![
        Group {
            instance: fixture_instance(&vocab, "A 1 B 2 3 + 4 = ?")?,
            completions: vec![
                fixture_completion(&vocab, "<think></think>\\boxed{A}", false)?,
                fixture_completion(&vocab, "\\boxed{C}", false)?,
            ],
            breakdowns: vec![],
            advantages: compute_advantages(&[1.5, 0.0], 1e-8)?,
        },
        Group {
            instance: fixture_instance(&vocab, "A 5 B 0 2 * 3 = ?")?,
            completions: vec![
                fixture_completion(&vocab, "<think>A B</think>", false)?,
                fixture_completion(&vocab, "7 7", false)?,
            ],
            breakdowns: vec![],
            advantages: compute_advantages(&[0.5, 1.0], 1e-8)?,
        },
    ];

    let mut checks = Vec::new();
    for (name, kl_beta) in [("grpo.batch_loss", 0.0), ("grpo.batch_loss+kl", 0.1)] {
        let config = GrpoConfig { kl_beta, ..GrpoConfig::default() };
        let analytic = batch_loss_and_grad(&policy, &old_policy, &groups, &config)?.grad;

        let mut columns = Vec::new();
        for group in &groups {
            for completion in &group.completions {
                columns.extend(active_columns(
                    &policy,
                    &group.instance.prompt_tokens,
                    &completion.tokens,
                ));
            }
        }
        columns.sort_unstable();
        columns.dedup();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let h = 1e-5;
        let mut worst = 0.0f64;
        let coords = 50;
        for _ in 0..coords {
            let row = rng.gen_range(0..policy.vocab_size());
            let col = columns[rng.gen_range(0..columns.len())];
            let original = policy.theta()[[row, col]];
            policy.theta_mut()[[row, col]] = original + h;
            let plus = batch_loss_and_grad(&policy, &old_policy, &groups, &config)?.loss;
            policy.theta_mut()[[row, col]] = original - h;
            let minus = batch_loss_and_grad(&policy, &old_policy, &groups, &config)?.loss;
            policy.theta_mut()[[row, col]] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[[row, col]], numeric));
        }
        checks.push(GradCheck {
            name: name.into(),
            worst_rel_err: worst,
            tolerance: 1e-5,
            coordinates: coords,
        });
    }
    Ok(checks)
}

/// Finite-difference check of every adapter gradient (A, B, and the DoRA
/// magnitude) over all entries of a 10x8 rank-3 case.
pub fn peft_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    };
    let (n, k, rank) = (10usize, 8usize, 3usize);
    let base = draw(n, k);
    let down = draw(rank, k);
    let up = draw(n, rank);
    let upstream = draw(n, k);
    let h = 1e-6;

    let mut checks = Vec::new();
    for variant in [AdapterVariant::Lora, AdapterVariant::RsLora, AdapterVariant::Dora] {
        let config = AdapterConfig::new(rank, 2.0, variant)?;
        let magnitude = match variant {
            AdapterVariant::Dora => {
                let composed = &base + &(up.dot(&down) * scaling_factor(&config));
                Some(column_norms(&composed) + 0.25)
            }
            _ => None,
        };
        let mut state =
            AdapterState::new(base.clone(), down.clone(), up.clone(), magnitude)?;
        let analytic = adapter_grad(&state, &config, &upstream)?;
        let objective = |state: &AdapterState| -> Result<f64> {
            let weight = effective_weight(state, &config)?;
            Ok(weight.iter().zip(upstream.iter()).map(|(w, g)| w * g).sum())
        };

        let mut worst = 0.0f64;
        let mut coordinates = 0usize;
        {
            let (r_dim, k_dim) = state.down.dim();
            for row in 0..r_dim {
                for col in 0..k_dim {
                    let original = state.down[[row, col]];
                    state.down[[row, col]] = original + h;
                    let plus = objective(&state)?;
                    state.down[[row, col]] = original - h;
                    let minus = objective(&state)?;
                    state.down[[row, col]] = original;
                    let numeric = (plus - minus) / (2.0 * h);
                    worst = worst.max(relative_error(analytic.down[[row, col]], numeric));
                    coordinates += 1;
                }
            }
        }
        {
            let (n_dim, r_dim) = state.up.dim();
            for row in 0..n_dim {
                for col in 0..r_dim {
                    let original = state.up[[row, col]];
                    state.up[[row, col]] = original + h;
                    let plus = objective(&state)?;
                    state.up[[row, col]] = original - h;
                    let minus = objective(&state)?;
                    state.up[[row, col]] = original;
                    let numeric = (plus - minus) / (2.0 * h);
                    worst = worst.max(relative_error(analytic.up[[row, col]], numeric));
                    coordinates += 1;
                }
            }
        }
        if let Some(analytic_m) = &analytic.magnitude {
            let m_len = state.magnitude.as_ref().unwrap().len();
            for j in 0..m_len {
                let magnitude: &mut Array1<f64> = state.magnitude.as_mut().unwrap();
                let original = magnitude[j];
                magnitude[j] = original + h;
                let plus = objective(&state)?;
                state.magnitude.as_mut().unwrap()[j] = original - h;
                let minus = objective(&state)?;
                state.magnitude.as_mut().unwrap()[j] = original;
                let numeric = (plus - minus) / (2.0 * h);
                worst = worst.max(relative_error(analytic_m[j], numeric));
                coordinates += 1;
            }
        }
        checks.push(GradCheck {
            name: format!("peft.{}", variant.name()),
            worst_rel_err: worst,
            tolerance: 1e-6,
            coordinates,
        });
    }
    Ok(checks)
}

/// Runs the suite for the requested scope ("policy", "grpo", or "peft").
pub fn run_scope(scope: &str, seed: u64) -> Result<Vec<GradCheck>> {
    match scope {
        "policy" => policy_checks(seed),
        "grpo" => grpo_checks(seed),
        "peft" => peft_checks(seed),
        other => Err(crate::error::Error::InvalidParameter(format!(
            "unknown grad-check scope {other:?}; expected policy, grpo, or peft"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_gradient_matches_finite_differences() {
        for check in policy_checks(1).unwrap() {
            assert!(check.passed(), "{}: worst {:.3e}", check.name, check.worst_rel_err);
        }
    }

    #[test]
    fn grpo_gradient_matches_finite_differences() {
        for check in grpo_checks(2).unwrap() {
            assert!(check.passed(), "{}: worst {:.3e}", check.name, check.worst_rel_err);
        }
    }

    #[test]
    fn peft_gradients_match_finite_differences() {
        for check in peft_checks(3).unwrap() {
            assert!(check.passed(), "{}: worst {:.3e}", check.name, check.worst_rel_err);
            assert!(check.coordinates >= 50);
        }
    }

    #[test]
    fn peft_small_case_from_module_contract() {
        // 5x4 matrices at rank 2, h = 1e-6, every coordinate below 1e-6
        // relative error.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
        };
        let base = draw(5, 4);
        let down = draw(2, 4);
        let up = draw(5, 2);
        let upstream = draw(5, 4);
        for variant in [AdapterVariant::Lora, AdapterVariant::RsLora, AdapterVariant::Dora] {
            let config = AdapterConfig::new(2, 4.0, variant).unwrap();
            let magnitude = matches!(variant, AdapterVariant::Dora).then(|| {
                column_norms(&(&base + &(up.dot(&down) * scaling_factor(&config)))) + 0.5
            });
            let mut state =
                AdapterState::new(base.clone(), down.clone(), up.clone(), magnitude).unwrap();
            let analytic = adapter_grad(&state, &config, &upstream).unwrap();
            let h = 1e-6;
            let objective = |state: &AdapterState| {
                effective_weight(state, &config)
                    .unwrap()
                    .iter()
                    .zip(upstream.iter())
                    .map(|(w, g)| w * g)
                    .sum::<f64>()
            };
            let original = state.down[[1, 2]];
            state.down[[1, 2]] = original + h;
            let plus = objective(&state);
            state.down[[1, 2]] = original - h;
            let minus = objective(&state);
            state.down[[1, 2]] = original;
            let numeric = (plus - minus) / (2.0 * h);
            assert!(relative_error(analytic.down[[1, 2]], numeric) < 1e-6);
        }
    }

    #[test]
    fn unknown_scope_is_rejected() {
        assert!(run_scope("bogus", 0).is_err());
    }
}
