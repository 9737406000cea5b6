//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use grpo_lab_core::config::preset;
use grpo_lab_core::grpo::{batch_loss_and_grad, compute_advantages, Group, GrpoConfig};
use grpo_lab_core::metrics::StepMetrics;
use grpo_lab_core::peft::{
    column_norms, effective_weight, rank_stability_probe, AdapterConfig, AdapterState,
    AdapterVariant,
};
use grpo_lab_core::policy::{Completion, PolicyParams};
use grpo_lab_core::rewards::{
    cosine_length_reward, repetition_penalty, soft_overlong_penalty, RewardConfig,
};
use grpo_lab_core::tasks::{McqInstance, OPTION_LETTERS};
use grpo_lab_core::textio::Vocab;
use grpo_lab_core::{experiment, gradcheck};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(criterion: &str, passed: bool) {
    println!("ACCEPTANCE {criterion}: {}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "acceptance criterion failed: {criterion}");
}

/// Criterion 1: group-relative advantages normalize to zero mean and unit
/// population standard deviation and are invariant to positive affine
/// reward maps, over 10,000 random groups with K in 2..=8.
#[test]
fn criterion_1_advantage_normalization() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    let mut worst_affine = 0.0f64;
    for _ in 0..10_000 {
        let k = rng.gen_range(2..=8usize);
        let rewards: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let advantages = compute_advantages(&rewards, 1e-8).unwrap();
        if advantages.iter().all(|&a| a == 0.0) {
            continue; // degenerate draw (never observed with continuous rewards)
        }
        let mean = advantages.iter().sum::<f64>() / k as f64;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k as f64;
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((var.sqrt() - 1.0).abs());

        let scale = rng.gen_range(0.1..10.0);
        let shift = rng.gen_range(-5.0..5.0);
        let mapped: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let mapped_advantages = compute_advantages(&mapped, 1e-8).unwrap();
        for (a, b) in advantages.iter().zip(mapped_advantages.iter()) {
            worst_affine = worst_affine.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    let passed = worst_mean < 1e-12
        && worst_std < 1e-9
        && worst_affine < 1e-9
        && elapsed.as_secs_f64() < 5.0;
    println!(
        "  mean {worst_mean:.2e} (<1e-12), std dev {worst_std:.2e} (<1e-9), \
         affine {worst_affine:.2e} (<1e-9), {elapsed:?} (<5s)"
    );
    report("1 (advantage normalization)", passed);
}

/// Criterion 2: every analytic gradient matches central finite differences
/// at the stated tolerances over at least 50 coordinates per check.
#[test]
fn criterion_2_gradient_fidelity() {
    let start = Instant::now();
    let mut all = Vec::new();
    all.extend(gradcheck::policy_checks(11).unwrap());
    all.extend(gradcheck::grpo_checks(12).unwrap());
    all.extend(gradcheck::peft_checks(13).unwrap());
    let mut passed = true;
    for check in &all {
        println!(
            "  {}: worst rel err {:.3e} (tolerance {:.0e}, {} coordinates)",
            check.name, check.worst_rel_err, check.tolerance, check.coordinates
        );
        passed &= check.passed() && check.coordinates >= 50;
    }
    let elapsed = start.elapsed();
    println!("  {elapsed:?} (<30s)");
    passed &= elapsed.as_secs_f64() < 30.0;
    report("2 (gradient fidelity)", passed);
}

fn single_token_group(vocab: &Vocab, ratio_logit: f64) -> (PolicyParams, PolicyParams, Vec<Group>) {
    let old_policy = PolicyParams::zeros(vocab.len(), 1);
    let mut policy = old_policy.clone();
    let answer = vocab.id("A").unwrap();
    let bias_column = policy.window() * policy.vocab_size();
    policy.theta_mut()[[answer, bias_column]] = ratio_logit;

    let uniform_logprob = -(vocab.len() as f64).ln();
    let winner = Completion {
        tokens: vec![answer],
        text: "A".into(),
        old_logprobs: vec![uniform_logprob],
        truncated: false,
    };
    // The partner completion is truncated so masking removes its tokens and
    // only the ratio-1.25 token contributes.
    let masked_partner = Completion {
        tokens: vec![vocab.id("B").unwrap()],
        text: "B".into(),
        old_logprobs: vec![uniform_logprob],
        truncated: true,
    };
    let instance = McqInstance {
        id: 0,
        prompt_tokens: vocab.tokenize("1 + 1 = ?").unwrap(),
        option_letters: OPTION_LETTERS[..4].to_vec(),
        gold_letter: 'A',
        difficulty_tag: 0,
    };
    let groups = vec![Group {
        instance,
        completions: vec![winner, masked_partner],
        breakdowns: vec![],
        advantages: compute_advantages(&[1.0, 0.0], 1e-8).unwrap(),
    }];
    (policy, old_policy, groups)
}

/// Criterion 3: with eps_high = 0.28 a positive-advantage token at ratio
/// 1.25 receives a nonzero gradient; with symmetric eps = 0.2 it receives
/// exactly zero. No tolerance.
#[test]
fn criterion_3_clip_higher() {
    let vocab = Vocab::standard();
    // Bias logit c placing the token's probability at 1.25 / V while the
    // snapshot stays uniform: ratio = V e^c / (V - 1 + e^c) = 1.25.
    let v = vocab.len() as f64;
    let c = (1.25 * (v - 1.0) / (v - 1.25)).ln();
    let (policy, old_policy, groups) = single_token_group(&vocab, c);

    // Confirm the constructed ratio.
    let new_lp = grpo_lab_core::policy::logprob(
        &policy,
        &groups[0].instance.prompt_tokens,
        &groups[0].completions[0].tokens,
    )[0];
    let ratio = (new_lp - groups[0].completions[0].old_logprobs[0]).exp();
    assert!((ratio - 1.25).abs() < 1e-12, "constructed ratio {ratio}");
    assert!(groups[0].advantages[0] > 0.0);

    let asymmetric = GrpoConfig { eps_low: 0.2, eps_high: 0.28, ..GrpoConfig::default() };
    let wide = batch_loss_and_grad(&policy, &old_policy, &groups, &asymmetric).unwrap();
    let nonzero = wide.grad.iter().any(|&g| g != 0.0);

    let symmetric = GrpoConfig { eps_low: 0.2, eps_high: 0.2, ..GrpoConfig::default() };
    let tight = batch_loss_and_grad(&policy, &old_policy, &groups, &symmetric).unwrap();
    let all_zero = tight.grad.iter().all(|&g| g == 0.0);

    println!(
        "  ratio 1.25, advantage +1: eps_high 0.28 gradient nonzero = {nonzero}, \
         eps_high 0.20 gradient all-zero = {all_zero}"
    );
    report("3 (clip-higher asymmetry)", nonzero && all_zero && tight.clip_fraction == 1.0);
}

/// Criterion 4: token-level normalization weights completions by length:
/// lengths (2, 8) with constant per-token loss contributions (s1, s2) give
/// exactly (2 s1 + 8 s2) / 10, not the sequence mean (s1 + s2) / 2.
#[test]
fn criterion_4_token_level_normalization() {
    let vocab = Vocab::standard();
    let params = PolicyParams::init(vocab.len(), 4, 44, 0.3);
    let old_policy = params.snapshot(); // ratios are exactly 1
    let (s1, s2) = (0.7, -0.3);

    let make_group = |text: &str, advantage: f64| -> Group {
        let tokens = vocab.tokenize(text).unwrap();
        Group {
            instance: McqInstance {
                id: 0,
                prompt_tokens: vocab.tokenize("2 + 2 = ?").unwrap(),
                option_letters: OPTION_LETTERS[..4].to_vec(),
                gold_letter: 'A',
                difficulty_tag: 0,
            },
            completions: vec![Completion {
                old_logprobs: vec![-1.0; tokens.len()],
                tokens,
                text: text.into(),
                truncated: false,
            }],
            breakdowns: vec![],
            // At ratio 1 the per-token loss contribution is -advantage.
            advantages: vec![-advantage],
        }
    };
    let groups = vec![make_group("AB", s1), make_group("ABCDABCD", s2)];
    assert_eq!(groups[0].completions[0].tokens.len(), 2);
    assert_eq!(groups[1].completions[0].tokens.len(), 8);

    let result = batch_loss_and_grad(&params, &old_policy, &groups, &GrpoConfig::default()).unwrap();
    let token_normalized = (2.0 * s1 + 8.0 * s2) / 10.0;
    let sequence_mean = (s1 + s2) / 2.0;
    let matches = (result.loss - token_normalized).abs() < 1e-12;
    let differs = (result.loss - sequence_mean).abs() > 1e-6;
    println!(
        "  loss {:.12} vs token-normalized {token_normalized:.12} (match) \
         vs sequence mean {sequence_mean:.12} (differs)",
        result.loss
    );
    report("4 (token-level normalization)", matches && differs);
}

/// Criterion 5: reward component suites — cosine monotonicity and endpoint
/// values on a 1,025-point grid, the hand-enumerated repetition oracle,
/// exact overlong boundary values, and the truncation-mask no-op.
#[test]
fn criterion_5_reward_component_suites() {
    let start = Instant::now();
    let mut passed = true;

    // Cosine grid.
    let config = RewardConfig { max_length: 1024, ..RewardConfig::default() };
    let mut previous_correct = f64::INFINITY;
    let mut previous_wrong = f64::NEG_INFINITY;
    for length in 0..=1024usize {
        let correct = cosine_length_reward(true, length, &config);
        let wrong = cosine_length_reward(false, length, &config);
        passed &= correct <= previous_correct && wrong >= previous_wrong && correct > wrong;
        passed &= (config.cosine_correct_end..=config.cosine_correct_start).contains(&correct);
        passed &= (config.cosine_wrong_start..=config.cosine_wrong_end).contains(&wrong);
        previous_correct = correct;
        previous_wrong = wrong;
    }
    passed &= (cosine_length_reward(true, 0, &config) - 1.0).abs() < 1e-12;
    passed &= (cosine_length_reward(true, 1024, &config) - 0.5).abs() < 1e-12;
    passed &= (cosine_length_reward(false, 0, &config) + 1.0).abs() < 1e-12;
    passed &= (cosine_length_reward(false, 1024, &config) + 0.5).abs() < 1e-12;
    println!("  cosine: monotone with exact endpoints on 1,025-point grid");

    // Repetition hand oracle: [a b c] x3 has 7 trigrams, 3 unique.
    let words = vec!["a", "b", "c", "a", "b", "c", "a", "b", "c"];
    let penalty = repetition_penalty(&words, &RewardConfig::default());
    let oracle = -(4.0 / 7.0);
    passed &= (penalty - oracle).abs() < 1e-12;
    println!("  repetition: {penalty:.12} vs -4/7 oracle");

    // Soft overlong boundaries.
    let overlong =
        RewardConfig { overlong_threshold: 512, max_length: 1024, ..RewardConfig::default() };
    passed &= soft_overlong_penalty(512, &overlong) == 0.0;
    passed &= soft_overlong_penalty(768, &overlong) == -0.5;
    passed &= soft_overlong_penalty(1024, &overlong) == -1.0;
    println!("  overlong: boundary values 0 / -0.5 / -1 exact");

    // Truncation masking is a no-op when nothing is truncated.
    let vocab = Vocab::standard();
    let policy = PolicyParams::init(vocab.len(), 4, 55, 0.4);
    let mut old_policy = policy.snapshot();
    old_policy.theta_mut()[[3, 7]] += 0.05;
    let tokens = vocab.tokenize("<think></think>\\boxed{B}").unwrap();
    let group = Group {
        instance: McqInstance {
            id: 0,
            prompt_tokens: vocab.tokenize("5 - 1 = ?").unwrap(),
            option_letters: OPTION_LETTERS[..4].to_vec(),
            gold_letter: 'B',
            difficulty_tag: 1,
        },
        completions: vec![
            Completion {
                old_logprobs: vec![-1.2; tokens.len()],
                tokens: tokens.clone(),
                text: "<think></think>\\boxed{B}".into(),
                truncated: false,
            },
            Completion {
                old_logprobs: vec![-0.8; 2],
                tokens: vocab.tokenize("AB").unwrap(),
                text: "AB".into(),
                truncated: false,
            },
        ],
        breakdowns: vec![],
        advantages: vec![1.0, -1.0],
    };
    let masked = batch_loss_and_grad(
        &policy,
        &old_policy,
        std::slice::from_ref(&group),
        &GrpoConfig { mask_truncated: true, ..GrpoConfig::default() },
    )
    .unwrap();
    let unmasked = batch_loss_and_grad(
        &policy,
        &old_policy,
        std::slice::from_ref(&group),
        &GrpoConfig { mask_truncated: false, ..GrpoConfig::default() },
    )
    .unwrap();
    passed &= masked.loss.to_bits() == unmasked.loss.to_bits() && masked.grad == unmasked.grad;
    println!("  truncation mask: toggling is a no-op without truncations");

    let elapsed = start.elapsed();
    passed &= elapsed.as_secs_f64() < 5.0;
    println!("  {elapsed:?} (<5s)");
    report("5 (reward component suites)", passed);
}

/// Criterion 6: the rsLoRA update is exactly sqrt(r) times the LoRA update,
/// DoRA reconstructs its magnitudes as column norms, and the probe's
/// rslora/lora gradient-norm ratio tracks sqrt(r) within 20%.
#[test]
fn criterion_6_adapter_algebra() {
    let start = Instant::now();
    let mut passed = true;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut draw = |rows: usize, cols: usize| {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    };

    // sqrt(r) relation between rsLoRA and LoRA updates.
    let (base, down, up) = (draw(8, 6), draw(4, 6), draw(8, 4));
    let state = AdapterState::new(base.clone(), down, up, None).unwrap();
    let lora = AdapterConfig::new(4, 2.0, AdapterVariant::Lora).unwrap();
    let rslora = AdapterConfig::new(4, 2.0, AdapterVariant::RsLora).unwrap();
    let w_lora = effective_weight(&state, &lora).unwrap();
    let w_rslora = effective_weight(&state, &rslora).unwrap();
    let mut worst_sqrt_r = 0.0f64;
    for ((rs, lo), b) in w_rslora.iter().zip(w_lora.iter()).zip(base.iter()) {
        worst_sqrt_r = worst_sqrt_r.max(((rs - b) - 2.0 * (lo - b)).abs());
    }
    passed &= worst_sqrt_r < 1e-12;
    println!("  sqrt(r) update relation: worst deviation {worst_sqrt_r:.2e} (<1e-12)");

    // DoRA column-norm reconstruction.
    let (base, down, up) = (draw(8, 6), draw(4, 6), draw(8, 4));
    let dora = AdapterConfig::new(4, 2.0, AdapterVariant::Dora).unwrap();
    let magnitude = Array1::from_iter((0..6).map(|j| 0.5 + 0.4 * j as f64));
    let state = AdapterState::new(base, down, up, Some(magnitude.clone())).unwrap();
    let weight = effective_weight(&state, &dora).unwrap();
    let mut worst_norm = 0.0f64;
    for (norm, m) in column_norms(&weight).iter().zip(magnitude.iter()) {
        worst_norm = worst_norm.max((norm - m).abs());
    }
    passed &= worst_norm < 1e-12;
    println!("  DoRA column-norm reconstruction: worst deviation {worst_norm:.2e} (<1e-12)");

    // Probe ratio across ranks.
    let ranks = [4usize, 16, 64];
    let rows = rank_stability_probe(96, 64, &ranks, 100, 77).unwrap();
    for &rank in &ranks {
        let norm = |variant: AdapterVariant| {
            rows.iter().find(|r| r.rank == rank && r.variant == variant).unwrap().mean_grad_norm
        };
        let ratio = norm(AdapterVariant::RsLora) / norm(AdapterVariant::Lora);
        let expected = (rank as f64).sqrt();
        let within = (ratio / expected - 1.0).abs() < 0.2;
        println!("  probe rank {rank}: rslora/lora ratio {ratio:.3} vs sqrt(r) {expected:.3}");
        passed &= within;
    }

    let elapsed = start.elapsed();
    passed &= elapsed.as_secs_f64() < 20.0;
    println!("  {elapsed:?} (<20s)");
    report("6 (rsLoRA/DoRA algebra)", passed);
}

/// Criterion 7: the quickstart preset lifts held-out greedy accuracy from
/// the 0.25 chance baseline to at least 0.90 within its 2,000-step budget
/// on a single core in under two minutes.
#[test]
fn criterion_7_end_to_end_learning() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset("quickstart").unwrap();
    config.output_dir = dir.path().to_path_buf();
    assert_eq!(config.training.steps, 2000);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let artifacts = pool.install(|| experiment::run(&config)).unwrap();
    let elapsed = start.elapsed();

    let baseline = artifacts.records[0].eval_accuracy.unwrap();
    let final_accuracy = artifacts.final_eval;
    println!(
        "  baseline {baseline:.3} (chance 0.25), final {final_accuracy:.3} (>=0.90), \
         {elapsed:?} single-core (<120s)"
    );
    let passed = (baseline - 0.25).abs() < 0.10
        && final_accuracy >= 0.90
        && elapsed.as_secs_f64() < 120.0;
    report("7 (end-to-end learning)", passed);
}

fn mean_lengths(records: &[StepMetrics]) -> Vec<f64> {
    records.iter().filter(|r| r.step > 0).map(|r| r.mean_length).collect()
}

/// Criterion 8: qualitative length dynamics of the two demo presets —
/// collapse-then-partial-recovery under the soft overlong punishment, and a
/// non-decreasing final-half trend under the cosine reward.
#[test]
fn criterion_8_qualitative_dynamics() {
    // Overlong demo: mean length falls by at least half from its early peak,
    // then partially recovers.
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset("overlong-demo").unwrap();
    config.output_dir = dir.path().to_path_buf();
    let artifacts = experiment::run(&config).unwrap();
    let lengths = mean_lengths(&artifacts.records);
    let quarter = &lengths[..lengths.len() / 4];
    let peak = quarter.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let peak_at = quarter.iter().position(|&l| l == peak).unwrap();
    let trough = lengths[peak_at..].iter().cloned().fold(f64::INFINITY, f64::min);
    let tail = &lengths[lengths.len() * 9 / 10..];
    let tail_mean: f64 = tail.iter().sum::<f64>() / tail.len() as f64;
    let overlong_ok = trough <= 0.5 * peak && tail_mean >= 1.2 * trough;
    println!(
        "  overlong-demo: peak {peak:.1}, trough {trough:.1} (<=50% of peak), \
         late mean {tail_mean:.1} (recovered >=20% above trough)"
    );

    // Cosine demo: least-squares slope of mean length over the final half
    // of training is non-negative.
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset("cosine-demo").unwrap();
    config.output_dir = dir.path().to_path_buf();
    let artifacts = experiment::run(&config).unwrap();
    let lengths = mean_lengths(&artifacts.records);
    let half = &lengths[lengths.len() / 2..];
    let n = half.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = half.iter().sum::<f64>() / n;
    let covariance: f64 =
        half.iter().enumerate().map(|(i, &y)| (i as f64 - mean_x) * (y - mean_y)).sum();
    let variance: f64 = (0..half.len()).map(|i| (i as f64 - mean_x).powi(2)).sum();
    let slope = covariance / variance;
    let cosine_ok = slope >= 0.0;
    println!("  cosine-demo: final-half length slope {slope:+.4} tokens/step (>=0)");

    report("8 (qualitative dynamics)", overlong_ok && cosine_ok);
}

/// Criterion 9: two full quickstart runs with the same config and seed
/// produce byte-identical metrics files.
#[test]
fn criterion_9_determinism() {
    let run_once = || {
        let dir = tempfile::tempdir().unwrap();
        let mut config = preset("quickstart").unwrap();
        config.output_dir = dir.path().to_path_buf();
        let artifacts = experiment::run(&config).unwrap();
        std::fs::read(&artifacts.metrics_path).unwrap()
    };
    let first = run_once();
    let second = run_once();
    println!(
        "  two quickstart runs: {} bytes each, identical = {}",
        first.len(),
        first == second
    );
    report("9 (determinism)", first == second);
}
