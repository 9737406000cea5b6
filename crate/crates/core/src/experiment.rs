//! End-to-end experiment runner: dataset generation, the training loop,
//! metrics streaming, checkpoints, and evaluation cadence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::grpo::{evaluate, train_step, AdamState};
use crate::metrics::{write_record, StepMetrics};
use crate::policy::PolicyParams;
use crate::tasks::generate_dataset;
use crate::textio::Vocab;

/// Environment variable capping rollout parallelism.
pub const THREADS_ENV_VAR: &str = "GRPO_LAB_THREADS";

/// Outputs of one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Greedy accuracy on the held-out split after the last step.
    pub final_eval: f64,
    pub records: Vec<StepMetrics>,
}

/// Runs a full experiment under the configured thread cap. Results are
/// deterministic in the config regardless of the thread count.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    match thread_pool()? {
        Some(pool) => pool.install(|| run_inner(config)),
        None => run_inner(config),
    }
}

/// Builds a rayon pool when the thread-cap variable is set.
fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    match std::env::var(THREADS_ENV_VAR) {
        Ok(raw) => {
            let threads: usize = raw.parse().map_err(|_| {
                crate::error::Error::InvalidConfig(format!(
                    "{THREADS_ENV_VAR} must be a positive integer, found {raw:?}"
                ))
            })?;
            if threads == 0 {
                return Err(crate::error::Error::InvalidConfig(format!(
                    "{THREADS_ENV_VAR} must be a positive integer"
                )));
            }
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(
                |e| crate::error::Error::InvalidConfig(format!("thread pool: {e}")),
            )?;
            Ok(Some(pool))
        }
        Err(_) => Ok(None),
    }
}

fn run_inner(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let vocab = Vocab::standard();
    let dataset = generate_dataset(&config.task, &vocab)?;
    let eval_set = generate_dataset(&config.eval_task(), &vocab)?;

    std::fs::create_dir_all(&config.output_dir)?;
    let metrics_path = config.output_dir.join(format!("{}.metrics.jsonl", config.run_name));
    let checkpoint_path = config.output_dir.join(format!("{}.ckpt", config.run_name));

    let mut policy = PolicyParams::init_primed(
        &vocab,
        config.policy.window,
        config.policy_init_seed(),
        config.policy.init_scale,
        config.policy.format_prime,
        config.policy.think_exit_prime,
        config.policy.verbosity_prime,
    );
    let mut adam = AdamState::for_params(&policy);
    let mut out = BufWriter::new(File::create(&metrics_path)?);

    let mut final_eval = evaluate(&policy, &vocab, &eval_set, &config.decoding)?;
    let mut records = vec![StepMetrics::eval_only(0, final_eval)];
    write_record(&mut out, &records[0])?;

    let steps = config.training.steps;
    for step in 1..=steps {
        let mut record = train_step(
            &mut policy,
            &mut adam,
            &dataset,
            &vocab,
            &config.rewards,
            &config.grpo,
            &config.decoding,
            step,
        )?;
        if step % config.training.eval_every == 0 || step == steps {
            let accuracy = evaluate(&policy, &vocab, &eval_set, &config.decoding)?;
            record.eval_accuracy = Some(accuracy);
            final_eval = accuracy;
        }
        write_record(&mut out, &record)?;
        records.push(record);

        let cadence = config.training.checkpoint_every;
        if cadence > 0 && step % cadence == 0 && step != steps {
            let path = config.output_dir.join(format!("{}.step{step}.ckpt", config.run_name));
            policy.save(&path)?;
        }
    }
    out.flush()?;
    policy.save(&checkpoint_path)?;

    Ok(RunArtifacts { metrics_path, checkpoint_path, final_eval, records })
}
