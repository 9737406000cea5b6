//! The trainable policy: a featurized linear-softmax next-token model.
//!
//! Next-token logits are a linear map of the context features,
//! `logits = theta · phi(context)`, where `phi` stacks one-hot encodings of
//! the last `window` tokens plus a constant bias feature. Positions before
//! the start of the sequence are padded with a reserved pad id that sits
//! outside the vocabulary and contributes no features, so the pad can never
//! be sampled. Log-probability gradients are analytic:
//! `d log pi(o | ctx) / d theta = (e_o - p(.|ctx)) ⊗ phi(ctx)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textio::{TokenId, Vocab};

/// Header line of the checkpoint file format.
pub const CHECKPOINT_HEADER: &str = "grpo-lab-policy v1";

/// Parameters of the linear-softmax policy.
///
/// `theta` has one row per vocabulary symbol and one column per feature;
/// the feature dimension is `window * vocab_size + 1` (stacked one-hots
/// plus bias).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    theta: Array2<f64>,
    vocab_size: usize,
    window: usize,
}

impl PolicyParams {
    /// Zero-initialized parameters; the policy is uniform over the vocabulary.
    pub fn zeros(vocab_size: usize, window: usize) -> Self {
        let dim = window * vocab_size + 1;
        Self { theta: Array2::zeros((vocab_size, dim)), vocab_size, window }
    }

    /// Draws every entry i.i.d. uniform in `[-scale, scale]`.
    pub fn init(vocab_size: usize, window: usize, seed: u64, scale: f64) -> Self {
        let mut params = Self::zeros(vocab_size, window);
        if scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for value in params.theta.iter_mut() {
                *value = rng.gen_range(-scale..=scale);
            }
        }
        params
    }

    /// Random initialization plus additive logit bonuses on the output
    /// grammar's transitions, standing in for a supervised-finetuned
    /// starting point that already knows the completion format.
    ///
    /// `format_prime` boosts the template chain (`?` to `<think>`,
    /// `</think>` to `\boxed{`, `\boxed{` to each letter, letter to `}`,
    /// `}` to EOS, all keyed on the previous token). `think_exit_prime`
    /// offsets `</think>` whenever `<think>` is anywhere in the window:
    /// positive values close think blocks promptly, negative values make
    /// them ramble. Zero primes reduce to [`PolicyParams::init`].
    pub fn init_primed(
        vocab: &Vocab,
        window: usize,
        seed: u64,
        scale: f64,
        format_prime: f64,
        think_exit_prime: f64,
        verbosity_prime: f64,
    ) -> Self {
        let mut params = Self::init(vocab.len(), window, seed, scale);
        let vocab_size = vocab.len();
        let id = |symbol: &str| vocab.id(symbol).expect("standard grammar symbol");
        {
            let theta = &mut params.theta;
            let mut prev = |next: usize, previous: usize, bonus: f64| {
                theta[[next, previous]] += bonus;
            };
            prev(id("<think>"), id("?"), format_prime);
            prev(id("\\boxed{"), id("</think>"), format_prime);
            for letter in ["A", "B", "C", "D", "E"] {
                prev(id(letter), id("\\boxed{"), format_prime);
                prev(id("}"), id(letter), format_prime);
            }
            prev(vocab.eos_id(), id("}"), format_prime);
            // Digit chains inside the think block: entered from the open
            // tag and self-sustaining, they make the initial policy verbose.
            if verbosity_prime != 0.0 {
                let digits: Vec<usize> = (0..10).map(|d| id(&d.to_string())).collect();
                for &digit in &digits {
                    prev(digit, id("<think>"), verbosity_prime);
                    for &next in &digits {
                        prev(next, digit, verbosity_prime);
                    }
                }
            }
        }
        for j in 0..window {
            params.theta[[id("</think>"), j * vocab_size + id("<think>")]] += think_exit_prime;
        }
        params
    }

    /// Deep copy used as the frozen old policy during a step.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Context window length.
    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of features per context: `window * vocab_size + 1`.
    pub fn feature_dim(&self) -> usize {
        self.window * self.vocab_size + 1
    }

    /// Reserved pad id used for positions before the sequence start. It lies
    /// outside the vocabulary, contributes no features, and cannot be sampled.
    pub fn pad_id(&self) -> TokenId {
        self.vocab_size
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut Array2<f64> {
        &mut self.theta
    }

    /// Writes the checkpoint: a header line, a dimensions line, then
    /// row-major little-endian f64 values. Round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        writeln!(out, "{} {}", self.vocab_size, self.window)?;
        for value in self.theta.iter() {
            out.write_all(&value.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`PolicyParams::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let header = read_line(&mut reader)?;
        if header != CHECKPOINT_HEADER {
            return Err(Error::CheckpointFormat(format!(
                "expected header {CHECKPOINT_HEADER:?}, found {header:?}"
            )));
        }
        let dims = read_line(&mut reader)?;
        let mut parts = dims.split_whitespace();
        let (vocab_size, window) = match (parts.next(), parts.next(), parts.next()) {
            (Some(v), Some(w), None) => {
                let v = v
                    .parse::<usize>()
                    .map_err(|e| Error::CheckpointFormat(format!("bad vocab size: {e}")))?;
                let w = w
                    .parse::<usize>()
                    .map_err(|e| Error::CheckpointFormat(format!("bad window: {e}")))?;
                (v, w)
            }
            _ => return Err(Error::CheckpointFormat("malformed dimensions line".into())),
        };
        let dim = window * vocab_size + 1;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != vocab_size * dim * 8 {
            return Err(Error::CheckpointFormat(format!(
                "expected {} value bytes, found {}",
                vocab_size * dim * 8,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
            .collect();
        let theta = Array2::from_shape_vec((vocab_size, dim), values)
            .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
        Ok(Self { theta, vocab_size, window })
    }
}

fn read_line(reader: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 || byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|e| Error::CheckpointFormat(e.to_string()))
}

/// Decoding configuration: temperature scaling, then top-k, then top-p.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub top_k: usize,
    /// Nucleus threshold in (0, 1].
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Argmax decoding; the temperature-to-zero limit.
    #[serde(default)]
    pub greedy: bool,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: usize::MAX, top_p: 1.0, max_new_tokens: 24, greedy: false }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("decoding.temperature must be positive".into()));
        }
        if self.top_k < 1 {
            return Err(Error::InvalidConfig("decoding.top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("decoding.top_p must lie in (0, 1]".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(Error::InvalidConfig("decoding.max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// Greedy variant of this config, used for evaluation.
    pub fn greedy(&self) -> Self {
        Self { greedy: true, ..self.clone() }
    }
}

/// One sampled rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<TokenId>,
    /// Rendered text (EOS renders empty).
    pub text: String,
    /// Log-probability of each sampled token under the full
    /// temperature-scaled distribution at sampling time.
    pub old_logprobs: Vec<f64>,
    /// No EOS was emitted before the generation cap.
    pub truncated: bool,
}

/// Last-`window` context before generating position `t` of the completion.
/// Index `j` holds the token at distance `j + 1`; missing positions hold the
/// pad id.
pub(crate) fn context_before(
    prompt: &[TokenId],
    completion: &[TokenId],
    t: usize,
    window: usize,
    pad_id: TokenId,
) -> Vec<TokenId> {
    let total = prompt.len() + t;
    let mut context = vec![pad_id; window];
    for (j, slot) in context.iter_mut().enumerate() {
        let distance = j + 1;
        if distance <= total {
            let idx = total - distance;
            *slot = if idx < prompt.len() { prompt[idx] } else { completion[idx - prompt.len()] };
        }
    }
    context
}

/// Raw next-token logits for a context window: `theta · phi(context)`.
pub fn logits(params: &PolicyParams, context: &[TokenId]) -> Vec<f64> {
    debug_assert_eq!(context.len(), params.window);
    let vocab_size = params.vocab_size;
    let theta = &params.theta;
    let bias_col = params.window * vocab_size;
    let mut out = vec![0.0; vocab_size];
    for (v, value) in out.iter_mut().enumerate() {
        let mut z = theta[[v, bias_col]];
        for (j, &token) in context.iter().enumerate() {
            if token < vocab_size {
                z += theta[[v, j * vocab_size + token]];
            }
        }
        *value = z;
    }
    out
}

/// Numerically stable log-softmax.
pub(crate) fn log_softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax_slice(logits)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|lp| lp.exp()).collect()
}

/// Full-distribution log-probabilities at a given temperature for each
/// completion token in sequence. Temperature 1 is the quantity entering the
/// importance ratio.
pub(crate) fn logprob_at_temperature(
    params: &PolicyParams,
    prompt: &[TokenId],
    completion: &[TokenId],
    temperature: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(completion.len());
    for (t, &token) in completion.iter().enumerate() {
        let context = context_before(prompt, completion, t, params.window, params.pad_id());
        let mut z = logits(params, &context);
        for value in z.iter_mut() {
            *value /= temperature;
        }
        out.push(log_softmax(&z)[token]);
    }
    out
}

/// Per-token `log pi(o_t | q, o_<t)` under the full temperature-1 softmax.
pub fn logprob(params: &PolicyParams, prompt: &[TokenId], completion: &[TokenId]) -> Vec<f64> {
    logprob_at_temperature(params, prompt, completion, 1.0)
}

/// Adds `coeff * d log pi(token | context) / d theta` into `grad`.
///
/// Only the `window + 1` active feature columns are touched; each active
/// column receives `coeff * (e_token - p)`.
pub(crate) fn accumulate_score(
    params: &PolicyParams,
    context: &[TokenId],
    token: TokenId,
    coeff: f64,
    grad: &mut Array2<f64>,
) {
    let probs = softmax(&logits(params, context));
    accumulate_score_with_probs(params, context, &probs, token, coeff, grad);
}

/// As [`accumulate_score`], with the next-token distribution precomputed.
pub(crate) fn accumulate_score_with_probs(
    params: &PolicyParams,
    context: &[TokenId],
    probs: &[f64],
    token: TokenId,
    coeff: f64,
    grad: &mut Array2<f64>,
) {
    let vocab_size = params.vocab_size;
    let mut columns: Vec<usize> = Vec::with_capacity(params.window + 1);
    for (j, &ctx_token) in context.iter().enumerate() {
        if ctx_token < vocab_size {
            columns.push(j * vocab_size + ctx_token);
        }
    }
    columns.push(params.window * vocab_size);
    for v in 0..vocab_size {
        let score = coeff * (((v == token) as u8 as f64) - probs[v]);
        for &col in &columns {
            grad[[v, col]] += score;
        }
    }
}

/// Analytic gradient of the summed completion log-probability with respect
/// to `theta`.
pub fn logprob_grad(
    params: &PolicyParams,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Array2<f64> {
    let mut grad = Array2::zeros(params.theta.raw_dim());
    for (t, &token) in completion.iter().enumerate() {
        let context = context_before(prompt, completion, t, params.window, params.pad_id());
        accumulate_score(params, &context, token, 1.0, &mut grad);
    }
    grad
}

/// Samples one completion autoregressively.
///
/// Each step scales logits by the temperature, keeps the `top_k` highest,
/// keeps the smallest nucleus of the survivors reaching `top_p`, renormalizes
/// and samples. Stops at EOS or at the generation cap. `old_logprobs` record
/// every sampled token under the full (pre-filtering) temperature-scaled
/// distribution.
pub fn sample_completion(
    params: &PolicyParams,
    prompt: &[TokenId],
    decoding: &DecodingConfig,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Completion {
    assert_eq!(params.vocab_size, vocab.len(), "policy and vocabulary sizes must agree");
    let eos = vocab.eos_id();
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut old_logprobs: Vec<f64> = Vec::new();

    while tokens.len() < decoding.max_new_tokens {
        let context = context_before(prompt, &tokens, tokens.len(), params.window, params.pad_id());
        let raw = logits(params, &context);
        let scaled: Vec<f64> = raw.iter().map(|z| z / decoding.temperature).collect();
        let full_logprobs = log_softmax(&scaled);

        let token = if decoding.greedy {
            argmax(&raw)
        } else {
            sample_filtered(&scaled, decoding.top_k, decoding.top_p, rng)
        };

        old_logprobs.push(full_logprobs[token]);
        tokens.push(token);
        if token == eos {
            break;
        }
    }

    let truncated = tokens.last() != Some(&eos) && tokens.len() == decoding.max_new_tokens;
    let text = vocab.detokenize(&tokens).expect("sampled ids are in range");
    Completion { tokens, text, old_logprobs, truncated }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-k then top-p filtering over temperature-scaled logits, then one draw.
fn sample_filtered(scaled: &[f64], top_k: usize, top_p: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    // Descending by logit, ascending id on ties, for a deterministic order.
    order.sort_by(|&a, &b| {
        scaled[b].partial_cmp(&scaled[a]).expect("finite logits").then(a.cmp(&b))
    });
    order.truncate(top_k.min(order.len()));

    // Renormalize over the survivors, then take the smallest prefix whose
    // cumulative probability reaches top_p.
    let max = scaled[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut kept = 0;
    let mut cumulative = 0.0;
    for weight in &weights {
        kept += 1;
        cumulative += weight / total;
        if cumulative >= top_p {
            break;
        }
    }

    let kept_total: f64 = weights[..kept].iter().sum();
    let mut draw = rng.gen::<f64>() * kept_total;
    for (slot, weight) in weights[..kept].iter().enumerate() {
        draw -= weight;
        if draw <= 0.0 {
            return order[slot];
        }
    }
    order[kept - 1]
}
