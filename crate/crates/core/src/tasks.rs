//! Deterministic generator of synthetic, verifiable multiple-choice
//! arithmetic questions, plus dataset persistence.
//!
//! Each instance renders as option list first, question last, e.g.
//! `A 3 B 6 C 1 D 4 5 + 2 = ?` for modular arithmetic over the operand
//! range. Answers and distractors live in `0..modulus` where `modulus` is
//! the operand range size. The correct option is keyed to the second
//! operand (`slot = (y - min) mod num_options`) so that a short-window
//! policy can decode the gold letter from the prompt; when the option
//! count divides the range size the gold position is exactly uniform.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textio::{ParsedCompletion, TokenId, Vocab};

/// Header line of the dataset file format.
pub const DATASET_HEADER: &str = "grpo-lab-dataset v1";

/// All option letters, in slot order.
pub const OPTION_LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

const DISTRACTOR_ATTEMPTS: usize = 100;

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McqInstance {
    pub id: u64,
    /// Tokenized prompt; non-empty and EOS-free.
    pub prompt_tokens: Vec<TokenId>,
    /// Letters in display order (a prefix of A..E).
    pub option_letters: Vec<char>,
    /// The letter whose displayed value is the true result.
    pub gold_letter: char,
    /// Operation index: 0 add, 1 subtract, 2 multiply.
    pub difficulty_tag: u8,
}

impl McqInstance {
    fn validate(&self) -> Result<()> {
        let n = self.option_letters.len();
        if !(2..=5).contains(&n) {
            return Err(Error::InvalidConfig(format!("instance {} has {} options", self.id, n)));
        }
        if !self.option_letters.contains(&self.gold_letter) {
            return Err(Error::InvalidConfig(format!(
                "instance {}: gold letter {} not among options",
                self.id, self.gold_letter
            )));
        }
        if self.prompt_tokens.is_empty() {
            return Err(Error::InvalidConfig(format!("instance {} has an empty prompt", self.id)));
        }
        Ok(())
    }
}

/// Generation parameters for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Smallest operand value (inclusive, non-negative).
    pub operand_min: i64,
    /// Largest operand value (inclusive).
    pub operand_max: i64,
    /// Number of displayed options, 2 to 5.
    pub num_options: usize,
    pub seed: u64,
    /// Number of instances to generate.
    pub count: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { operand_min: 0, operand_max: 7, num_options: 4, seed: 0, count: 512 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.operand_min > self.operand_max {
            return Err(Error::InvalidConfig("task.operand_min must be <= task.operand_max".into()));
        }
        if self.operand_min < 0 {
            return Err(Error::InvalidConfig(
                "task.operand_min must be non-negative so prompts parse unambiguously".into(),
            ));
        }
        if !(2..=5).contains(&self.num_options) {
            return Err(Error::InvalidConfig("task.num_options must be between 2 and 5".into()));
        }
        if self.count == 0 {
            return Err(Error::InvalidConfig("task.count must be at least 1".into()));
        }
        Ok(())
    }

    /// Size of the operand range; answers and distractors live in `0..modulus`.
    pub fn modulus(&self) -> i64 {
        self.operand_max - self.operand_min + 1
    }
}

fn apply_op(op: u8, x: i64, y: i64, modulus: i64) -> i64 {
    let raw = match op {
        0 => x + y,
        1 => x - y,
        _ => x * y,
    };
    raw.rem_euclid(modulus)
}

fn op_symbol(op: u8) -> char {
    match op {
        0 => '+',
        1 => '-',
        _ => '*',
    }
}

/// Generates `config.count` arithmetic MCQs, fully determined by the seed.
pub fn generate_dataset(config: &TaskConfig, vocab: &Vocab) -> Result<Vec<McqInstance>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let modulus = config.modulus();
    let mut instances = Vec::with_capacity(config.count);
    for id in 0..config.count as u64 {
        let x = rng.gen_range(config.operand_min..=config.operand_max);
        let y = rng.gen_range(config.operand_min..=config.operand_max);
        let op = rng.gen_range(0..3u8);
        let gold_value = apply_op(op, x, y, modulus);

        let gold_slot = ((y - config.operand_min) % config.num_options as i64) as usize;
        let mut values = vec![None; config.num_options];
        values[gold_slot] = Some(gold_value);
        for slot in 0..config.num_options {
            if values[slot].is_some() {
                continue;
            }
            let mut placed = false;
            for _ in 0..DISTRACTOR_ATTEMPTS {
                let candidate = rng.gen_range(0..modulus);
                if !values.contains(&Some(candidate)) {
                    values[slot] = Some(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not draw {} distinct option values from range 0..{} for instance {}",
                    config.num_options, modulus, id
                )));
            }
        }

        let mut prompt = String::new();
        for (slot, value) in values.iter().enumerate() {
            prompt.push(OPTION_LETTERS[slot]);
            prompt.push(' ');
            prompt.push_str(&value.unwrap().to_string());
            prompt.push(' ');
        }
        prompt.push_str(&format!("{x} {} {y} = ?", op_symbol(op)));

        let instance = McqInstance {
            id,
            prompt_tokens: vocab.tokenize(&prompt)?,
            option_letters: OPTION_LETTERS[..config.num_options].to_vec(),
            gold_letter: OPTION_LETTERS[gold_slot],
            difficulty_tag: op,
        };
        instance.validate()?;
        instances.push(instance);
    }
    Ok(instances)
}

/// True iff the parsed answer letter equals the gold letter. An absent
/// answer grades false.
pub fn grade(parsed: &ParsedCompletion, instance: &McqInstance) -> bool {
    parsed.answer_letter == Some(instance.gold_letter)
}

/// Writes instances as one tab-separated record per line under a version
/// header: `id, prompt text, option letters, gold letter, difficulty`.
pub fn save_dataset(path: &Path, instances: &[McqInstance], vocab: &Vocab) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{DATASET_HEADER}")?;
    for instance in instances {
        let prompt = vocab.detokenize(&instance.prompt_tokens)?;
        let letters: String = instance.option_letters.iter().collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            instance.id, prompt, letters, instance.gold_letter, instance.difficulty_tag
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset file; errors name the offending 1-based line.
pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<McqInstance>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::DatasetParse { line: 1, message: "missing header line".into() })?;
    if header != DATASET_HEADER {
        return Err(Error::DatasetParse {
            line: 1,
            message: format!("expected header {DATASET_HEADER:?}, found {header:?}"),
        });
    }
    let mut instances = Vec::new();
    for (index, line) in lines.enumerate() {
        let line_no = index + 2;
        let line = line?;
        let parse = |message: String| Error::DatasetParse { line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0].parse::<u64>().map_err(|e| parse(format!("bad id: {e}")))?;
        let prompt_tokens = vocab
            .tokenize(fields[1])
            .map_err(|e| parse(format!("bad prompt text: {e}")))?;
        let option_letters: Vec<char> = fields[2].chars().collect();
        let gold_letter = {
            let mut chars = fields[3].chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(parse("gold letter must be a single character".into())),
            }
        };
        let difficulty_tag =
            fields[4].parse::<u8>().map_err(|e| parse(format!("bad difficulty tag: {e}")))?;
        let instance = McqInstance { id, prompt_tokens, option_letters, gold_letter, difficulty_tag };
        instance.validate().map_err(|e| parse(e.to_string()))?;
        instances.push(instance);
    }
    Ok(instances)
}
