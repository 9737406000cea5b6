//! Tokenization, completion-grammar parsing, and n-gram extraction.
//!
//! The policy's vocabulary is the task alphabet itself: a small symbol table
//! holding markup atoms (`<think>`, `</think>`, `\boxed{`, `}`), option
//! letters, digits, arithmetic operators, and a reserved end-of-sequence
//! marker. Tokenization is greedy longest-match over that table; the word
//! splitting used by the repetition penalty is whitespace-based and
//! independent of the tokenizer.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Token identifier; valid ids are `0..vocab.len()`.
pub type TokenId = usize;

/// Spelling of the end-of-sequence symbol inside the symbol table.
pub const EOS_SYMBOL: &str = "<eos>";

/// Markup atoms every vocabulary must carry for the completion grammar.
const REQUIRED_ATOMS: [&str; 4] = ["<think>", "</think>", "\\boxed{", "}"];

/// Fixed symbol table with bijective id maps.
///
/// Ids are assigned in symbol order, so id 0 is always the first symbol.
/// The end-of-sequence marker has a fixed reserved id and renders as the
/// empty string.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    eos_id: TokenId,
}

impl Vocab {
    /// Builds a vocabulary from distinct symbols. The table must contain
    /// [`EOS_SYMBOL`], the four markup atoms, and the option letters A-E.
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, symbol) in symbols.iter().enumerate() {
            if symbol.is_empty() {
                return Err(Error::InvalidConfig("vocab symbol must be non-empty".into()));
            }
            if index.insert(symbol.clone(), id).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocab symbol {symbol:?}")));
            }
        }
        for atom in REQUIRED_ATOMS {
            if !index.contains_key(atom) {
                return Err(Error::InvalidConfig(format!("vocab is missing markup atom {atom:?}")));
            }
        }
        for letter in ["A", "B", "C", "D", "E"] {
            if !index.contains_key(letter) {
                return Err(Error::InvalidConfig(format!("vocab is missing option letter {letter}")));
            }
        }
        let eos_id = *index
            .get(EOS_SYMBOL)
            .ok_or_else(|| Error::InvalidConfig(format!("vocab is missing {EOS_SYMBOL}")))?;
        Ok(Self { symbols, index, eos_id })
    }

    /// The standard lab vocabulary: EOS, markup atoms, space, option letters,
    /// digits, and arithmetic operators. 28 symbols total.
    pub fn standard() -> Self {
        let mut symbols: Vec<String> = vec![EOS_SYMBOL.to_string()];
        for atom in REQUIRED_ATOMS {
            symbols.push(atom.to_string());
        }
        symbols.push(" ".to_string());
        for letter in ["A", "B", "C", "D", "E"] {
            symbols.push(letter.to_string());
        }
        for digit in 0..10u32 {
            symbols.push(digit.to_string());
        }
        for op in ["+", "-", "*", "=", "?"] {
            symbols.push(op.to_string());
        }
        Self::new(symbols).expect("standard vocabulary is well-formed")
    }

    /// Number of symbols, V.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Reserved end-of-sequence id.
    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    /// Id of a symbol, if present.
    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    /// Symbol spelling for an id.
    pub fn symbol(&self, id: TokenId) -> Result<&str> {
        self.symbols
            .get(id)
            .map(String::as_str)
            .ok_or(Error::InvalidToken { id, vocab_size: self.symbols.len() })
    }

    /// Greedy longest-match segmentation of `text` into token ids.
    ///
    /// Never produces the EOS id (its spelling renders empty, so it cannot
    /// occur in rendered text). Fails on any byte span that matches no symbol.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut tokens = Vec::new();
        let mut position = 0;
        while position < text.len() {
            let rest = &text[position..];
            let hit = self
                .symbols
                .iter()
                .enumerate()
                .filter(|(id, symbol)| *id != self.eos_id && rest.starts_with(symbol.as_str()))
                .max_by_key(|(_, symbol)| symbol.len());
            match hit {
                Some((id, symbol)) => {
                    tokens.push(id);
                    position += symbol.len();
                }
                None => {
                    return Err(Error::Tokenize {
                        position,
                        snippet: rest.chars().take(8).collect(),
                    })
                }
            }
        }
        Ok(tokens)
    }

    /// Concatenates symbol spellings; EOS renders as the empty string.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let mut text = String::new();
        for &id in tokens {
            let symbol = self.symbol(id)?;
            if id != self.eos_id {
                text.push_str(symbol);
            }
        }
        Ok(text)
    }
}

/// Structured view of one completion under the output grammar: a single
/// `<think>` block opening the text, followed by a tail that must carry a
/// final `\boxed{X}` answer with X in A-E.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    /// A `<think>...</think>` pair was found.
    pub has_think_block: bool,
    /// Text between the first `<think>` and the first following `</think>`.
    pub think_text: Option<String>,
    /// Argument of the last valid `\boxed{X}` after `</think>`.
    pub answer_letter: Option<char>,
    /// Text after the closing `</think>` tag (empty when there is none).
    pub tail_text: String,
    /// Exactly one think block starting at position 0, plus a boxed answer.
    pub well_formed: bool,
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const BOXED_OPEN: &str = "\\boxed{";

/// Parses arbitrary text against the completion grammar. Total: malformed
/// input yields `well_formed == false`, never an error.
///
/// The think block is delimited by the first `<think>` and the first
/// subsequent `</think>`; the answer is the last `\boxed{X}` in the tail
/// whose argument is a single letter A-E. Repeated or nested think tags
/// break well-formedness but not extraction.
pub fn parse_completion(text: &str) -> ParsedCompletion {
    let open_at = text.find(THINK_OPEN);
    let close_at = open_at.and_then(|at| {
        text[at + THINK_OPEN.len()..]
            .find(THINK_CLOSE)
            .map(|rel| at + THINK_OPEN.len() + rel)
    });

    let (has_think_block, think_text, tail_text) = match (open_at, close_at) {
        (Some(open), Some(close)) => {
            let think = text[open + THINK_OPEN.len()..close].to_string();
            let tail = text[close + THINK_CLOSE.len()..].to_string();
            (true, Some(think), tail)
        }
        _ => (false, None, String::new()),
    };

    let answer_letter = last_boxed_letter(&tail_text);

    let single_pair = text.matches(THINK_OPEN).count() == 1 && text.matches(THINK_CLOSE).count() == 1;
    let well_formed = has_think_block && open_at == Some(0) && single_pair && answer_letter.is_some();

    ParsedCompletion { has_think_block, think_text, answer_letter, tail_text, well_formed }
}

/// Last `\boxed{X}` in `text` whose argument is a single A-E letter.
fn last_boxed_letter(text: &str) -> Option<char> {
    let mut result = None;
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(BOXED_OPEN) {
        let arg_start = search_from + rel + BOXED_OPEN.len();
        let mut chars = text[arg_start..].chars();
        if let (Some(letter), Some('}')) = (chars.next(), chars.next()) {
            if ('A'..='E').contains(&letter) {
                result = Some(letter);
            }
        }
        search_from = arg_start;
    }
    result
}

/// Splits on runs of whitespace, dropping empty pieces.
pub fn split_words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Counts of contiguous n-gram windows over a word list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NgramCounts {
    /// Number of windows: `max(len - n + 1, 0)`.
    pub total: usize,
    /// Number of distinct windows.
    pub unique: usize,
}

/// Extracts all contiguous windows of length `n` and reports total and
/// distinct counts. `n` must be at least 1.
pub fn extract_ngrams(words: &[&str], n: usize) -> Result<NgramCounts> {
    if n == 0 {
        return Err(Error::InvalidParameter("n-gram size must be at least 1".into()));
    }
    if words.len() < n {
        return Ok(NgramCounts { total: 0, unique: 0 });
    }
    let total = words.len() - n + 1;
    let mut seen = std::collections::HashSet::with_capacity(total);
    for window in words.windows(n) {
        seen.insert(window);
    }
    Ok(NgramCounts { total, unique: seen.len() })
}
