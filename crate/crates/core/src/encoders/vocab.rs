use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
pub const MASK_ATOM: usize = 5;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[BOS]", "[EOS]", "[MASK-ATOM]"];

const PUNCTUATION: &[char] = &['.', ',', ';', ':', '(', ')'];

/// Word-level token vocabulary with dense ids; reserved tokens come first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Vocabulary(format!(
                    "id {i} must be the reserved token {r}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("id {i}: invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// A vocabulary holding only the reserved tokens plus `words`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// One token per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Vocab::parse(&fs::read_to_string(path)?)
    }

    /// Joins the surface tokens of `ids`, skipping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Vocab::is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercases and splits on whitespace; leading and trailing characters
/// from `.,;:()` become tokens of their own.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let core_start = lower
            .find(|c| !PUNCTUATION.contains(&c))
            .unwrap_or(lower.len());
        let core_end = lower
            .rfind(|c| !PUNCTUATION.contains(&c))
            .map(|i| i + lower[i..].chars().next().unwrap().len_utf8())
            .unwrap_or(core_start);
        out.extend(lower[..core_start].chars().map(String::from));
        if core_end > core_start {
            out.push(lower[core_start..core_end].to_string());
        }
        out.extend(lower[core_end.max(core_start)..].chars().map(String::from));
    }
    out
}

/// `[CLS]` followed by the ids of the first `max_seq_len − 1` words.
pub fn tokenize(text: &str, vocab: &Vocab, max_seq_len: usize) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(
        words(text)
            .iter()
            .take(max_seq_len.saturating_sub(1))
            .map(|w| vocab.id(w)),
    );
    ids
}

/// Builds a vocabulary from words occurring at least `min_freq` times,
/// ordered by frequency (descending) and then alphabetically.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for w in words(t.as_ref()) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED.contains(&w.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words: Vec<String> = kept.into_iter().map(|(w, _)| w).collect();
    Vocab::with_words(&words)
}
