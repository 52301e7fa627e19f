//! Word-level vocabulary and tokenisation.

use std::collections::{BTreeMap, BTreeSet};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || *c == '_')
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Distinct normalised tokens, sorted, numbered from 2.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let set: BTreeSet<String> = corpus.iter().flat_map(|q| normalize(q.as_ref())).collect();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(set);
        Self::from_tokens(tokens)
    }

    /// Vocabulary of every question the generator can produce.
    pub fn from_template_bank() -> Self {
        Self::build(&super::qa::template_bank())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
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

    /// Token ids right-padded (or truncated) to `max_len`, with a mask that
    /// is `true` on real tokens.
    pub fn tokenize(&self, question: &str, max_len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids: Vec<usize> = normalize(question).iter().map(|t| self.id(t)).collect();
        ids.truncate(max_len);
        let mut mask = vec![true; ids.len()];
        ids.resize(max_len, PAD);
        mask.resize(max_len, false);
        (ids, mask)
    }

    /// Joins the real tokens of an id row with single spaces.
    pub fn detokenize(&self, ids: &[usize], mask: &[bool]) -> String {
        ids.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&i, _)| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
