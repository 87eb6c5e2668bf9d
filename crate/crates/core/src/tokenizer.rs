//! Word-level tokenizer for the bundled decoder.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{read_json, write_json};

pub const EOS_TOKEN: &str = "<|endoftext|>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercased words and single punctuation marks. Id 0 is end-of-text (also used as
/// padding), id 1 is unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Splits text into lowercased word pieces: runs of alphanumerics (apostrophes kept inside
/// words) and single non-space symbols.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || (c == '\'' && !cur.is_empty()) {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl WordTokenizer {
    pub fn from_tokens(mut tokens: Vec<String>) -> Self {
        tokens.retain(|t| t != EOS_TOKEN && t != UNK_TOKEN);
        let mut all = vec![EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let mut tok = Self {
            tokens: all,
            index: HashMap::new(),
        };
        tok.rebuild_index();
        tok
    }

    /// Builds a vocabulary of at most `max_vocab` entries (specials included) ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, max_vocab: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in pre_tokenize(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_vocab.saturating_sub(2);
        Self::from_tokens(ranked.into_iter().take(keep).map(|(w, _)| w).collect())
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text)
            .iter()
            .map(|w| self.token_id(w).unwrap_or(self.unk_id()))
            .collect()
    }

    /// Joins tokens with single spaces, without a space before closing punctuation.
    /// End-of-text tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos_id() {
                continue;
            }
            let t = self.token(id).unwrap_or(UNK_TOKEN);
            let closing = t.len() == 1 && matches!(t, "." | "," | "!" | "?" | ";" | ":" | ")");
            if !out.is_empty() && !closing {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut tok: WordTokenizer = read_json(path)?;
        tok.rebuild_index();
        Ok(tok)
    }
}
