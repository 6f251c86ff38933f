use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;

use crate::digest::digest_parts;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

const SPECIALS: [&str; NUM_SPECIAL as usize] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

/// Whitespace word-level tokenizer with a frequency-ranked vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Keeps the `max_vocab - NUM_SPECIAL` most frequent words; ties are
    /// broken lexicographically so the result is independent of input order.
    pub fn build<'a, I>(texts: I, max_vocab: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_vocab.saturating_sub(NUM_SPECIAL as usize);
        let words = ranked.into_iter().take(keep).map(|(t, _)| t.to_string());
        Self::from_words(words)
    }

    fn from_words(words: impl Iterator<Item = String>) -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// `[CLS]` followed by the leading word ids, truncated to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        std::iter::once(CLS_ID)
            .chain(text.split_whitespace().map(|t| self.id(t)))
            .take(max_len)
            .collect()
    }

    /// Encodes and right-pads a batch to its longest member.
    pub fn encode_batch<'a, I>(&self, texts: I, max_len: usize) -> Array2<u32>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let rows: Vec<Vec<u32>> = texts.into_iter().map(|t| self.encode(t, max_len)).collect();
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Array2::from_elem((rows.len(), width), PAD_ID);
        for (r, row) in rows.iter().enumerate() {
            for (c, &id) in row.iter().enumerate() {
                out[[r, c]] = id;
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        digest_parts(&self.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = body.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::format("vocabulary", "special tokens missing or out of order"));
        }
        Ok(Self::from_words(lines[SPECIALS.len()..].iter().map(|s| s.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_by_frequency_then_name() {
        let tok = Tokenizer::build(["b a a", "c b a"], 100);
        assert_eq!(tok.token(NUM_SPECIAL), Some("a"));
        assert_eq!(tok.token(NUM_SPECIAL + 1), Some("b"));
        assert_eq!(tok.token(NUM_SPECIAL + 2), Some("c"));
        assert_eq!(tok.vocab_size(), 7);
    }

    #[test]
    fn caps_vocabulary() {
        let tok = Tokenizer::build(["a b c d e"], 6);
        assert_eq!(tok.vocab_size(), 6);
        assert_eq!(tok.id("e"), UNK_ID);
    }

    #[test]
    fn truncation_keeps_leading_tokens() {
        let tok = Tokenizer::build(["a b c d"], 100);
        let ids = tok.encode("a b c d", 3);
        assert_eq!(ids, vec![CLS_ID, tok.id("a"), tok.id("b")]);
    }

    #[test]
    fn batch_is_right_padded() {
        let tok = Tokenizer::build(["a b c"], 100);
        let batch = tok.encode_batch(["a", "a b c"], 16);
        assert_eq!(batch.dim(), (2, 4));
        assert_eq!(batch[[0, 2]], PAD_ID);
        assert_eq!(batch[[1, 3]], tok.id("c"));
    }

    #[test]
    fn save_load_round_trip() {
        let tok = Tokenizer::build(["x y z y"], 100);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        tok.save(&path).unwrap();
        let back = Tokenizer::load(&path).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.digest(), tok.digest());
    }
}
