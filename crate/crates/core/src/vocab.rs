//! Toy word-level tokenizer over the label corpus.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{config, contract, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<mask>", "<unk>"];

/// Padded token ids with the position of the end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub eos: usize,
}

impl TokenSequence {
    /// Positions of word tokens (between SOS and EOS).
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        1..self.eos
    }

    /// Position of the first EOS token, for sequences built by hand.
    pub fn find_eos(ids: &[usize]) -> Result<usize> {
        ids.iter()
            .position(|&t| t == EOS)
            .ok_or_else(|| contract("token sequence has no EOS token"))
    }
}

/// Lowercases and splits on whitespace and punctuation.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Special tokens followed by corpus words in order of first appearance.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        for t in texts {
            for w in normalize(t) {
                if !v.index.contains_key(&w) {
                    v.push(&w);
                }
            }
        }
        v
    }

    fn push(&mut self, tok: &str) {
        self.index.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// `[SOS, words.., EOS, PAD..]` of length `max_len`. Words beyond
    /// `max_len - 2` are dropped.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let words = normalize(text);
        let keep = words.len().min(max_len.saturating_sub(2));
        let mut ids = Vec::with_capacity(max_len);
        ids.push(SOS);
        ids.extend(words[..keep].iter().map(|w| self.id(w)));
        let eos = ids.len();
        ids.push(EOS);
        ids.resize(max_len.max(ids.len()), PAD);
        TokenSequence { ids, eos }
    }

    /// Words between SOS and EOS, space separated.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .skip_while(|&&t| t == SOS)
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t != PAD)
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, line index = id.
    pub fn to_file_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_file_text(text: &str) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if i < SPECIALS.len() && line != SPECIALS[i] {
                return Err(config(format!("vocabulary line {} must be {}", i + 1, SPECIALS[i])));
            }
            if v.index.contains_key(line) {
                return Err(config(format!("duplicate vocabulary token {line:?}")));
            }
            v.push(line);
        }
        if v.len() < SPECIALS.len() {
            return Err(config("vocabulary is missing special tokens"));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_corpus(["a video of red square moving left", "blue square moving up"])
    }

    #[test]
    fn empty_text_is_framed() {
        let t = vocab().tokenize("", 5);
        assert_eq!(t.ids, [SOS, EOS, PAD, PAD, PAD]);
        assert_eq!(t.eos, 1);
    }

    #[test]
    fn direct_lookup() {
        let v = vocab();
        let t = v.tokenize("Moving, LEFT!", 6);
        assert_eq!(t.ids, [SOS, v.id("moving"), v.id("left"), EOS, PAD, PAD]);
        assert_eq!(v.id("purple"), UNK);
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::from_file_text(&v.to_file_text()).unwrap(), v);
        assert!(Vocab::from_file_text("a\nb\n").is_err());
    }

    #[test]
    fn truncates_long_text_keeping_eos() {
        let v = vocab();
        let t = v.tokenize("red red red red red", 4);
        assert_eq!(t.ids, [SOS, v.id("red"), v.id("red"), EOS]);
    }
}
