//! Word-level tokenizer with synonym canonicalization.
//!
//! Token ids are stable FNV-1a hashes of the canonical word, so the mapping
//! needs no fitted vocabulary and is identical across runs and platforms.
//! Synonym groups alias every member to the group's first name before
//! hashing, which makes the frozen text encoder embed synonyms identically.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

/// Reserved padding id.
pub const PAD_ID: u32 = 0;

/// Fixed-length sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    /// Number of content (non-padding) tokens.
    pub content_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Maps words to their canonical synonym-group representative.
#[derive(Clone, Debug, Default)]
pub struct SynonymMap {
    canon: BTreeMap<String, String>,
    groups: Vec<Vec<String>>,
}

impl SynonymMap {
    pub fn empty() -> Self {
        SynonymMap::default()
    }

    /// Bundled default groups.
    pub fn builtin() -> Self {
        Self::parse(include_str!("../../assets/synonyms.txt")).expect("builtin synonyms")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One group per line, comma-separated names, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = SynonymMap::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let names: Vec<String> = line
                .split(',')
                .map(|w| normalize_word(w))
                .filter(|w| !w.is_empty())
                .collect();
            if names.len() < 2 {
                return Err(Error::invalid(format!(
                    "synonym group needs at least two names: {line:?}"
                )));
            }
            let canonical = names[0].clone();
            for n in &names {
                if let Some(prev) = map.canon.get(n) {
                    if prev != &canonical {
                        return Err(Error::invalid(format!(
                            "word {n:?} appears in two synonym groups"
                        )));
                    }
                }
                map.canon.insert(n.clone(), canonical.clone());
            }
            map.groups.push(names);
        }
        Ok(map)
    }

    pub fn canonical<'a>(&'a self, word: &'a str) -> &'a str {
        self.canon.get(word).map(String::as_str).unwrap_or(word)
    }

    pub fn groups(&self) -> &[Vec<String>] {
        &self.groups
    }

    /// The synonym partner of `name` (any other member of its group).
    pub fn partner(&self, name: &str) -> Option<&str> {
        let norm = normalize_word(name);
        self.groups.iter().find_map(|g| {
            if g.iter().any(|m| m == &norm) {
                g.iter().find(|m| *m != &norm).map(String::as_str)
            } else {
                None
            }
        })
    }
}

/// Deterministic word tokenizer.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub vocab_size: u32,
    pub max_len: usize,
    synonyms: SynonymMap,
}

impl Tokenizer {
    pub fn new(vocab_size: u32, max_len: usize, synonyms: SynonymMap) -> Self {
        assert!(vocab_size > 1, "vocab must leave room beyond padding");
        assert!(max_len >= 1);
        Tokenizer {
            vocab_size,
            max_len,
            synonyms,
        }
    }

    /// Id of one word after normalization and synonym canonicalization.
    pub fn word_id(&self, word: &str) -> u32 {
        let norm = normalize_word(word);
        let canon = self.synonyms.canonical(&norm);
        1 + (fnv1a64(canon.as_bytes()) % (self.vocab_size as u64 - 1)) as u32
    }

    /// Lowercase, strip punctuation, hash words, truncate/pad to `max_len`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let words = split_words(text);
        let mut tokens: Vec<u32> = words
            .iter()
            .take(self.max_len)
            .map(|w| self.word_id(w))
            .collect();
        let content_len = tokens.len();
        tokens.resize(self.max_len, PAD_ID);
        TokenSequence {
            tokens,
            content_len,
        }
    }

    pub fn synonyms(&self) -> &SynonymMap {
        &self.synonyms
    }
}

/// Lowercase and keep only alphanumeric characters.
pub fn normalize_word(word: &str) -> String {
    word.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(|c| c.to_lowercase())
        .collect()
}

/// Split text into normalized words, dropping empties.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

/// FNV-1a 64-bit hash; stable across platforms unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
