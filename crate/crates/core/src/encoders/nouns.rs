//! Caption noun extraction against a bundled lexicon.

use super::tokenizer::split_words;
use crate::error::Result;
use std::collections::BTreeSet;
use std::path::Path;

/// Whitelist of nouns; words outside the lexicon (articles, colors,
/// prepositions) never become grounding targets.
#[derive(Clone, Debug)]
pub struct Lexicon {
    words: BTreeSet<String>,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../../assets/lexicon.txt"))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    /// One noun per line, `#` comments.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        Lexicon { words }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Extract up to `k_word` lexicon nouns from a caption, in caption order,
/// duplicates removed at first occurrence. A caption without nouns yields an
/// empty list; callers must then skip grounding for the pair.
pub fn extract_nouns(caption: &str, k_word: usize, lexicon: &Lexicon) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for word in split_words(caption) {
        if out.len() >= k_word {
            break;
        }
        if lexicon.contains(&word) && seen.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_and_stopwords_are_excluded() {
        let lex = Lexicon::builtin();
        let nouns = extract_nouns("a red square beside a blue circle", 8, &lex);
        assert_eq!(nouns, vec!["square", "circle"]);
    }

    #[test]
    fn empty_caption_yields_empty_list() {
        let lex = Lexicon::builtin();
        assert!(extract_nouns("", 8, &lex).is_empty());
        assert!(extract_nouns("the very big and", 8, &lex).is_empty());
    }

    #[test]
    fn keeps_first_k_in_caption_order() {
        let lex = Lexicon::parse("n0\nn1\nn2\nn3\nn4\nn5\nn6\nn7\nn8\nn9");
        let caption = "n0 n1 n2 n3 n4 n5 n6 n7 n8 n9";
        let nouns = extract_nouns(caption, 8, &lex);
        assert_eq!(nouns.len(), 8);
        assert_eq!(nouns[0], "n0");
        assert_eq!(nouns[7], "n7");
    }

    #[test]
    fn duplicates_keep_first_occurrence() {
        let lex = Lexicon::builtin();
        let nouns = extract_nouns("a square and a square on grass", 8, &lex);
        assert_eq!(nouns, vec!["square", "grass"]);
    }
}
