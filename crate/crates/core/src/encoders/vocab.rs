//! Category vocabularies and their text-embedding matrices.

use super::text::TextEncoder;
use super::tokenizer::{split_words, Tokenizer};
use crate::error::{Error, Result};
use crate::tensor::ArrD;
use ndarray::IxDyn;
use std::collections::BTreeSet;
use std::path::Path;

/// Ordered list of category names with thing/stuff flags and the prompt
/// templates used to embed them. The category index doubles as the
/// classifier column, so ordering is part of the contract.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    names: Vec<String>,
    isthing: Vec<bool>,
    templates: Vec<String>,
}

impl Vocabulary {
    pub fn new(entries: Vec<(String, bool)>) -> Result<Self> {
        Self::with_templates(entries, vec!["{}".to_string()])
    }

    pub fn with_templates(entries: Vec<(String, bool)>, templates: Vec<String>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("vocabulary must not be empty"));
        }
        if templates.is_empty() {
            return Err(Error::invalid("vocabulary needs at least one template"));
        }
        for t in &templates {
            if t.matches("{}").count() != 1 {
                return Err(Error::invalid(format!(
                    "template must contain exactly one {{}} placeholder: {t:?}"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &entries {
            let norm = normalized_name(name);
            if norm.is_empty() {
                return Err(Error::invalid(format!("empty category name: {name:?}")));
            }
            if !seen.insert(norm.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate category name after normalization: {norm:?}"
                )));
            }
        }
        let (names, isthing) = entries.into_iter().unzip();
        Ok(Vocabulary {
            names,
            isthing,
            templates,
        })
    }

    /// Read `name,thing|stuff` lines (with `#` comments) from a file.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, kind) = line.rsplit_once(',').ok_or_else(|| {
                Error::invalid(format!("vocabulary line must be `name,thing|stuff`: {line:?}"))
            })?;
            let isthing = match kind.trim() {
                "thing" => true,
                "stuff" => false,
                other => {
                    return Err(Error::invalid(format!(
                        "category kind must be thing or stuff, got {other:?}"
                    )))
                }
            };
            entries.push((name.trim().to_string(), isthing));
        }
        Self::new(entries)
    }

    /// Templates from a file, one per line, `#` comments.
    pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<String>> {
        parse_templates(&std::fs::read_to_string(path)?)
    }

    pub fn builtin_templates() -> Vec<String> {
        parse_templates(include_str!("../../assets/templates.txt")).expect("builtin templates")
    }

    pub fn set_templates(&mut self, templates: Vec<String>) -> Result<()> {
        let rebuilt = Self::with_templates(
            self.names
                .iter()
                .cloned()
                .zip(self.isthing.iter().copied())
                .collect(),
            templates,
        )?;
        *self = rebuilt;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn is_thing(&self, k: usize) -> bool {
        self.isthing[k]
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let norm = normalized_name(name);
        self.names.iter().position(|n| normalized_name(n) == norm)
    }

    pub fn thing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.isthing[k]).collect()
    }
}

fn normalized_name(name: &str) -> String {
    split_words(name).join(" ")
}

/// `[K, d]` matrix of L2-normalized per-category embeddings; row order
/// matches the vocabulary.
#[derive(Clone, Debug)]
pub struct VocabularyEmbedding {
    pub matrix: ArrD,
}

impl VocabularyEmbedding {
    pub fn num_categories(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.matrix
            .index_axis(ndarray::Axis(0), k)
            .iter()
            .copied()
            .collect()
    }
}

/// Embed every category: instantiate each template with the name, encode,
/// average the pooled embeddings over templates, then L2-normalize.
pub fn embed_vocabulary(
    encoder: &TextEncoder,
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
) -> VocabularyEmbedding {
    let d = encoder.cfg.dim;
    let k = vocab.len();
    let mut matrix = ArrD::zeros(IxDyn(&[k, d]));
    for (ki, name) in vocab.names().iter().enumerate() {
        let mut acc = vec![0.0; d];
        for tpl in vocab.templates() {
            let prompt = tpl.replace("{}", name);
            let emb = encoder.encode_text(tokenizer, &prompt);
            for (a, v) in acc.iter_mut().zip(emb.pooled.iter()) {
                *a += v / vocab.templates().len() as f64;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (c, v) in acc.iter().enumerate() {
            matrix[[ki, c]] = v / norm;
        }
    }
    VocabularyEmbedding { matrix }
}

/// L2-normalize a plain vector (helper shared by word embedding users).
pub fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm).collect()
}

fn parse_templates(text: &str) -> Result<Vec<String>> {
    let templates: Vec<String> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if templates.is_empty() {
        return Err(Error::invalid("template file has no templates"));
    }
    for t in &templates {
        if t.matches("{}").count() != 1 {
            return Err(Error::invalid(format!(
                "template must contain exactly one {{}} placeholder: {t:?}"
            )));
        }
    }
    Ok(templates)
}

#[cfg(test)]
mod tests {
    use super::super::text::{TextEncoder, TextEncoderConfig};
    use super::super::tokenizer::{SynonymMap, Tokenizer};
    use super::*;

    fn setup() -> (TextEncoder, Tokenizer) {
        (
            TextEncoder::new(TextEncoderConfig::default()),
            Tokenizer::new(4096, 16, SynonymMap::builtin()),
        )
    }

    fn toy_vocab() -> Vocabulary {
        Vocabulary::new(vec![
            ("square".into(), true),
            ("circle".into(), true),
            ("grass".into(), false),
        ])
        .unwrap()
    }

    #[test]
    fn rejects_duplicates_and_bad_templates() {
        assert!(Vocabulary::new(vec![
            ("dog".into(), true),
            ("Dog.".into(), true)
        ])
        .is_err());
        assert!(Vocabulary::with_templates(
            vec![("dog".into(), true)],
            vec!["no placeholder".into()]
        )
        .is_err());
        assert!(Vocabulary::with_templates(
            vec![("dog".into(), true)],
            vec!["{} and {}".into()]
        )
        .is_err());
    }

    #[test]
    fn parse_file_format() {
        let v = Vocabulary::parse("# comment\nsquare,thing\ngrass,stuff\n").unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.is_thing(0));
        assert!(!v.is_thing(1));
        assert!(Vocabulary::parse("square,animal").is_err());
    }

    #[test]
    fn embedding_rows_are_unit_norm_and_ordered() {
        let (enc, tok) = setup();
        let vocab = toy_vocab();
        let emb = embed_vocabulary(&enc, &tok, &vocab);
        assert_eq!(emb.matrix.shape(), &[3, 64]);
        for k in 0..3 {
            let n: f64 = emb.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {k} norm {n}");
        }
        // row order matches vocabulary order: row 0 must equal the
        // normalized single-template embedding of "square"
        let direct = l2_normalized(
            enc.encode_text(&tok, "square")
                .pooled
                .as_slice()
                .unwrap(),
        );
        for (a, b) in emb.row(0).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_template_ensemble_matches_explicit_average() {
        let (enc, tok) = setup();
        let mut vocab = toy_vocab();
        vocab
            .set_templates(vec!["{}".into(), "a photo of a {}".into()])
            .unwrap();
        let emb = embed_vocabulary(&enc, &tok, &vocab);
        // oracle: explicit two-call average, then normalize
        let e1 = enc.encode_text(&tok, "circle").pooled;
        let e2 = enc.encode_text(&tok, "a photo of a circle").pooled;
        let avg: Vec<f64> = e1
            .iter()
            .zip(e2.iter())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let expect = l2_normalized(&avg);
        for (a, b) in emb.row(1).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn synonym_substitution_gives_identical_rows() {
        let (enc, tok) = setup();
        let v1 = toy_vocab();
        let v2 = Vocabulary::new(vec![
            ("box".into(), true),
            ("disc".into(), true),
            ("lawn".into(), false),
        ])
        .unwrap();
        let e1 = embed_vocabulary(&enc, &tok, &v1);
        let e2 = embed_vocabulary(&enc, &tok, &v2);
        assert_eq!(e1.matrix, e2.matrix);
    }
}
