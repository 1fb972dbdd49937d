//! Frozen toy text/image encoders, tokenization, noun extraction, and
//! vocabulary embedding with prompt ensembling.
//!
//! Both encoders are deterministic functions of their seed and are never
//! trained; the rest of the pipeline treats their outputs as fixed features.

pub mod image;
pub mod nouns;
pub mod text;
pub mod tokenizer;
pub mod vocab;

pub use image::{ImageEmbedding, ImageEncoder, ImageEncoderConfig};
pub use nouns::{extract_nouns, Lexicon};
pub use text::{TextEmbedding, TextEncoder, TextEncoderConfig};
pub use tokenizer::{SynonymMap, TokenSequence, Tokenizer, PAD_ID};
pub use vocab::{embed_vocabulary, l2_normalized, Vocabulary, VocabularyEmbedding};
