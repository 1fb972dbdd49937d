//! Frozen toy text encoder: token embeddings plus one transformer block,
//! all weights drawn once from a named seed and never updated.

use super::tokenizer::{TokenSequence, Tokenizer, PAD_ID};
use crate::nn::{Attention, FeedForward, Init, LayerNorm, ParamId, ParamSet};
use crate::tensor::{ArrD, Tape};
use ndarray::{Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-token sequence embedding plus a pooled summary vector.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    /// `[L, d]` per-token embeddings.
    pub sequence: ArrD,
    /// `[d]` mean over content tokens (over all positions for empty text).
    pub pooled: ArrD,
}

#[derive(Clone, Debug)]
pub struct TextEncoderConfig {
    pub vocab_size: u32,
    pub max_len: usize,
    pub dim: usize,
    pub ffn_hidden: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: 4096,
            max_len: 16,
            dim: 64,
            ffn_hidden: 128,
            seed: 01,
        }
    }
}

pub struct TextEncoder {
    params: ParamSet,
    token_emb: ParamId,
    pos_emb: ParamId,
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln_out: LayerNorm,
    pub cfg: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57_e4c0);
        let token_emb = ps.add(
            "text.token_emb",
            Init::Normal(1.0).sample(&[cfg.vocab_size as usize, cfg.dim], cfg.dim, &mut rng),
            false,
        );
        let pos_emb = ps.add(
            "text.pos_emb",
            Init::Normal(0.2).sample(&[cfg.max_len, cfg.dim], cfg.dim, &mut rng),
            false,
        );
        let ln1 = LayerNorm::new(&mut ps, "text.ln1", cfg.dim, false, &mut rng);
        let attn = Attention::new(&mut ps, "text.attn", cfg.dim, cfg.dim, false, &mut rng);
        let ln2 = LayerNorm::new(&mut ps, "text.ln2", cfg.dim, false, &mut rng);
        let ffn = FeedForward::new(&mut ps, "text.ffn", cfg.dim, cfg.ffn_hidden, false, &mut rng);
        let ln_out = LayerNorm::new(&mut ps, "text.ln_out", cfg.dim, false, &mut rng);
        TextEncoder {
            params: ps,
            token_emb,
            pos_emb,
            ln1,
            attn,
            ln2,
            ffn,
            ln_out,
            cfg,
        }
    }

    /// Encode a token sequence. Deterministic; runs on a private tape with
    /// every parameter bound as a constant.
    pub fn encode(&self, tokens: &TokenSequence) -> TextEmbedding {
        assert_eq!(tokens.len(), self.cfg.max_len, "token sequence length");
        let d = self.cfg.dim;
        let l = self.cfg.max_len;
        let emb = self.params.get(self.token_emb);
        let pos = self.params.get(self.pos_emb);
        let mut x = ArrD::zeros(IxDyn(&[1, l, d]));
        for (i, &id) in tokens.tokens.iter().enumerate() {
            let row = emb.index_axis(Axis(0), id as usize);
            let prow = pos.index_axis(Axis(0), i);
            for c in 0..d {
                x[[0, i, c]] = row[c] + prow[c];
            }
        }
        let t = Tape::new();
        let bind = self.params.bind_frozen(&t);
        let xv = t.constant(x);
        let h = t.add(xv, self.attn.forward(&t, &bind, self.ln1.forward(&t, &bind, xv), self.ln1.forward(&t, &bind, xv)));
        let h = t.add(h, self.ffn.forward(&t, &bind, self.ln2.forward(&t, &bind, h)));
        let out = self.ln_out.forward(&t, &bind, h);
        let seq = t
            .value(out)
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(&[l, d]))
            .unwrap();
        let pool_len = if tokens.content_len > 0 {
            tokens.content_len
        } else {
            l
        };
        let mut pooled = ArrD::zeros(IxDyn(&[d]));
        for i in 0..pool_len {
            for c in 0..d {
                pooled[[c]] += seq[[i, c]] / pool_len as f64;
            }
        }
        TextEmbedding {
            sequence: seq,
            pooled,
        }
    }

    /// Embedding of the all-padding sequence; the "empty caption" input.
    pub fn encode_empty(&self) -> TextEmbedding {
        let seq = TokenSequence {
            tokens: vec![PAD_ID; self.cfg.max_len],
            content_len: 0,
        };
        self.encode(&seq)
    }

    /// Convenience: tokenize with `tok` and encode.
    pub fn encode_text(&self, tok: &Tokenizer, text: &str) -> TextEmbedding {
        self.encode(&tok.tokenize(text))
    }

    /// Snapshot of all parameter tensors, for frozen-weight assertions.
    pub fn param_snapshot(&self) -> Vec<(String, ArrD)> {
        self.params
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect()
    }
}
