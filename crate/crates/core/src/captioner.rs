//! Implicit captioner: a trainable MLP that projects the frozen image
//! embedding into a pseudo text-embedding sequence for the UNet's
//! cross-attention. These are the only trainable parameters on the
//! feature-extraction path; the "empty" mode feeds the fixed embedding of
//! the all-padding token sequence instead and ignores the image entirely.

use crate::nn::{Binding, Init, Linear, ParamSet};
use crate::tensor::{ArrD, Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Which caption source feeds the UNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionerMode {
    Implicit,
    Empty,
}

impl CaptionerMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "implicit" => Some(CaptionerMode::Implicit),
            "empty" => Some(CaptionerMode::Empty),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CaptionerMode::Implicit => "implicit",
            CaptionerMode::Empty => "empty",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaptionerConfig {
    /// Length of the emitted pseudo-token sequence.
    pub pseudo_tokens: usize,
    pub hidden_dim: usize,
    /// Dimension of the pooled image embedding (input).
    pub image_dim: usize,
    /// Per-token embedding dimension (output; must match the UNet text dim).
    pub text_dim: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            pseudo_tokens: 8,
            hidden_dim: 128,
            image_dim: 64,
            text_dim: 64,
        }
    }
}

/// Two-hidden-layer MLP emitting `pseudo_tokens x text_dim`.
pub struct ImplicitCaptioner {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    /// Cached embedding of the empty token sequence `[L, text_dim]`.
    empty_sequence: ArrD,
    pub cfg: CaptionerConfig,
}

impl ImplicitCaptioner {
    /// Registers trainable parameters under `captioner.*` in `ps`.
    pub fn new(
        ps: &mut ParamSet,
        cfg: CaptionerConfig,
        empty_sequence: ArrD,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc1 = Linear::new(
            ps,
            "captioner.fc1",
            cfg.image_dim,
            cfg.hidden_dim,
            Init::Xavier,
            true,
            true,
            rng,
        );
        let fc2 = Linear::new(
            ps,
            "captioner.fc2",
            cfg.hidden_dim,
            cfg.hidden_dim,
            Init::Xavier,
            true,
            true,
            rng,
        );
        let fc3 = Linear::new(
            ps,
            "captioner.fc3",
            cfg.hidden_dim,
            cfg.pseudo_tokens * cfg.text_dim,
            Init::Xavier,
            true,
            true,
            rng,
        );
        ImplicitCaptioner {
            fc1,
            fc2,
            fc3,
            empty_sequence,
            cfg,
        }
    }

    /// Produce the caption context `[B, L, text_dim]` for a batch of pooled
    /// image embeddings `[B, image_dim]`.
    pub fn forward(
        &self,
        t: &Tape,
        bind: &Binding,
        pooled: &ArrD,
        mode: CaptionerMode,
    ) -> Var {
        let b = pooled.shape()[0];
        match mode {
            CaptionerMode::Implicit => {
                let x = t.constant(pooled.clone());
                let h = t.silu(self.fc1.forward(t, bind, x));
                let h = t.silu(self.fc2.forward(t, bind, h));
                let flat = self.fc3.forward(t, bind, h); // [B, L*d]
                t.reshape(flat, &[b, self.cfg.pseudo_tokens, self.cfg.text_dim])
            }
            CaptionerMode::Empty => {
                let (l, d) = (
                    self.empty_sequence.shape()[0],
                    self.empty_sequence.shape()[1],
                );
                let one = self
                    .empty_sequence
                    .clone()
                    .into_shape_with_order(ndarray::IxDyn(&[1, l, d]))
                    .unwrap();
                let mut stacked = ArrD::zeros(ndarray::IxDyn(&[b, l, d]));
                for bi in 0..b {
                    stacked
                        .index_axis_mut(ndarray::Axis(0), bi)
                        .assign(&one.index_axis(ndarray::Axis(0), 0));
                }
                t.constant(stacked)
            }
        }
    }
}
