//! Toy text-conditioned denoising UNet.
//!
//! Three internal resolutions (strides 2, 4, 8 relative to the input), one
//! residual block plus one cross-attention block per resolution per side,
//! skip connections, and per-block output taps on the decoder path. The
//! cross-attention queries are visual tokens; keys and values come from the
//! text embedding sequence, so the extracted features depend on the caption.

use crate::error::{Error, Result};
use crate::nn::{Attention, Binding, Conv2d, GroupNorm, Init, LayerNorm, ParamId, ParamSet};
use crate::tensor::{ArrD, Tape, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct UNetConfig {
    pub base_width: usize,
    /// Channel multiplier per resolution; length = number of resolutions.
    pub channel_mult: Vec<usize>,
    pub text_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_width: 32,
            channel_mult: vec![1, 2, 2],
            text_dim: 64,
            time_dim: 64,
            groups: 8,
            seed: 2,
        }
    }
}

impl UNetConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.channel_mult
            .iter()
            .map(|m| m * self.base_width)
            .collect()
    }

    /// Total downsampling factor from input to the coarsest resolution.
    pub fn total_stride(&self) -> usize {
        1 << self.channel_mult.len()
    }

    /// Stride of decoder level `i` (0 = finest).
    pub fn level_stride(&self, level: usize) -> usize {
        2 << level
    }
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: ParamId,
    temb_bias: ParamId,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        time_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gn1 = GroupNorm::new(ps, &format!("{name}.gn1"), cin, groups.min(cin), false, rng);
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1, false, rng);
        let temb_proj = ps.add(
            format!("{name}.temb.weight"),
            Init::Xavier.sample(&[cout, time_dim], time_dim, rng),
            false,
        );
        let temb_bias = ps.add(
            format!("{name}.temb.bias"),
            Init::Zeros.sample(&[cout], time_dim, rng),
            false,
        );
        let gn2 = GroupNorm::new(ps, &format!("{name}.gn2"), cout, groups.min(cout), false, rng);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng);
        let skip = (cin != cout)
            .then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 0, false, rng));
        ResBlock {
            gn1,
            conv1,
            temb_proj,
            temb_bias,
            gn2,
            conv2,
            skip,
        }
    }

    /// `temb` is the precomputed time embedding vector (constant per call).
    fn forward(&self, t: &Tape, bind: &Binding, ps: &ParamSet, temb: &ArrD, x: Var) -> Var {
        let mut h = self.conv1.forward(t, bind, t.silu(self.gn1.forward(t, bind, x)));
        // project the time embedding outside the tape; all weights are frozen
        let w = ps.get(self.temb_proj);
        let b = ps.get(self.temb_bias);
        let cout = w.shape()[0];
        let mut shift = vec![0.0; cout];
        for (c, s) in shift.iter_mut().enumerate() {
            let mut acc = b[[c]];
            for (j, tv) in temb.iter().enumerate() {
                acc += w[[c, j]] * tv;
            }
            *s = acc;
        }
        let shift = t.constant(crate::tensor::arr(&[cout], shift));
        h = t.add_vec_c(h, shift);
        h = self.conv2.forward(t, bind, t.silu(self.gn2.forward(t, bind, h)));
        let res = match &self.skip {
            Some(conv) => conv.forward(t, bind, x),
            None => x,
        };
        t.add(h, res)
    }
}

struct CrossAttnBlock {
    ln: LayerNorm,
    attn: Attention,
}

impl CrossAttnBlock {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        text_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ln = LayerNorm::new(ps, &format!("{name}.ln"), dim, false, rng);
        let attn = Attention::new(ps, &format!("{name}.attn"), dim, text_dim, false, rng);
        CrossAttnBlock { ln, attn }
    }

    fn forward(&self, t: &Tape, bind: &Binding, x: Var, ctx: Var) -> Var {
        let sh = t.shape(x);
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let tokens = t.reshape(t.permute(x, &[0, 2, 3, 1]), &[b, h * w, c]);
        let normed = self.ln.forward(t, bind, tokens);
        let attended = self.attn.forward(t, bind, normed, ctx);
        let tokens = t.add(tokens, attended);
        t.permute(t.reshape(tokens, &[b, h, w, c]), &[0, 3, 1, 2])
    }
}

struct Level {
    res: ResBlock,
    attn: CrossAttnBlock,
}

/// Ordered decoder tap activations from one forward pass.
pub struct UNetTaps {
    /// Decoder activations, finest level first.
    pub taps: Vec<Var>,
    /// Stride of each tap relative to the input.
    pub strides: Vec<usize>,
    /// Final denoising output `[B, 3, H, W]`.
    pub output: Var,
}

pub struct UNet {
    params: ParamSet,
    stem: Conv2d,
    enc: Vec<Level>,
    down: Vec<Conv2d>,
    mid: Level,
    dec: Vec<Level>,
    up: Vec<Conv2d>,
    out_conv: Conv2d,
    time_w1: ParamId,
    time_w2: ParamId,
    pub cfg: UNetConfig,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00d1_f0e5);
        let widths = cfg.widths();
        let levels = widths.len();
        let stem = Conv2d::new(&mut ps, "unet.stem", 3, widths[0], 3, 2, 1, false, &mut rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..levels {
            enc.push(Level {
                res: ResBlock::new(
                    &mut ps,
                    &format!("unet.enc{i}.res"),
                    widths[i],
                    widths[i],
                    cfg.groups,
                    cfg.time_dim,
                    &mut rng,
                ),
                attn: CrossAttnBlock::new(
                    &mut ps,
                    &format!("unet.enc{i}.xattn"),
                    widths[i],
                    cfg.text_dim,
                    &mut rng,
                ),
            });
            if i + 1 < levels {
                down.push(Conv2d::new(
                    &mut ps,
                    &format!("unet.down{i}"),
                    widths[i],
                    widths[i + 1],
                    3,
                    2,
                    1,
                    false,
                    &mut rng,
                ));
            }
        }
        let mid = Level {
            res: ResBlock::new(
                &mut ps,
                "unet.mid.res",
                widths[levels - 1],
                widths[levels - 1],
                cfg.groups,
                cfg.time_dim,
                &mut rng,
            ),
            attn: CrossAttnBlock::new(
                &mut ps,
                "unet.mid.xattn",
                widths[levels - 1],
                cfg.text_dim,
                &mut rng,
            ),
        };
        // decoder, coarsest level first internally
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for i in (0..levels).rev() {
            dec.push(Level {
                res: ResBlock::new(
                    &mut ps,
                    &format!("unet.dec{i}.res"),
                    widths[i] * 2, // skip concat
                    widths[i],
                    cfg.groups,
                    cfg.time_dim,
                    &mut rng,
                ),
                attn: CrossAttnBlock::new(
                    &mut ps,
                    &format!("unet.dec{i}.xattn"),
                    widths[i],
                    cfg.text_dim,
                    &mut rng,
                ),
            });
            if i > 0 {
                up.push(Conv2d::new(
                    &mut ps,
                    &format!("unet.up{i}"),
                    widths[i],
                    widths[i - 1],
                    1,
                    1,
                    0,
                    false,
                    &mut rng,
                ));
            }
        }
        let out_conv = Conv2d::new(&mut ps, "unet.out", widths[0], 3, 3, 1, 1, false, &mut rng);
        let time_w1 = ps.add(
            "unet.time.w1",
            Init::Xavier.sample(&[cfg.time_dim, cfg.time_dim], cfg.time_dim, &mut rng),
            false,
        );
        let time_w2 = ps.add(
            "unet.time.w2",
            Init::Xavier.sample(&[cfg.time_dim, cfg.time_dim], cfg.time_dim, &mut rng),
            false,
        );
        UNet {
            params: ps,
            stem,
            enc,
            down,
            mid,
            dec,
            up,
            out_conv,
            time_w1,
            time_w2,
            cfg,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &Tape) -> Binding {
        self.params.bind(tape)
    }

    /// Sinusoidal time embedding pushed through the frozen two-layer MLP.
    fn time_embedding(&self, timestep: usize) -> ArrD {
        let d = self.cfg.time_dim;
        let half = d / 2;
        let mut basis = vec![0.0; d];
        for i in 0..half {
            let freq = (10000f64).powf(-(i as f64) / half as f64);
            let arg = timestep as f64 * freq;
            basis[i] = arg.sin();
            basis[half + i] = arg.cos();
        }
        let w1 = self.params.get(self.time_w1);
        let w2 = self.params.get(self.time_w2);
        let mut h = vec![0.0; d];
        for c in 0..d {
            let mut acc = 0.0;
            for (j, bv) in basis.iter().enumerate() {
                acc += w1[[c, j]] * bv;
            }
            // SiLU
            let s = 1.0 / (1.0 + (-acc).exp());
            h[c] = acc * s;
        }
        let mut out = vec![0.0; d];
        for c in 0..d {
            let mut acc = 0.0;
            for (j, hv) in h.iter().enumerate() {
                acc += w2[[c, j]] * hv;
            }
            out[c] = acc;
        }
        crate::tensor::arr(&[d], out)
    }

    /// Run the UNet on `x: [B, 3, H, W]` conditioned on the text sequence
    /// `ctx: [B, L, text_dim]` at diffusion step `timestep`.
    pub fn forward(
        &self,
        t: &Tape,
        bind: &Binding,
        x: Var,
        ctx: Var,
        timestep: usize,
    ) -> Result<UNetTaps> {
        let sh = t.shape(x);
        if sh.len() != 4 || sh[1] != 3 {
            return Err(Error::shape(format!("unet expects [B,3,H,W], got {sh:?}")));
        }
        let total = self.cfg.total_stride();
        if sh[2] % total != 0 || sh[3] % total != 0 {
            return Err(Error::shape(format!(
                "spatial size {}x{} not divisible by total downsampling factor {total}",
                sh[2], sh[3]
            )));
        }
        let csh = t.shape(ctx);
        if csh.len() != 3 || csh[0] != sh[0] || csh[2] != self.cfg.text_dim {
            return Err(Error::shape(format!(
                "text context must be [B,L,{}], got {csh:?}",
                self.cfg.text_dim
            )));
        }
        let temb = self.time_embedding(timestep);
        let levels = self.enc.len();

        let mut h = self.stem.forward(t, bind, x);
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = self.enc[i].res.forward(t, bind, &self.params, &temb, h);
            h = self.enc[i].attn.forward(t, bind, h, ctx);
            skips.push(h);
            if i + 1 < levels {
                h = self.down[i].forward(t, bind, h);
            }
        }
        h = self.mid.res.forward(t, bind, &self.params, &temb, h);
        h = self.mid.attn.forward(t, bind, h, ctx);

        let mut taps_rev: Vec<(usize, Var)> = Vec::with_capacity(levels);
        for (di, i) in (0..levels).rev().enumerate() {
            let cat = t.concat(1, &[h, skips[i]]);
            h = self.dec[di].res.forward(t, bind, &self.params, &temb, cat);
            h = self.dec[di].attn.forward(t, bind, h, ctx);
            taps_rev.push((self.cfg.level_stride(i), h));
            if i > 0 {
                h = self.up[di].forward(t, bind, t.nearest_up2(h));
            }
        }
        let output = self
            .out_conv
            .forward(t, bind, t.silu(t.nearest_up2(h)));

        taps_rev.reverse(); // finest first
        let strides = taps_rev.iter().map(|(s, _)| *s).collect();
        let taps = taps_rev.into_iter().map(|(_, v)| v).collect();
        Ok(UNetTaps {
            taps,
            strides,
            output,
        })
    }
}

/// Batch a list of per-item text sequences `[L, d]` into `[B, L, d]`.
pub fn stack_context(t: &Tape, seqs: &[Var]) -> Var {
    assert!(!seqs.is_empty());
    let sh = t.shape(seqs[0]);
    let expanded: Vec<Var> = seqs
        .iter()
        .map(|&s| t.reshape(s, &[1, sh[0], sh[1]]))
        .collect();
    t.concat(0, &expanded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::rand_arr;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_unet() -> UNet {
        UNet::new(UNetConfig {
            base_width: 8,
            channel_mult: vec![1, 2, 2],
            text_dim: 16,
            time_dim: 16,
            groups: 4,
            seed: 11,
        })
    }

    #[test]
    fn tap_resolutions_follow_architecture() {
        let unet = small_unet();
        let t = Tape::new();
        let bind = unet.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t.constant(rand_arr(&[1, 3, 64, 64], &mut rng));
        let ctx = t.constant(rand_arr(&[1, 4, 16], &mut rng));
        let taps = unet.forward(&t, &bind, x, ctx, 0).unwrap();
        assert_eq!(taps.strides, vec![2, 4, 8]);
        assert_eq!(t.shape(taps.taps[0]), &[1, 8, 32, 32]);
        assert_eq!(t.shape(taps.taps[1]), &[1, 16, 16, 16]);
        assert_eq!(t.shape(taps.taps[2]), &[1, 16, 8, 8]);
        assert_eq!(t.shape(taps.output), &[1, 3, 64, 64]);
    }

    #[test]
    fn forward_is_deterministic() {
        let unet = small_unet();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_arr(&[1, 3, 16, 16], &mut rng);
        let c0 = rand_arr(&[1, 4, 16], &mut rng);
        let run = || {
            let t = Tape::new();
            let bind = unet.bind(&t);
            let x = t.constant(x0.clone());
            let ctx = t.constant(c0.clone());
            let taps = unet.forward(&t, &bind, x, ctx, 0).unwrap();
            t.value(taps.taps[0]).as_ref().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn text_conditioning_is_live() {
        let unet = small_unet();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_arr(&[1, 3, 16, 16], &mut rng);
        let c0 = rand_arr(&[1, 4, 16], &mut rng);
        let c1 = rand_arr(&[1, 4, 16], &mut rng);
        let run = |ctx0: &crate::tensor::ArrD| {
            let t = Tape::new();
            let bind = unet.bind(&t);
            let x = t.constant(x0.clone());
            let ctx = t.constant(ctx0.clone());
            let taps = unet.forward(&t, &bind, x, ctx, 0).unwrap();
            taps.taps
                .iter()
                .map(|&v| t.value(v).iter().map(|a| a * a).sum::<f64>())
                .collect::<Vec<_>>()
        };
        let n0 = run(&c0);
        let n1 = run(&c1);
        assert!(
            n0.iter().zip(n1.iter()).any(|(a, b)| (a - b).abs() > 1e-9),
            "changing the text left every tap unchanged"
        );
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let unet = small_unet();
        let t = Tape::new();
        let bind = unet.bind(&t);
        let x = t.constant(ArrD::zeros(IxDyn(&[1, 3, 20, 20])));
        let ctx = t.constant(ArrD::zeros(IxDyn(&[1, 4, 16])));
        assert!(unet.forward(&t, &bind, x, ctx, 0).is_err());
    }

    #[test]
    fn gradients_flow_to_text_context() {
        // central finite differences on a 16x16 input, 64-bit
        let unet = small_unet();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_arr(&[1, 3, 16, 16], &mut rng);
        let c0 = rand_arr(&[1, 3, 16], &mut rng);
        let x1 = x0.clone();
        let err = crate::testkit::check_grad(
            &c0,
            move |t, ctx| {
                let bind = unet.bind(t);
                let x = t.constant(x1.clone());
                let taps = unet.forward(t, &bind, x, ctx, 0).unwrap();
                let mut acc = t.sum_all(t.mul(taps.taps[0], taps.taps[0]));
                for &tap in &taps.taps[1..] {
                    acc = t.add(acc, t.sum_all(t.mul(tap, tap)));
                }
                t.scale(acc, 1e-2)
            },
            1e-5,
        );
        assert!(err < 1e-3, "unet dctx: {err}");
    }
}
