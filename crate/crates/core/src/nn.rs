//! Parameter storage and the small set of network layers shared by the
//! models: linear maps, convolutions, normalization, single-head attention.
//!
//! All parameters live in one [`ParamSet`] keyed by hierarchical names.
//! Each forward pass binds the set onto a fresh tape; trainable entries
//! become gradient leaves, frozen entries become constants, so the backward
//! pass never touches frozen weights.

use crate::tensor::{ArrD, PadMode, Tape, Var};
use crate::testkit::normal_sample;
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    /// He initialization: `std = sqrt(2 / fan_in)`.
    HeNormal,
    /// Xavier initialization: `std = sqrt(1 / fan_in)`.
    Xavier,
    Zeros,
    Ones,
    Constant(f64),
}

impl Init {
    pub fn sample(&self, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrD {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![*c; n],
            Init::Normal(std) => (0..n).map(|_| normal_sample(rng) * std).collect(),
            Init::HeNormal => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| normal_sample(rng) * std).collect()
            }
            Init::Xavier => {
                let std = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| normal_sample(rng) * std).collect()
            }
        };
        ArrD::from_shape_vec(IxDyn(shape), data).unwrap()
    }
}

/// Handle to one entry of a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamEntry {
    pub name: String,
    pub value: ArrD,
    pub trainable: bool,
}

/// Ordered, named collection of model parameters.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrD, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrD {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrD {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Names of trainable entries, sorted.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect();
        names.sort();
        names
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total number of scalar parameters (trainable, frozen).
    pub fn census(&self) -> (usize, usize) {
        let mut t = 0;
        let mut f = 0;
        for e in &self.entries {
            if e.trainable {
                t += e.value.len();
            } else {
                f += e.value.len();
            }
        }
        (t, f)
    }

    /// Register every parameter on `tape`: trainable entries as gradient
    /// leaves, frozen ones as constants.
    pub fn bind(&self, tape: &Tape) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Register every parameter as a constant (inference mode).
    pub fn bind_frozen(&self, tape: &Tape) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.constant(e.value.clone()))
            .collect();
        Binding { vars }
    }
}

/// Tape handles for one bound [`ParamSet`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

// ---- layers ----

#[derive(Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        bias: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add(
            format!("{name}.weight"),
            init.sample(&[dout, din], din, rng),
            trainable,
        );
        let b = bias.then(|| {
            ps.add(
                format!("{name}.bias"),
                Init::Zeros.sample(&[dout], din, rng),
                trainable,
            )
        });
        Linear { w, b }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        t.linear(x, bind.var(self.w), self.b.map(|b| bind.var(b)))
    }
}

#[derive(Clone, Copy)]
pub struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * ksize * ksize;
        let w = ps.add(
            format!("{name}.weight"),
            Init::HeNormal.sample(&[cout, cin, ksize, ksize], fan_in, rng),
            trainable,
        );
        let b = Some(ps.add(
            format!("{name}.bias"),
            Init::Zeros.sample(&[cout], fan_in, rng),
            trainable,
        ));
        Conv2d {
            w,
            b,
            stride,
            pad,
            mode: PadMode::Zeros,
        }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        t.conv2d(
            x,
            bind.var(self.w),
            self.b.map(|b| bind.var(b)),
            self.stride,
            self.pad,
            self.mode,
        )
    }
}

#[derive(Clone, Copy)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gamma = ps.add(
            format!("{name}.gamma"),
            Init::Ones.sample(&[dim], dim, rng),
            trainable,
        );
        let beta = ps.add(
            format!("{name}.beta"),
            Init::Zeros.sample(&[dim], dim, rng),
            trainable,
        );
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        t.layer_norm(x, bind.var(self.gamma), bind.var(self.beta), self.eps)
    }
}

#[derive(Clone, Copy)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        groups: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(channels % groups, 0, "group_norm channels/groups mismatch");
        let gamma = ps.add(
            format!("{name}.gamma"),
            Init::Ones.sample(&[channels], channels, rng),
            trainable,
        );
        let beta = ps.add(
            format!("{name}.beta"),
            Init::Zeros.sample(&[channels], channels, rng),
            trainable,
        );
        GroupNorm {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        t.group_norm(
            x,
            self.groups,
            bind.var(self.gamma),
            bind.var(self.beta),
            self.eps,
        )
    }
}

/// Single-head scaled dot-product attention with projections.
///
/// Queries come from `x: [B, L, D]`; keys and values from `ctx: [B, S, Dc]`.
/// For self-attention pass the same tensor for both.
#[derive(Clone, Copy)]
pub struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    dim: usize,
}

impl Attention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mk = |ps: &mut ParamSet, suffix: &str, din: usize, rng: &mut ChaCha8Rng| {
            Linear::new(
                ps,
                &format!("{name}.{suffix}"),
                din,
                dim,
                Init::Xavier,
                false,
                trainable,
                rng,
            )
        };
        let wq = mk(ps, "wq", dim, rng);
        let wk = mk(ps, "wk", ctx_dim, rng);
        let wv = mk(ps, "wv", ctx_dim, rng);
        let wo = Linear::new(
            ps,
            &format!("{name}.wo"),
            dim,
            dim,
            Init::Xavier,
            true,
            trainable,
            rng,
        );
        Attention { wq, wk, wv, wo, dim }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var, ctx: Var) -> Var {
        let q = self.wq.forward(t, bind, x); // [B, L, D]
        let k = self.wk.forward(t, bind, ctx); // [B, S, D]
        let v = self.wv.forward(t, bind, ctx);
        let scores = t.scale(t.bmm_nt(q, k), 1.0 / (self.dim as f64).sqrt());
        let attn = t.softmax_last(scores); // [B, L, S]
        let mixed = t.bmm_nn(attn, v); // [B, L, D]
        self.wo.forward(t, bind, mixed)
    }
}

/// Two-layer feed-forward block with SiLU.
#[derive(Clone, Copy)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc1 = Linear::new(
            ps,
            &format!("{name}.fc1"),
            dim,
            hidden,
            Init::Xavier,
            true,
            trainable,
            rng,
        );
        let fc2 = Linear::new(
            ps,
            &format!("{name}.fc2"),
            hidden,
            dim,
            Init::Xavier,
            true,
            trainable,
            rng,
        );
        FeedForward { fc1, fc2 }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        self.fc2.forward(t, bind, t.silu(self.fc1.forward(t, bind, x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{check_grad, rand_arr};
    use rand::SeedableRng;

    #[test]
    fn paramset_census_and_names() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _frozen = Linear::new(&mut ps, "enc.proj", 4, 8, Init::Xavier, true, false, &mut rng);
        let _train = Linear::new(&mut ps, "head.out", 8, 2, Init::Xavier, true, true, &mut rng);
        let (t, f) = ps.census();
        assert_eq!(t, 8 * 2 + 2);
        assert_eq!(f, 4 * 8 + 8);
        assert_eq!(ps.trainable_names(), vec!["head.out.bias", "head.out.weight"]);
    }

    #[test]
    fn frozen_params_get_no_grads() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frozen = Linear::new(&mut ps, "frozen", 3, 3, Init::Xavier, true, false, &mut rng);
        let train = Linear::new(&mut ps, "train", 3, 3, Init::Xavier, true, true, &mut rng);
        let tape = Tape::new();
        let bind = ps.bind(&tape);
        let x = tape.constant(rand_arr(&[2, 3], &mut rng));
        let y = train.forward(&tape, &bind, frozen.forward(&tape, &bind, x));
        let loss = tape.sum_all(tape.mul(y, y));
        let grads = tape.backward(loss);
        assert!(grads.get(bind.var(frozen.w)).is_none());
        assert!(grads.get(bind.var(train.w)).is_some());
    }

    #[test]
    fn grad_attention_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_arr(&[2, 4, 6], &mut rng);
        let ctx0 = rand_arr(&[2, 3, 5], &mut rng);
        let c1 = ctx0.clone();
        let err = check_grad(
            &x0,
            move |t, x| {
                let mut ps = ParamSet::new();
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let attn = Attention::new(&mut ps, "a", 6, 5, false, &mut rng);
                let bind = ps.bind(t);
                let ctx = t.constant(c1.clone());
                let y = attn.forward(t, &bind, x, ctx);
                t.sum_all(t.mul(y, y))
            },
            1e-6,
        );
        assert!(err < 5e-6, "attention dx: {err}");

        // gradient w.r.t. context (the path the captioner trains through)
        let x1 = x0.clone();
        let err = check_grad(
            &ctx0,
            move |t, ctx| {
                let mut ps = ParamSet::new();
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let attn = Attention::new(&mut ps, "a", 6, 5, false, &mut rng);
                let bind = ps.bind(t);
                let x = t.constant(x1.clone());
                let y = attn.forward(t, &bind, x, ctx);
                t.sum_all(t.mul(y, y))
            },
            1e-6,
        );
        assert!(err < 5e-6, "attention dctx: {err}");
    }
}
