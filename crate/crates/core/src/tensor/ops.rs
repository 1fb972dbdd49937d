//! Differentiable tape operations.

use super::{ArrD, Tape, Var};
use ndarray::{concatenate, Axis, Ix2, IxDyn, Slice};

fn as2(a: &ArrD) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va.as_ref() + vb.as_ref();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            &[a, b],
            Box::new(move |g, store| {
                if na {
                    store.accumulate(a.id, g.clone());
                }
                if nb {
                    store.accumulate(b.id, g.clone());
                }
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = va.as_ref() - vb.as_ref();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            &[a, b],
            Box::new(move |g, store| {
                if na {
                    store.accumulate(a.id, g.clone());
                }
                if nb {
                    store.accumulate(b.id, g.mapv(|x| -x));
                }
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va.as_ref() * vb.as_ref();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            &[a, b],
            Box::new(move |g, store| {
                if na {
                    store.accumulate(a.id, g * vb.as_ref());
                }
                if nb {
                    store.accumulate(b.id, g * va.as_ref());
                }
            }),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push_op(
            out,
            &[a],
            Box::new(move |g, store| store.accumulate(a.id, g.mapv(|x| x * c))),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push_op(
            out,
            &[a],
            Box::new(move |g, store| store.accumulate(a.id, g.clone())),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let v = self.push_op(out, &[a], Box::new(|_, _| unreachable!()));
        let y = self.value(v);
        self.replace_back(
            v,
            Box::new(move |g, store| store.accumulate(a.id, g * y.as_ref())),
        );
        v
    }

    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(f64::ln);
        self.push_op(
            out,
            &[a],
            Box::new(move |g, store| store.accumulate(a.id, g / va.as_ref())),
        )
    }

    pub fn recip(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| 1.0 / x);
        self.push_op(
            out,
            &[a],
            Box::new(move |g, store| {
                let mut d = g / va.as_ref();
                d.zip_mut_with(va.as_ref(), |acc, &x| *acc = -*acc / x);
                store.accumulate(a.id, d);
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid_scalar);
        let v = self.push_op(out, &[a], Box::new(|_, _| unreachable!()));
        let y = self.value(v);
        self.replace_back(
            v,
            Box::new(move |g, store| {
                let mut d = g.clone();
                d.zip_mut_with(y.as_ref(), |acc, &s| *acc *= s * (1.0 - s));
                store.accumulate(a.id, d);
            }),
        );
        v
    }

    /// `x * sigmoid(x)`, the smooth nonlinearity used throughout the models.
    pub fn silu(&self, a: Var) -> Var {
        let va = self.value(a);
        // cache the sigmoid so the backward pass avoids a second exp sweep
        let sig = std::rc::Rc::new(va.mapv(sigmoid_scalar));
        let out = va.as_ref() * sig.as_ref();
        self.push_op(
            out,
            &[a],
            Box::new(move |g, store| {
                let mut d = g.clone();
                let mut it = va.iter().zip(sig.iter());
                d.mapv_inplace(|gv| {
                    let (&x, &s) = it.next().unwrap();
                    gv * s * (1.0 + x * (1.0 - s))
                });
                store.accumulate(a.id, d);
            }),
        )
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn mul_bcast_scalar(&self, a: Var, s: Var) -> Var {
        let (va, vs) = (self.value(a), self.value(s));
        assert_eq!(vs.len(), 1, "mul_bcast_scalar: scalar operand expected");
        let c = vs.iter().next().copied().unwrap();
        let out = va.mapv(|x| x * c);
        let (na, ns) = (self.needs_grad(a), self.needs_grad(s));
        self.push_op(
            out,
            &[a, s],
            Box::new(move |g, store| {
                if na {
                    store.accumulate(a.id, g.mapv(|x| x * c));
                }
                if ns {
                    let dot: f64 = g.iter().zip(va.iter()).map(|(x, y)| x * y).sum();
                    store.accumulate(s.id, super::arr(&[1], vec![dot]));
                }
            }),
        )
    }

    /// Add a per-channel vector `v: [C]` to `x: [B, C, H, W]`.
    pub fn add_vec_c(&self, x: Var, v: Var) -> Var {
        let (vx, vv) = (self.value(x), self.value(v));
        let sh = vx.shape().to_vec();
        assert_eq!(sh.len(), 4, "add_vec_c: expected [B,C,H,W]");
        assert_eq!(vv.len(), sh[1], "add_vec_c: channel mismatch");
        let mut out = vx.as_ref().clone();
        let vslice = vv.as_slice().unwrap().to_vec();
        for b in 0..sh[0] {
            for c in 0..sh[1] {
                out.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), c)
                    .mapv_inplace(|e| e + vslice[c]);
            }
        }
        let (nx, nv) = (self.needs_grad(x), self.needs_grad(v));
        self.push_op(
            out,
            &[x, v],
            Box::new(move |g, store| {
                if nx {
                    store.accumulate(x.id, g.clone());
                }
                if nv {
                    let mut dv = vec![0.0; sh[1]];
                    for b in 0..sh[0] {
                        for (c, dv_c) in dv.iter_mut().enumerate() {
                            *dv_c += g
                                .index_axis(Axis(0), b)
                                .index_axis(Axis(0), c)
                                .sum();
                        }
                    }
                    store.accumulate(v.id, super::arr(&[sh[1]], dv));
                }
            }),
        )
    }

    // ---- matrix products ----

    /// `a: [m,k] · b: [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = as2(&va).dot(&as2(&vb)).into_dyn();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            &[a, b],
            Box::new(move |g, store| {
                let g2 = as2(g);
                if na {
                    store.accumulate(a.id, g2.dot(&as2(&vb).t()).into_dyn());
                }
                if nb {
                    store.accumulate(b.id, as2(&va).t().dot(&g2).into_dyn());
                }
            }),
        )
    }

    /// `a: [m,k] · b^T, b: [n,k] -> [m,n]`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = as2(&va).dot(&as2(&vb).t()).into_dyn();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            &[a, b],
            Box::new(move |g, store| {
                let g2 = as2(g);
                if na {
                    store.accumulate(a.id, g2.dot(&as2(&vb)).into_dyn());
                }
                if nb {
                    store.accumulate(b.id, g2.t().dot(&as2(&va)).as_standard_layout().to_owned().into_dyn());
                }
            }),
        )
    }

    /// Batched `a: [B,m,k] · b: [B,k,n] -> [B,m,n]`.
    pub fn bmm_nn(&self, a: Var, b: Var) -> Var {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a: [B,m,k] · b^T, b: [B,n,k] -> [B,m,n]`.
    pub fn bmm_nt(&self, a: Var, b: Var) -> Var {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        assert_eq!(sa.len(), 3, "bmm: expected 3-d lhs");
        assert_eq!(sb.len(), 3, "bmm: expected 3-d rhs");
        assert_eq!(sa[0], sb[0], "bmm: batch mismatch");
        let bs = sa[0];
        let (m, k) = (sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = ArrD::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = va.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = vb.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let prod = if transpose_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            &[a, b],
            Box::new(move |g, store| {
                let mut da = na.then(|| ArrD::zeros(IxDyn(&[bs, m, k])));
                let mut db = nb.then(|| ArrD::zeros(IxDyn(&[bs, sb[1], sb[2]])));
                for i in 0..bs {
                    let gi = g.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let ai = va.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let bi = vb.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    if let Some(da) = da.as_mut() {
                        let d = if transpose_b { gi.dot(&bi) } else { gi.dot(&bi.t()) };
                        da.index_axis_mut(Axis(0), i).assign(&d);
                    }
                    if let Some(db) = db.as_mut() {
                        let d = if transpose_b { gi.t().dot(&ai) } else { ai.t().dot(&gi) };
                        db.index_axis_mut(Axis(0), i).assign(&d);
                    }
                }
                if let Some(da) = da {
                    store.accumulate(a.id, da);
                }
                if let Some(db) = db {
                    store.accumulate(b.id, db);
                }
            }),
        )
    }

    /// Affine map over the last axis: `x: [.., Din]`, `w: [Dout, Din]`,
    /// optional `b: [Dout]` -> `[.., Dout]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xsh = vx.shape().to_vec();
        let din = *xsh.last().expect("linear: scalar input");
        let dout = vw.shape()[0];
        assert_eq!(vw.shape()[1], din, "linear: weight/input dim mismatch");
        let rows: usize = xsh[..xsh.len() - 1].iter().product();
        let x2 = vx
            .view()
            .into_shape_with_order((rows, din))
            .expect("linear: non-contiguous input");
        let mut y2 = x2.dot(&as2(&vw).t());
        if let Some(bv) = b {
            let vb = self.value(bv);
            let bias = vb.view().into_shape_with_order(dout).unwrap();
            y2 += &bias;
        }
        let mut osh = xsh[..xsh.len() - 1].to_vec();
        osh.push(dout);
        let out = y2.into_shape_with_order(IxDyn(&osh)).unwrap();
        let nx = self.needs_grad(x);
        let nw = self.needs_grad(w);
        let nb = b.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        let parents: Vec<Var> = match b {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        self.push_op(
            out,
            &parents,
            Box::new(move |g, store| {
                let g2 = g.view().into_shape_with_order((rows, dout)).unwrap();
                if nx {
                    let dx = g2.dot(&as2(&vw));
                    store.accumulate(x.id, dx.into_shape_with_order(IxDyn(&xsh)).unwrap());
                }
                if nw {
                    let x2 = vx.view().into_shape_with_order((rows, din)).unwrap();
                    let dw = g2.t().dot(&x2).as_standard_layout().to_owned();
                    store.accumulate(w.id, dw.into_dyn());
                }
                if nb {
                    let db = g2.sum_axis(Axis(0));
                    store.accumulate(b.unwrap().id, db.into_dyn());
                }
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = vx
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push_op(
            out,
            &[x],
            Box::new(move |g, store| {
                let back = g.clone().into_shape_with_order(IxDyn(&old)).unwrap();
                store.accumulate(x.id, back);
            }),
        )
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let vx = self.value(x);
        let axes_v = axes.to_vec();
        let out = vx
            .as_ref()
            .clone()
            .permuted_axes(IxDyn(&axes_v))
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; axes_v.len()];
        for (i, &a) in axes_v.iter().enumerate() {
            inv[a] = i;
        }
        self.push_op(
            out,
            &[x],
            Box::new(move |g, store| {
                let back = g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                store.accumulate(x.id, back);
            }),
        )
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<(Var, bool)> = parts.iter().map(|p| (*p, self.needs_grad(*p))).collect();
        self.push_op(
            out,
            parts,
            Box::new(move |g, store| {
                let mut off = 0;
                for (i, (p, ng)) in ids.iter().enumerate() {
                    let len = lens[i];
                    if *ng {
                        let piece = g
                            .slice_axis(Axis(axis), Slice::from(off..off + len))
                            .as_standard_layout()
                            .to_owned();
                        store.accumulate(p.id, piece);
                    }
                    off += len;
                }
            }),
        )
    }

    /// Select index `i` along axis 0, dropping that axis.
    pub fn index_axis0(&self, x: Var, i: usize) -> Var {
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        let out = vx.index_axis(Axis(0), i).as_standard_layout().to_owned();
        self.push_op(
            out,
            &[x],
            Box::new(move |g, store| {
                let mut dx = ArrD::zeros(IxDyn(&sh));
                dx.index_axis_mut(Axis(0), i).assign(g);
                store.accumulate(x.id, dx);
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.sum();
        let sh = vx.shape().to_vec();
        self.push_op(
            super::arr(&[1], vec![s]),
            &[x],
            Box::new(move |g, store| {
                let gv = g[[0]];
                store.accumulate(x.id, ArrD::from_elem(IxDyn(&sh), gv));
            }),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- normalization & softmax ----

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        let k = *sh.last().expect("softmax_last: scalar input");
        let rows: usize = sh[..sh.len() - 1].iter().product();
        let x2 = vx.view().into_shape_with_order((rows, k)).unwrap();
        let mut out2 = ndarray::Array2::<f64>::zeros((rows, k));
        for r in 0..rows {
            let row = x2.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut orow = out2.row_mut(r);
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                let e = (v - m).exp();
                *o = e;
                z += e;
            }
            orow.mapv_inplace(|e| e / z);
        }
        let out = out2.into_shape_with_order(IxDyn(&sh)).unwrap();
        let v = self.push_op(out, &[x], Box::new(|_, _| unreachable!()));
        let y = self.value(v);
        let sh2 = sh.clone();
        self.replace_back(
            v,
            Box::new(move |g, store| {
                let k = *sh2.last().unwrap();
                let rows: usize = sh2[..sh2.len() - 1].iter().product();
                let g2 = g.view().into_shape_with_order((rows, k)).unwrap();
                let y2 = y.view().into_shape_with_order((rows, k)).unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((rows, k));
                for r in 0..rows {
                    let gr = g2.row(r);
                    let yr = y2.row(r);
                    let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    let mut dr = dx.row_mut(r);
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                        *d = yv * (gv - dot);
                    }
                }
                store.accumulate(x.id, dx.into_shape_with_order(IxDyn(&sh2)).unwrap().into_dyn());
            }),
        );
        v
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let sh = vx.shape().to_vec();
        let d = *sh.last().expect("layer_norm: scalar input");
        assert_eq!(vg.len(), d, "layer_norm: gamma dim mismatch");
        assert_eq!(vb.len(), d, "layer_norm: beta dim mismatch");
        let rows: usize = sh[..sh.len() - 1].iter().product();
        let x2 = vx.view().into_shape_with_order((rows, d)).unwrap();
        let gslice = vg.as_slice().unwrap().to_vec();
        let bslice = vb.as_slice().unwrap().to_vec();
        let mut xhat = ndarray::Array2::<f64>::zeros((rows, d));
        let mut inv_std = vec![0.0; rows];
        let mut out2 = ndarray::Array2::<f64>::zeros((rows, d));
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat[[r, c]] = xh;
                out2[[r, c]] = xh * gslice[c] + bslice[c];
            }
        }
        let out = out2.into_shape_with_order(IxDyn(&sh)).unwrap();
        let (nx, ng, nb) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |g, store| {
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                if ng || nb {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g2[[r, c]] * xhat[[r, c]];
                            db[c] += g2[[r, c]];
                        }
                    }
                    if ng {
                        store.accumulate(gamma.id, super::arr(&[d], dg));
                    }
                    if nb {
                        store.accumulate(beta.id, super::arr(&[d], db));
                    }
                }
                if nx {
                    let mut dx = ndarray::Array2::<f64>::zeros((rows, d));
                    for r in 0..rows {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..d {
                            let dxh = g2[[r, c]] * gslice[c];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[[r, c]];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for c in 0..d {
                            let dxh = g2[[r, c]] * gslice[c];
                            dx[[r, c]] =
                                inv_std[r] * (dxh - mean_dxhat - xhat[[r, c]] * mean_dxhat_xhat);
                        }
                    }
                    store.accumulate(x.id, dx.into_shape_with_order(IxDyn(&sh)).unwrap().into_dyn());
                }
            }),
        )
    }

    /// Group normalization for `[B, C, H, W]` with per-channel affine.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let sh = vx.shape().to_vec();
        assert_eq!(sh.len(), 4, "group_norm: expected [B,C,H,W]");
        let (bs, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(c % groups, 0, "group_norm: channels not divisible by groups");
        let cg = c / groups;
        let gsize = (cg * h * w) as f64;
        let gslice = vg.as_slice().unwrap().to_vec();
        let bslice = vb.as_slice().unwrap().to_vec();
        let xs = vx.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; bs * groups];
        let plane = h * w;
        for b in 0..bs {
            for gi in 0..groups {
                let start = b * c * plane + gi * cg * plane;
                let end = start + cg * plane;
                let chunk = &xs[start..end];
                let mean = chunk.iter().sum::<f64>() / gsize;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gsize;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * groups + gi] = is;
                for (off, &v) in chunk.iter().enumerate() {
                    let ch = gi * cg + off / plane;
                    let xh = (v - mean) * is;
                    xhat[start + off] = xh;
                    out[start + off] = xh * gslice[ch] + bslice[ch];
                }
            }
        }
        let out = super::arr(&sh, out);
        let (nx, ng, nb) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        let sh2 = sh.clone();
        self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |g, store| {
                let gs = g.as_slice().unwrap();
                if ng || nb {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for b in 0..bs {
                        for ch in 0..c {
                            let start = b * c * plane + ch * plane;
                            for off in 0..plane {
                                dg[ch] += gs[start + off] * xhat[start + off];
                                db[ch] += gs[start + off];
                            }
                        }
                    }
                    if ng {
                        store.accumulate(gamma.id, super::arr(&[c], dg));
                    }
                    if nb {
                        store.accumulate(beta.id, super::arr(&[c], db));
                    }
                }
                if nx {
                    let mut dx = vec![0.0; gs.len()];
                    for b in 0..bs {
                        for gi in 0..groups {
                            let start = b * c * plane + gi * cg * plane;
                            let end = start + cg * plane;
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for off in 0..(end - start) {
                                let ch = gi * cg + off / plane;
                                let dxh = gs[start + off] * gslice[ch];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xhat[start + off];
                            }
                            mean_dxh /= gsize;
                            mean_dxh_xh /= gsize;
                            let is = inv_std[b * groups + gi];
                            for off in 0..(end - start) {
                                let ch = gi * cg + off / plane;
                                let dxh = gs[start + off] * gslice[ch];
                                dx[start + off] =
                                    is * (dxh - mean_dxh - xhat[start + off] * mean_dxh_xh);
                            }
                        }
                    }
                    store.accumulate(x.id, super::arr(&sh2, dx));
                }
            }),
        )
    }

    /// Normalize each row of `x: [N, d]` to unit L2 norm (eps-floored).
    pub fn l2norm_rows(&self, x: Var) -> Var {
        let eps = 1e-12;
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        assert_eq!(sh.len(), 2, "l2norm_rows: expected [N, d]");
        let (n, d) = (sh[0], sh[1]);
        let x2 = vx.view().into_shape_with_order((n, d)).unwrap();
        let mut norms = vec![0.0; n];
        let mut out = ndarray::Array2::<f64>::zeros((n, d));
        for r in 0..n {
            let row = x2.row(r);
            let nn = (row.iter().map(|&v| v * v).sum::<f64>() + eps).sqrt();
            norms[r] = nn;
            for c in 0..d {
                out[[r, c]] = row[c] / nn;
            }
        }
        self.push_op(
            out.into_dyn(),
            &[x],
            Box::new(move |g, store| {
                let g2 = g.view().into_shape_with_order((n, d)).unwrap();
                let x2 = vx.view().into_shape_with_order((n, d)).unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((n, d));
                for r in 0..n {
                    let nn = norms[r];
                    let dot: f64 = g2.row(r).iter().zip(x2.row(r).iter()).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        dx[[r, c]] = g2[[r, c]] / nn - x2[[r, c]] * dot / (nn * nn * nn);
                    }
                }
                store.accumulate(x.id, dx.into_dyn());
            }),
        )
    }

    // ---- losses ----

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[usize]) -> Var {
        let vx = self.value(logits);
        let sh = vx.shape().to_vec();
        assert_eq!(sh.len(), 2, "cross_entropy_rows: expected [N, K]");
        let (n, k) = (sh[0], sh[1]);
        assert_eq!(targets.len(), n, "cross_entropy_rows: target count mismatch");
        let x2 = vx.view().into_shape_with_order((n, k)).unwrap();
        let tg = targets.to_vec();
        let mut total = 0.0;
        let mut probs = ndarray::Array2::<f64>::zeros((n, k));
        for r in 0..n {
            let row = x2.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for c in 0..k {
                let e = (row[c] - m).exp();
                probs[[r, c]] = e;
                z += e;
            }
            let lse = m + z.ln();
            total += lse - row[tg[r]];
            for c in 0..k {
                probs[[r, c]] /= z;
            }
        }
        let loss = total / n as f64;
        self.push_op(
            super::arr(&[1], vec![loss]),
            &[logits],
            Box::new(move |g, store| {
                let gv = g[[0]] / n as f64;
                let mut dx = probs.clone();
                for (r, &t) in tg.iter().enumerate() {
                    dx[[r, t]] -= 1.0;
                }
                dx.mapv_inplace(|v| v * gv);
                store.accumulate(logits.id, dx.into_dyn());
            }),
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and targets,
    /// computed in the numerically stable logits form.
    pub fn bce_with_logits_mean(&self, logits: Var, targets: &ArrD) -> Var {
        let vx = self.value(logits);
        assert_eq!(vx.shape(), targets.shape(), "bce: shape mismatch");
        let n = vx.len() as f64;
        let mut total = 0.0;
        for (&l, &t) in vx.iter().zip(targets.iter()) {
            total += l.max(0.0) - l * t + (-(l.abs())).exp().ln_1p();
        }
        let tg = targets.clone();
        self.push_op(
            super::arr(&[1], vec![total / n]),
            &[logits],
            Box::new(move |g, store| {
                let gv = g[[0]] / n;
                let mut dx = vx.as_ref().clone();
                dx.zip_mut_with(&tg, |l, &t| *l = (sigmoid_scalar(*l) - t) * gv);
                store.accumulate(logits.id, dx);
            }),
        )
    }

    /// Mean soft Dice loss over the leading axis of `logits: [M, ...]`.
    pub fn soft_dice_loss(&self, logits: Var, targets: &ArrD, smooth: f64) -> Var {
        let vx = self.value(logits);
        assert_eq!(vx.shape(), targets.shape(), "dice: shape mismatch");
        let m = vx.shape()[0];
        assert!(m > 0, "dice: empty batch");
        let inner: usize = vx.len() / m;
        let xs = vx.as_slice().unwrap();
        let ts = targets.as_slice().unwrap().to_vec();
        let mut loss = 0.0;
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let (mut a, mut p, mut gsum) = (0.0, 0.0, 0.0);
            for off in 0..inner {
                let pr = sigmoid_scalar(xs[i * inner + off]);
                let t = ts[i * inner + off];
                a += pr * t;
                p += pr;
                gsum += t;
            }
            loss += 1.0 - (2.0 * a + smooth) / (p + gsum + smooth);
            stats.push((a, p, gsum));
        }
        loss /= m as f64;
        let sh = vx.shape().to_vec();
        self.push_op(
            super::arr(&[1], vec![loss]),
            &[logits],
            Box::new(move |g, store| {
                let gv = g[[0]] / m as f64;
                let mut dx = vec![0.0; m * inner];
                for i in 0..m {
                    let (a, p, gsum) = stats[i];
                    let den = p + gsum + smooth;
                    for off in 0..inner {
                        let l = vx.as_slice().unwrap()[i * inner + off];
                        let pr = sigmoid_scalar(l);
                        let t = ts[i * inner + off];
                        // d/dp of (1 - (2a+s)/den): -(2 t den - (2a+s)) / den^2
                        let dd = -(2.0 * t * den - (2.0 * a + smooth)) / (den * den);
                        dx[i * inner + off] = gv * dd * pr * (1.0 - pr);
                    }
                }
                store.accumulate(logits.id, super::arr(&sh, dx));
            }),
        )
    }

    /// Weighted spatial pooling: `feat: [C, h, w]` pooled under fixed
    /// non-negative weights `[h, w]`. Zero-support weights fall back to the
    /// plain spatial mean.
    pub fn masked_pool(&self, feat: Var, weights: &ArrD) -> Var {
        let vf = self.value(feat);
        let sh = vf.shape().to_vec();
        assert_eq!(sh.len(), 3, "masked_pool: expected [C, h, w]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert_eq!(weights.shape(), &[h, w], "masked_pool: weight shape mismatch");
        let wsum: f64 = weights.sum();
        let plane = h * w;
        let wnorm: Vec<f64> = if wsum > 0.0 {
            weights.iter().map(|&v| v / wsum).collect()
        } else {
            vec![1.0 / plane as f64; plane]
        };
        let fs = vf.as_slice().unwrap();
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for p in 0..plane {
                acc += fs[ch * plane + p] * wnorm[p];
            }
            out[ch] = acc;
        }
        self.push_op(
            super::arr(&[c], out),
            &[feat],
            Box::new(move |g, store| {
                let mut dx = vec![0.0; c * plane];
                for ch in 0..c {
                    let gv = g[[ch]];
                    for p in 0..plane {
                        dx[ch * plane + p] = gv * wnorm[p];
                    }
                }
                store.accumulate(feat.id, super::arr(&[c, h, w], dx));
            }),
        )
    }

    // Swap in the real backward closure for ops that need their own output.
    fn replace_back(&self, v: Var, back: BackFn) {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[v.id].back.is_some() {
            nodes[v.id].back = Some(back);
        }
    }
}

use super::BackFn;
