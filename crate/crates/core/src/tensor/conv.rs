//! Convolution and resampling ops.
//!
//! Convolution uses a transposed im2col layout `[Cin*kh*kw, B*OH*OW]` so that
//! stride-1 taps unfold into contiguous span copies and the GEMM output
//! `[Cout, B*OH*OW]` maps back to `[B, Cout, OH, OW]` with plain block copies.

use super::{ArrD, Tape, Var};
use ndarray::{Array2, Axis, IxDyn};

/// How out-of-bounds taps are filled during convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Zero fill.
    Zeros,
    /// Clamp to the nearest edge pixel.
    Replicate,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    mode: PadMode,
}

impl ConvGeom {
    fn new(x: &[usize], wsh: &[usize], stride: usize, pad: usize, mode: PadMode) -> Self {
        let (b, cin, h, w) = (x[0], x[1], x[2], x[3]);
        assert_eq!(wsh[1], cin, "conv2d: channel mismatch");
        let (kh, kw) = (wsh[2], wsh[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            b,
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            mode,
        }
    }

    fn rows(&self) -> usize {
        self.b * self.oh * self.ow
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Valid output-x range for a tap column offset, plus the input offset.
fn ox_range(geom: &ConvGeom, kx: usize) -> (usize, usize, isize) {
    let off = kx as isize - geom.pad as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(geom.stride)
    };
    let hi_raw = geom.w as isize - 1 - off;
    let hi = if hi_raw < 0 {
        0
    } else {
        ((hi_raw as usize) / geom.stride + 1).min(geom.ow)
    };
    (lo, hi.max(lo), off)
}

/// Unfold into `[K, B*OH*OW]`.
fn im2col_t(xs: &[f64], geom: &ConvGeom) -> Array2<f64> {
    let (k, r) = (geom.k(), geom.rows());
    let plane_out = geom.oh * geom.ow;
    let plane_in = geom.h * geom.w;
    let mut cols = Array2::<f64>::zeros((k, r));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..geom.cin {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let krow = (ci * geom.kh + ky) * geom.kw + kx;
                let dst_row = &mut cs[krow * r..(krow + 1) * r];
                let (ox_lo, ox_hi, off) = ox_range(geom, kx);
                for bi in 0..geom.b {
                    let src_plane = &xs[(bi * geom.cin + ci) * plane_in..][..plane_in];
                    let dst_img = &mut dst_row[bi * plane_out..][..plane_out];
                    for oy in 0..geom.oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        match geom.mode {
                            PadMode::Zeros => {
                                if iy < 0 || iy >= geom.h as isize || ox_lo >= ox_hi {
                                    continue;
                                }
                                let src_base = iy as usize * geom.w;
                                let dst = &mut dst_img[oy * geom.ow + ox_lo..oy * geom.ow + ox_hi];
                                if geom.stride == 1 {
                                    let s = (ox_lo as isize + off) as usize;
                                    dst.copy_from_slice(&src_plane[src_base + s..src_base + s + dst.len()]);
                                } else {
                                    for (j, d) in dst.iter_mut().enumerate() {
                                        let ix = ((ox_lo + j) * geom.stride) as isize + off;
                                        *d = src_plane[src_base + ix as usize];
                                    }
                                }
                            }
                            PadMode::Replicate => {
                                let cy = iy.clamp(0, geom.h as isize - 1) as usize;
                                let src_base = cy * geom.w;
                                let dst = &mut dst_img[oy * geom.ow..(oy + 1) * geom.ow];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    let ix = ((ox * geom.stride) as isize + off)
                                        .clamp(0, geom.w as isize - 1)
                                        as usize;
                                    *d = src_plane[src_base + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add `[K, B*OH*OW]` gradients back into input layout.
fn col2im_t(dcols: &Array2<f64>, geom: &ConvGeom) -> ArrD {
    let r = geom.rows();
    let plane_out = geom.oh * geom.ow;
    let plane_in = geom.h * geom.w;
    let mut dx = vec![0.0; geom.b * geom.cin * plane_in];
    let ds = dcols.as_slice().unwrap();
    for ci in 0..geom.cin {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let krow = (ci * geom.kh + ky) * geom.kw + kx;
                let src_row = &ds[krow * r..(krow + 1) * r];
                let (ox_lo, ox_hi, off) = ox_range(geom, kx);
                for bi in 0..geom.b {
                    let dst_plane = &mut dx[(bi * geom.cin + ci) * plane_in..][..plane_in];
                    let src_img = &src_row[bi * plane_out..][..plane_out];
                    for oy in 0..geom.oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        match geom.mode {
                            PadMode::Zeros => {
                                if iy < 0 || iy >= geom.h as isize || ox_lo >= ox_hi {
                                    continue;
                                }
                                let dst_base = iy as usize * geom.w;
                                let src = &src_img[oy * geom.ow + ox_lo..oy * geom.ow + ox_hi];
                                for (j, &s) in src.iter().enumerate() {
                                    let ix = ((ox_lo + j) * geom.stride) as isize + off;
                                    dst_plane[dst_base + ix as usize] += s;
                                }
                            }
                            PadMode::Replicate => {
                                let cy = iy.clamp(0, geom.h as isize - 1) as usize;
                                let dst_base = cy * geom.w;
                                let src = &src_img[oy * geom.ow..(oy + 1) * geom.ow];
                                for (ox, &s) in src.iter().enumerate() {
                                    let ix = ((ox * geom.stride) as isize + off)
                                        .clamp(0, geom.w as isize - 1)
                                        as usize;
                                    dst_plane[dst_base + ix] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ArrD::from_shape_vec(IxDyn(&[geom.b, geom.cin, geom.h, geom.w]), dx).unwrap()
}

/// `[Cout, B*OH*OW]` GEMM output -> `[B, Cout, OH, OW]`, fusing the bias add.
fn ymat_to_nchw(y: &Array2<f64>, bias: Option<&ArrD>, geom: &ConvGeom, cout: usize) -> ArrD {
    let plane = geom.oh * geom.ow;
    let mut out = vec![0.0; geom.b * cout * plane];
    let ys = y.as_slice().unwrap();
    let r = geom.rows();
    for co in 0..cout {
        let bval = bias.map(|b| b[[co]]).unwrap_or(0.0);
        let row = &ys[co * r..(co + 1) * r];
        for bi in 0..geom.b {
            let dst = &mut out[(bi * cout + co) * plane..][..plane];
            let src = &row[bi * plane..][..plane];
            if bval == 0.0 {
                dst.copy_from_slice(src);
            } else {
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = s + bval;
                }
            }
        }
    }
    ArrD::from_shape_vec(IxDyn(&[geom.b, cout, geom.oh, geom.ow]), out).unwrap()
}

/// `[B, Cout, OH, OW]` gradient -> `[Cout, B*OH*OW]`.
fn nchw_to_ymat(g: &ArrD, geom: &ConvGeom, cout: usize) -> Array2<f64> {
    let plane = geom.oh * geom.ow;
    let r = geom.rows();
    let gs = g.as_slice().unwrap();
    let mut y = Array2::<f64>::zeros((cout, r));
    let ys = y.as_slice_mut().unwrap();
    for co in 0..cout {
        let row = &mut ys[co * r..(co + 1) * r];
        for bi in 0..geom.b {
            let src = &gs[(bi * cout + co) * plane..][..plane];
            row[bi * plane..][..plane].copy_from_slice(src);
        }
    }
    y
}

/// Plain (non-tape) convolution forward, used by the frozen image encoder.
pub fn conv2d_forward(
    x: &ArrD,
    w: &ArrD,
    bias: Option<&ArrD>,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> ArrD {
    let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad, mode);
    let cout = w.shape()[0];
    let cols = im2col_t(x.as_slice().unwrap(), &geom);
    let wmat = w.view().into_shape_with_order((cout, geom.k())).unwrap();
    let y = wmat.dot(&cols);
    ymat_to_nchw(&y, bias, &geom, cout)
}

impl Tape {
    /// 2-D convolution over `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(vx.shape(), vw.shape(), stride, pad, mode);
        let wsh = vw.shape().to_vec();
        let cout = wsh[0];
        let vb = bias.map(|b| self.value(b));
        let out = conv2d_forward(&vx, &vw, vb.as_deref(), stride, pad, mode);
        let nx = self.needs_grad(x);
        let nw = self.needs_grad(w);
        let nb = bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        let parents: Vec<Var> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push_op(
            out,
            &parents,
            Box::new(move |g, store| {
                let gmat = nchw_to_ymat(g, &geom, cout);
                if nb {
                    let db = gmat.sum_axis(Axis(1));
                    store.accumulate(bias.unwrap().id, db.into_dyn());
                }
                let wmat = vw.view().into_shape_with_order((cout, geom.k())).unwrap();
                if nw {
                    let cols = im2col_t(vx.as_slice().unwrap(), &geom);
                    let dw = gmat.dot(&cols.t()).as_standard_layout().to_owned();
                    store.accumulate(w.id, dw.into_shape_with_order(IxDyn(&wsh)).unwrap());
                }
                if nx {
                    let dcols = wmat.t().dot(&gmat).as_standard_layout().to_owned();
                    store.accumulate(x.id, col2im_t(&dcols, &geom));
                }
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn nearest_up2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        assert_eq!(sh.len(), 4, "nearest_up2: expected [B,C,H,W]");
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let xs = vx.as_slice().unwrap();
        let mut out = vec![0.0; b * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for bc in 0..b * c {
            let src = &xs[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for y in 0..oh {
                let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut dst[y * ow..(y + 1) * ow];
                for (x2, d) in drow.iter_mut().enumerate() {
                    *d = srow[x2 / 2];
                }
            }
        }
        self.push_op(
            super::arr(&[b, c, oh, ow], out),
            &[x],
            Box::new(move |g, store| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let src = &gs[bc * oh * ow..(bc + 1) * oh * ow];
                    let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for y in 0..oh {
                        let srow = &src[y * ow..(y + 1) * ow];
                        let drow = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
                        for (x2, &s) in srow.iter().enumerate() {
                            drow[x2 / 2] += s;
                        }
                    }
                }
                store.accumulate(x.id, super::arr(&[b, c, h, w], dx));
            }),
        )
    }

    /// Bilinear resize of the trailing two axes (align_corners = false).
    pub fn bilinear_resize(&self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        assert!(sh.len() >= 2, "bilinear_resize: need spatial dims");
        let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let lead: usize = sh[..sh.len() - 2].iter().product();
        let (ty, tx) = (interp_table(h, oh), interp_table(w, ow));
        let xs = vx.as_slice().unwrap();
        let mut out = vec![0.0; lead * oh * ow];
        for l in 0..lead {
            let src = &xs[l * h * w..(l + 1) * h * w];
            let dst = &mut out[l * oh * ow..(l + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, wy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = tx[ox];
                    let v00 = src[y0 * w + x0];
                    let v01 = src[y0 * w + x1];
                    let v10 = src[y1 * w + x0];
                    let v11 = src[y1 * w + x1];
                    dst[oy * ow + ox] = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                }
            }
        }
        let mut osh = sh[..sh.len() - 2].to_vec();
        osh.extend_from_slice(&[oh, ow]);
        self.push_op(
            super::arr(&osh, out),
            &[x],
            Box::new(move |g, store| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; lead * h * w];
                for l in 0..lead {
                    let src = &gs[l * oh * ow..(l + 1) * oh * ow];
                    let dst = &mut dx[l * h * w..(l + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, wy) = ty[oy];
                        for ox in 0..ow {
                            let (x0, x1, wx) = tx[ox];
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += gv * wy * (1.0 - wx);
                            dst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                store.accumulate(x.id, super::arr(&sh, dx));
            }),
        )
    }
}

/// Sample positions for align_corners=false bilinear interpolation.
fn interp_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0).min(src as f64 - 1.0);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Non-tape bilinear resize (same convention as the tape op).
pub fn bilinear_resize_raw(x: &ArrD, oh: usize, ow: usize) -> ArrD {
    let t = Tape::new();
    let v = t.constant(x.clone());
    let r = t.bilinear_resize(v, oh, ow);
    t.value(r).as_ref().clone()
}
