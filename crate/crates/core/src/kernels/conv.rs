//! 2-D convolution over NCHW tensors.
//!
//! Dense and grouped convolutions go through im2col + GEMM per sample; 1x1
//! stride-1 convolutions skip im2col, and depthwise convolutions use a direct
//! per-plane loop. Samples are processed in parallel, and every reduction over
//! the batch runs in a fixed order so results do not depend on scheduling.

use rayon::prelude::*;

use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvGeom {
            stride: (stride, stride),
            pad: (pad, pad),
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
}

impl ConvDims {
    pub fn new(x: &[usize], wt: &[usize], geom: ConvGeom) -> Result<Self> {
        if x.len() != 4 || wt.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {x:?} and {wt:?}"
            )));
        }
        let (n, ci, h, w) = (x[0], x[1], x[2], x[3]);
        let (co, cig, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
        let g = geom.groups;
        if g == 0 || ci % g != 0 || co % g != 0 || cig * g != ci {
            return Err(Error::Shape(format!(
                "conv2d channels {ci}->{co} incompatible with weight {wt:?} and {g} groups"
            )));
        }
        let (sh, sw) = geom.stride;
        let (ph, pw) = geom.pad;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {ph},{pw}"
            )));
        }
        Ok(ConvDims {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
            sh,
            sw,
            ph,
            pw,
            groups: g,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.co, self.ho, self.wo]
    }

    fn cig(&self) -> usize {
        self.ci / self.groups
    }

    fn cog(&self) -> usize {
        self.co / self.groups
    }

    fn kdim(&self) -> usize {
        self.cig() * self.kh * self.kw
    }

    fn plane_in(&self) -> usize {
        self.h * self.w
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.ci && self.co == self.ci
    }

    /// Output columns `lo..hi` whose input column for kernel offset `kx` is in bounds.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pw > kx {
            (self.pw - kx).div_ceil(self.sw)
        } else {
            0
        };
        let lim = self.w + self.pw;
        let hi = if lim > kx {
            (lim - kx).div_ceil(self.sw)
        } else {
            0
        };
        let lo = lo.min(self.wo);
        (lo, hi.min(self.wo).max(lo))
    }

    /// Input row for output row `oy` and kernel offset `ky`, if in bounds.
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.sh + ky;
        if iy < self.ph || iy - self.ph >= self.h {
            None
        } else {
            Some(iy - self.ph)
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let po = d.plane_out();
    let mut out = vec![0.0f32; d.n * d.co * po];
    if d.depthwise() {
        out.par_chunks_mut(po).enumerate().for_each(|(nc, o)| {
            let c = nc % d.co;
            let xs = &x[nc * d.plane_in()..][..d.plane_in()];
            let k = &w[c * d.kh * d.kw..][..d.kh * d.kw];
            dw_plane_forward(xs, k, o, d);
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v += b[c]);
            }
        });
        return out;
    }
    let (cig, cog, kdim) = (d.cig(), d.cog(), d.kdim());
    let sample_in = d.ci * d.plane_in();
    out.par_chunks_mut(d.co * po).enumerate().for_each(|(n, o)| {
        let xn = &x[n * sample_in..][..sample_in];
        let mut col = if d.pointwise() {
            Vec::new()
        } else {
            vec![0.0f32; kdim * po]
        };
        for g in 0..d.groups {
            let xg = &xn[g * cig * d.plane_in()..][..cig * d.plane_in()];
            let wg = &w[g * cog * kdim..][..cog * kdim];
            let og = &mut o[g * cog * po..][..cog * po];
            if d.pointwise() {
                gemm(cog, kdim, po, 1.0, MatRef::rm(wg, kdim), MatRef::rm(xg, po), 0.0, og);
            } else {
                im2col(xg, cig, d, &mut col);
                gemm(cog, kdim, po, 1.0, MatRef::rm(wg, kdim), MatRef::rm(&col, po), 0.0, og);
            }
        }
        if let Some(b) = bias {
            for (c, plane) in o.chunks_mut(po).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[c]);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let po = d.plane_out();
    let pi = d.plane_in();
    let db = need_db.then(|| {
        let mut db = vec![0.0f32; d.co];
        for n in 0..d.n {
            for c in 0..d.co {
                let plane = &dy[(n * d.co + c) * po..][..po];
                db[c] += plane.iter().sum::<f32>();
            }
        }
        db
    });

    if d.depthwise() {
        let kk = d.kh * d.kw;
        let dx = need_dx.then(|| {
            let mut dx = vec![0.0f32; d.n * d.ci * pi];
            dx.par_chunks_mut(pi).enumerate().for_each(|(nc, dxp)| {
                let c = nc % d.co;
                dw_plane_backward_input(&dy[nc * po..][..po], &w[c * kk..][..kk], dxp, d);
            });
            dx
        });
        let dw = need_dw.then(|| {
            let mut dw = vec![0.0f32; d.co * kk];
            dw.par_chunks_mut(kk).enumerate().for_each(|(c, dwc)| {
                for n in 0..d.n {
                    let nc = n * d.co + c;
                    dw_plane_backward_weight(&x[nc * pi..][..pi], &dy[nc * po..][..po], dwc, d);
                }
            });
            dw
        });
        return ConvGrads { dx, dw, db };
    }

    let (cig, cog, kdim) = (d.cig(), d.cog(), d.kdim());
    let sample_in = d.ci * pi;
    let sample_out = d.co * po;

    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; d.n * sample_in];
        dx.par_chunks_mut(sample_in).enumerate().for_each(|(n, dxn)| {
            let dyn_ = &dy[n * sample_out..][..sample_out];
            let mut dcol = if d.pointwise() {
                Vec::new()
            } else {
                vec![0.0f32; kdim * po]
            };
            for g in 0..d.groups {
                let wg = &w[g * cog * kdim..][..cog * kdim];
                let dyg = &dyn_[g * cog * po..][..cog * po];
                let dxg = &mut dxn[g * cig * pi..][..cig * pi];
                if d.pointwise() {
                    gemm(kdim, cog, po, 1.0, MatRef::tr(wg, kdim), MatRef::rm(dyg, po), 0.0, dxg);
                } else {
                    gemm(kdim, cog, po, 1.0, MatRef::tr(wg, kdim), MatRef::rm(dyg, po), 0.0, &mut dcol);
                    col2im(&dcol, cig, d, dxg);
                }
            }
        });
        dx
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![0.0f32; d.co * kdim];
        let mut col = if d.pointwise() {
            Vec::new()
        } else {
            vec![0.0f32; kdim * po]
        };
        for n in 0..d.n {
            let xn = &x[n * sample_in..][..sample_in];
            let dyn_ = &dy[n * sample_out..][..sample_out];
            for g in 0..d.groups {
                let xg = &xn[g * cig * pi..][..cig * pi];
                let dyg = &dyn_[g * cog * po..][..cog * po];
                let dwg = &mut dw[g * cog * kdim..][..cog * kdim];
                let colref = if d.pointwise() {
                    MatRef::tr(xg, po)
                } else {
                    im2col(xg, cig, d, &mut col);
                    MatRef::tr(&col, po)
                };
                gemm(cog, po, kdim, 1.0, MatRef::rm(dyg, po), colref, 1.0, dwg);
            }
        }
        dw
    });

    ConvGrads { dx, dw, db }
}

fn im2col(xg: &[f32], cig: usize, d: &ConvDims, col: &mut [f32]) {
    let po = d.plane_out();
    let pi = d.plane_in();
    for c in 0..cig {
        let xc = &xg[c * pi..][..pi];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut col[((c * d.kh + ky) * d.kw + kx) * po..][..po];
                let (lo, hi) = d.ox_range(kx);
                for oy in 0..d.ho {
                    let dst = &mut row[oy * d.wo..][..d.wo];
                    let Some(iy) = d.in_row(oy, ky) else {
                        dst.fill(0.0);
                        continue;
                    };
                    let src = &xc[iy * d.w..][..d.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if d.sw == 1 {
                        let start = lo + kx - d.pw;
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * d.sw + kx - d.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], cig: usize, d: &ConvDims, xg: &mut [f32]) {
    let po = d.plane_out();
    let pi = d.plane_in();
    xg.fill(0.0);
    for c in 0..cig {
        let xc = &mut xg[c * pi..][..pi];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &col[((c * d.kh + ky) * d.kw + kx) * po..][..po];
                let (lo, hi) = d.ox_range(kx);
                for oy in 0..d.ho {
                    let Some(iy) = d.in_row(oy, ky) else {
                        continue;
                    };
                    let src = &row[oy * d.wo..][..d.wo];
                    let dst = &mut xc[iy * d.w..][..d.w];
                    if d.sw == 1 {
                        let start = lo + kx - d.pw;
                        for (o, s) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *o += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * d.sw + kx - d.pw] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn dw_plane_forward(x: &[f32], k: &[f32], out: &mut [f32], d: &ConvDims) {
    for oy in 0..d.ho {
        let orow = &mut out[oy * d.wo..][..d.wo];
        for ky in 0..d.kh {
            let Some(iy) = d.in_row(oy, ky) else {
                continue;
            };
            let xrow = &x[iy * d.w..][..d.w];
            for kx in 0..d.kw {
                let wv = k[ky * d.kw + kx];
                let (lo, hi) = d.ox_range(kx);
                if d.sw == 1 {
                    let start = lo + kx - d.pw;
                    for (o, xv) in orow[lo..hi].iter_mut().zip(&xrow[start..start + (hi - lo)]) {
                        *o += wv * xv;
                    }
                } else {
                    for ox in lo..hi {
                        orow[ox] += wv * xrow[ox * d.sw + kx - d.pw];
                    }
                }
            }
        }
    }
}

fn dw_plane_backward_input(dy: &[f32], k: &[f32], dx: &mut [f32], d: &ConvDims) {
    for oy in 0..d.ho {
        let grow = &dy[oy * d.wo..][..d.wo];
        for ky in 0..d.kh {
            let Some(iy) = d.in_row(oy, ky) else {
                continue;
            };
            let xrow = &mut dx[iy * d.w..][..d.w];
            for kx in 0..d.kw {
                let wv = k[ky * d.kw + kx];
                let (lo, hi) = d.ox_range(kx);
                if d.sw == 1 {
                    let start = lo + kx - d.pw;
                    for (xv, g) in xrow[start..start + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                        *xv += wv * g;
                    }
                } else {
                    for ox in lo..hi {
                        xrow[ox * d.sw + kx - d.pw] += wv * grow[ox];
                    }
                }
            }
        }
    }
}

fn dw_plane_backward_weight(x: &[f32], dy: &[f32], dk: &mut [f32], d: &ConvDims) {
    for oy in 0..d.ho {
        let grow = &dy[oy * d.wo..][..d.wo];
        for ky in 0..d.kh {
            let Some(iy) = d.in_row(oy, ky) else {
                continue;
            };
            let xrow = &x[iy * d.w..][..d.w];
            for kx in 0..d.kw {
                let (lo, hi) = d.ox_range(kx);
                let mut acc = 0.0f32;
                if d.sw == 1 {
                    let start = lo + kx - d.pw;
                    for (xv, g) in xrow[start..start + (hi - lo)].iter().zip(&grow[lo..hi]) {
                        acc += xv * g;
                    }
                } else {
                    for ox in lo..hi {
                        acc += xrow[ox * d.sw + kx - d.pw] * grow[ox];
                    }
                }
                dk[ky * d.kw + kx] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop reference convolution.
    fn reference(x: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
        let (cig, cog) = (d.ci / d.groups, d.co / d.groups);
        let mut out = vec![0.0; d.n * d.co * d.ho * d.wo];
        for n in 0..d.n {
            for co in 0..d.co {
                let g = co / cog;
                for oy in 0..d.ho {
                    for ox in 0..d.wo {
                        let mut acc = 0.0;
                        for c in 0..cig {
                            let ci = g * cig + c;
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * d.sh + ky) as isize - d.ph as isize;
                                    let ix = (ox * d.sw + kx) as isize - d.pw as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * d.ci + ci) * d.h + iy as usize) * d.w + ix as usize];
                                    let wv = w[((co * cig + c) * d.kh + ky) * d.kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * d.co + co) * d.ho + oy) * d.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn fill(n: usize, seed: f32) -> Vec<f32> {
        (0..n).map(|i| ((i as f32 + seed) * 0.731).sin()).collect()
    }

    fn check_case(x_shape: [usize; 4], w_shape: [usize; 4], geom: ConvGeom) {
        let d = ConvDims::new(&x_shape, &w_shape, geom).unwrap();
        let x = fill(x_shape.iter().product(), 0.3);
        let w = fill(w_shape.iter().product(), 1.7);
        let got = conv2d_forward(&x, &w, None, &d);
        let want = reference(&x, &w, &d);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "forward mismatch {a} vs {b}");
        }
        // Adjoint check: <dy, conv(x)> == <conv^T(dy), x> and == <dw, w>.
        let dy = fill(got.len(), 4.2);
        let grads = conv2d_backward(&x, &w, &dy, &d, true, true, true);
        let lhs: f64 = dy.iter().zip(&got).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs_x: f64 = grads.dx.unwrap().iter().zip(&x).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs_w: f64 = grads.dw.unwrap().iter().zip(&w).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs_x).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs_x}");
        assert!((lhs - rhs_w).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs_w}");
        let db = grads.db.unwrap();
        let po = d.ho * d.wo;
        for c in 0..d.co {
            let s: f32 = (0..d.n).map(|n| dy[(n * d.co + c) * po..][..po].iter().sum::<f32>()).sum();
            assert!((s - db[c]).abs() < 1e-3);
        }
    }

    #[test]
    fn dense_strided_padded() {
        check_case([2, 3, 7, 6], [4, 3, 3, 3], ConvGeom::new(2, 1, 1));
        check_case([1, 2, 5, 5], [3, 2, 3, 3], ConvGeom::new(1, 1, 1));
        check_case([2, 3, 9, 9], [5, 3, 7, 7], ConvGeom::new(2, 3, 1));
        check_case([1, 3, 8, 8], [4, 3, 4, 4], ConvGeom::new(4, 0, 1));
    }

    #[test]
    fn pointwise_and_grouped() {
        check_case([3, 4, 5, 4], [6, 4, 1, 1], ConvGeom::new(1, 0, 1));
        check_case([2, 4, 6, 6], [6, 2, 3, 3], ConvGeom::new(1, 1, 2));
    }

    #[test]
    fn depthwise() {
        check_case([2, 5, 7, 7], [5, 1, 3, 3], ConvGeom::new(1, 1, 5));
        check_case([2, 5, 8, 7], [5, 1, 3, 3], ConvGeom::new(2, 1, 5));
        check_case([1, 3, 9, 9], [3, 1, 5, 5], ConvGeom::new(2, 2, 3));
    }
}
