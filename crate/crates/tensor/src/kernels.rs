//! Slice-level forward/backward kernels behind the graph operations.

use crate::real::Real;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn};

/// Output pixels processed per im2col chunk; bounds scratch memory at
/// `CHUNK * kh * kw * cin` values.
const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad_y(&self) -> usize {
        (self.kh - 1) / 2
    }
    pub fn pad_x(&self) -> usize {
        (self.kw - 1) / 2
    }
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_y() - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_x() - self.kw) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &[T], p0: usize, p1: usize, cols: &mut [T]) {
        let (ow, patch) = (self.out_w(), self.patch());
        let (py, px) = (self.pad_y() as isize, self.pad_x() as isize);
        for p in p0..p1 {
            let (oy, ox) = (p / ow, p % ow);
            let row = &mut cols[(p - p0) * patch..(p - p0 + 1) * patch];
            for ky in 0..self.kh {
                let iy = (oy * self.stride) as isize + ky as isize - py;
                for kx in 0..self.kw {
                    let ix = (ox * self.stride) as isize + kx as isize - px;
                    let dst = &mut row[(ky * self.kw + kx) * self.cin..(ky * self.kw + kx + 1) * self.cin];
                    if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        dst.copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, dcols: &[T], p0: usize, p1: usize, dx: &mut [T]) {
        let (ow, patch) = (self.out_w(), self.patch());
        let (py, px) = (self.pad_y() as isize, self.pad_x() as isize);
        for p in p0..p1 {
            let (oy, ox) = (p / ow, p % ow);
            let row = &dcols[(p - p0) * patch..(p - p0 + 1) * patch];
            for ky in 0..self.kh {
                let iy = (oy * self.stride) as isize + ky as isize - py;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for kx in 0..self.kw {
                    let ix = (ox * self.stride) as isize + kx as isize - px;
                    if ix < 0 || ix >= self.w as isize {
                        continue;
                    }
                    let src = &row[(ky * self.kw + kx) * self.cin..(ky * self.kw + kx + 1) * self.cin];
                    let dst = (iy as usize * self.w + ix as usize) * self.cin;
                    for (d, &s) in dx[dst..dst + self.cin].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let n_out = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); n_out * g.cout];
    if g.is_pointwise() {
        gemm_nn(n_out, g.cin, g.cout, x, w, &mut out, false);
        return out;
    }
    let patch = g.patch();
    let mut cols = vec![T::zero(); CHUNK.min(n_out) * patch];
    let mut p0 = 0;
    while p0 < n_out {
        let p1 = (p0 + CHUNK).min(n_out);
        g.im2col(x, p0, p1, &mut cols);
        gemm_nn(p1 - p0, patch, g.cout, &cols, w, &mut out[p0 * g.cout..p1 * g.cout], false);
        p0 = p1;
    }
    out
}

/// Accumulates input and kernel gradients for [`conv2d_forward`].
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let n_out = g.out_h() * g.out_w();
    let patch = g.patch();
    if g.is_pointwise() {
        if let Some(dw) = dw {
            gemm_tn(g.cin, n_out, g.cout, x, dout, dw, true);
        }
        if let Some(dx) = dx {
            gemm_nt(n_out, g.cout, g.cin, dout, w, dx, true);
        }
        return;
    }
    let mut cols = vec![T::zero(); CHUNK.min(n_out) * patch];
    let mut dw = dw;
    let mut dx = dx;
    let mut p0 = 0;
    while p0 < n_out {
        let p1 = (p0 + CHUNK).min(n_out);
        let dchunk = &dout[p0 * g.cout..p1 * g.cout];
        if let Some(dw) = dw.as_deref_mut() {
            g.im2col(x, p0, p1, &mut cols);
            gemm_tn(patch, p1 - p0, g.cout, &cols, dchunk, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dcols = &mut cols[..(p1 - p0) * patch];
            gemm_nt(p1 - p0, g.cout, patch, dchunk, w, dcols, false);
            g.col2im(dcols, p0, p1, dx);
        }
        p0 = p1;
    }
}

/// Stride-1 "same" depthwise convolution; kernel layout `[k, k, c]`.
pub(crate) fn depthwise_forward<T: Real>(h: usize, w: usize, c: usize, k: usize, x: &[T], ker: &[T]) -> Vec<T> {
    let p = (k / 2) as isize;
    let mut out = vec![T::zero(); h * w * c];
    for oy in 0..h {
        for ox in 0..w {
            let dst = &mut out[(oy * w + ox) * c..(oy * w + ox + 1) * c];
            for ky in 0..k {
                let iy = oy as isize + ky as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - p;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * c..][..c];
                    let kk = &ker[(ky * k + kx) * c..][..c];
                    for ((d, &s), &wv) in dst.iter_mut().zip(src).zip(kk) {
                        *d += s * wv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward<T: Real>(
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    x: &[T],
    ker: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let p = (k / 2) as isize;
    for oy in 0..h {
        for ox in 0..w {
            let g = &dout[(oy * w + ox) * c..][..c];
            for ky in 0..k {
                let iy = oy as isize + ky as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - p;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * c;
                    let koff = (ky * k + kx) * c;
                    if let Some(dx) = dx.as_deref_mut() {
                        for ch in 0..c {
                            dx[base + ch] += g[ch] * ker[koff + ch];
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        for ch in 0..c {
                            dk[koff + ch] += g[ch] * x[base + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps `(i0, i1, w0, w1)` for bilinear 2× upsampling along one axis
/// (half-pixel centers, edge clamped).
fn upsample_taps<T: Real>(n: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let frac = src - f;
            let i0 = (f as isize).clamp(0, n as isize - 1) as usize;
            let i1 = (f as isize + 1).clamp(0, n as isize - 1) as usize;
            (i0, i1, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Real>(h: usize, w: usize, c: usize, x: &[T]) -> Vec<T> {
    let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
    let ow = 2 * w;
    let mut out = vec![T::zero(); 4 * h * w * c];
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = wy * wx;
                    let src = &x[(yy * w + xx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wgt * s;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(h: usize, w: usize, c: usize, dout: &[T], dx: &mut [T]) {
    let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
    let ow = 2 * w;
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let g = &dout[(oy * ow + ox) * c..][..c];
            for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = wy * wx;
                    let dst = &mut dx[(yy * w + xx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += wgt * s;
                    }
                }
            }
        }
    }
}

/// Layout of a grouped multi-head kernel attention call.
#[derive(Clone, Debug)]
pub(crate) struct AttnLayout {
    pub d: usize,
    pub heads: usize,
    /// `(query_start, query_end, kv_start, kv_end)` row ranges per group.
    pub groups: Vec<(usize, usize, usize, usize)>,
}

fn den_floor<T: Real>() -> T {
    T::min_positive_value()
}

/// `out_i = (q_i · Σ_j k_jᵀ v_j) / (q_i · Σ_j k_j)` per head and group, with
/// already non-negative feature maps `q`, `k`.
pub(crate) fn attention_forward<T: Real>(l: &AttnLayout, q: &[T], k: &[T], v: &[T]) -> Vec<T> {
    let (d, dh) = (l.d, l.d / l.heads);
    let mut out = vec![T::zero(); q.len()];
    let mut kv = vec![T::zero(); dh * dh];
    let mut ks = vec![T::zero(); dh];
    for &(q0, q1, k0, k1) in &l.groups {
        for h in 0..l.heads {
            let off = h * dh;
            kv.fill(T::zero());
            ks.fill(T::zero());
            for j in k0..k1 {
                let kr = &k[j * d + off..][..dh];
                let vr = &v[j * d + off..][..dh];
                for (a, &kval) in kr.iter().enumerate() {
                    ks[a] += kval;
                    for (b, &vval) in vr.iter().enumerate() {
                        kv[a * dh + b] += kval * vval;
                    }
                }
            }
            for i in q0..q1 {
                let qr = &q[i * d + off..][..dh];
                let den = qr.iter().zip(&ks).fold(T::zero(), |s, (&a, &b)| s + a * b).max(den_floor());
                let dst = &mut out[i * d + off..][..dh];
                for (a, &qa) in qr.iter().enumerate() {
                    for b in 0..dh {
                        dst[b] += qa * kv[a * dh + b];
                    }
                }
                for o in dst.iter_mut() {
                    *o /= den;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    l: &AttnLayout,
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (d, dh) = (l.d, l.d / l.heads);
    let mut kv = vec![T::zero(); dh * dh];
    let mut ks = vec![T::zero(); dh];
    let mut dkv = vec![T::zero(); dh * dh];
    let mut dks = vec![T::zero(); dh];
    let mut dnum = vec![T::zero(); dh];
    for &(q0, q1, k0, k1) in &l.groups {
        for h in 0..l.heads {
            let off = h * dh;
            kv.fill(T::zero());
            ks.fill(T::zero());
            dkv.fill(T::zero());
            dks.fill(T::zero());
            for j in k0..k1 {
                let kr = &k[j * d + off..][..dh];
                let vr = &v[j * d + off..][..dh];
                for (a, &kval) in kr.iter().enumerate() {
                    ks[a] += kval;
                    for (b, &vval) in vr.iter().enumerate() {
                        kv[a * dh + b] += kval * vval;
                    }
                }
            }
            for i in q0..q1 {
                let qr = &q[i * d + off..][..dh];
                let raw = qr.iter().zip(&ks).fold(T::zero(), |s, (&a, &b)| s + a * b);
                let floored = raw < den_floor();
                let den = raw.max(den_floor());
                let g = &dout[i * d + off..][..dh];
                let o = &out[i * d + off..][..dh];
                let dden = if floored {
                    T::zero()
                } else {
                    -g.iter().zip(o).fold(T::zero(), |s, (&a, &b)| s + a * b) / den
                };
                for b in 0..dh {
                    dnum[b] = g[b] / den;
                }
                let dqr = &mut dq[i * d + off..][..dh];
                for a in 0..dh {
                    let mut acc = dden * ks[a];
                    for b in 0..dh {
                        acc += dnum[b] * kv[a * dh + b];
                        dkv[a * dh + b] += qr[a] * dnum[b];
                    }
                    dqr[a] += acc;
                    dks[a] += dden * qr[a];
                }
            }
            for j in k0..k1 {
                let kr = &k[j * d + off..][..dh];
                let vr = &v[j * d + off..][..dh];
                let dkr = &mut dk[j * d + off..][..dh];
                for a in 0..dh {
                    let mut acc = dks[a];
                    for b in 0..dh {
                        acc += dkv[a * dh + b] * vr[b];
                    }
                    dkr[a] += acc;
                }
                let dvr = &mut dv[j * d + off..][..dh];
                for b in 0..dh {
                    let mut acc = T::zero();
                    for a in 0..dh {
                        acc += kr[a] * dkv[a * dh + b];
                    }
                    dvr[b] += acc;
                }
            }
        }
    }
}
