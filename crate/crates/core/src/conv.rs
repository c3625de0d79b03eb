//! Convolution kernels.
//!
//! All kernels compute cross-correlation with zero padding. Dense and 1x1
//! kernels at stride 1 go through im2col and a blocked GEMM, so the dense path
//! on a densified bank agrees with the sparse-binary path up to rounding.
//!
//! The sparse-binary kernels never multiply: each anchor entry adds or
//! subtracts a shifted input plane.

use crate::anchor::SparseBinaryFilterBank;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    /// Input and output channels are split into this many independent groups.
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    /// Stride 1, "same" padding for an odd kernel of side `k`.
    pub fn same(k: usize) -> Self {
        ConvGeometry {
            stride: 1,
            pad: k / 2,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::param("stride must be >= 1"));
        }
        let padded = input + 2 * self.pad;
        if padded < kernel {
            return Err(Error::shape(format!(
                "kernel {kernel} does not fit input {input} with pad {}",
                self.pad
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Nominal arithmetic counts: one multiply and one add per kernel tap on the
/// dense path, one add (or subtract) per non-zero anchor weight on the
/// sparse-binary path. Padding taps are counted like interior taps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub multiplications: u64,
    pub additions: u64,
}

impl OpCounter {
    pub fn merge(&mut self, other: OpCounter) {
        self.multiplications += other.multiplications;
        self.additions += other.additions;
    }
}

struct Plan {
    n: usize,
    h_in: usize,
    w_in: usize,
    q: usize,
    h_out: usize,
    w_out: usize,
    /// input channels seen by each filter
    p_group: usize,
    q_group: usize,
}

impl Plan {
    fn new(x: &Tensor, q: usize, p_filter: usize, kh: usize, kw: usize, geom: ConvGeometry) -> Result<Self> {
        let (n, p, h_in, w_in) = x.dims4()?;
        if geom.groups == 0 || p % geom.groups != 0 || !q.is_multiple_of(geom.groups) {
            return Err(Error::shape(format!(
                "{} groups do not divide {p} input and {q} output channels",
                geom.groups
            )));
        }
        if p / geom.groups != p_filter {
            return Err(Error::shape(format!(
                "filters expect {p_filter} channels per group, input has {p} in {} groups",
                geom.groups
            )));
        }
        Ok(Plan {
            n,
            h_in,
            w_in,
            q,
            h_out: geom.output_extent(h_in, kh)?,
            w_out: geom.output_extent(w_in, kw)?,
            p_group: p_filter,
            q_group: q / geom.groups,
        })
    }

    fn in_channel(&self, filter: usize, c: usize) -> usize {
        (filter / self.q_group) * self.p_group + c
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.q, self.h_out, self.w_out]
    }

    fn in_plane(&self) -> usize {
        self.h_in * self.w_in
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Visit every (output, input) pixel pair that tap `(ky, kx)` connects, as
/// row spans `(out_offset, in_offset, len)` with input step `stride`.
#[inline]
fn tap_spans(plan: &Plan, geom: ConvGeometry, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let s = geom.stride as isize;
    let pad = geom.pad as isize;
    let (ky, kx) = (ky as isize, kx as isize);
    let (h_in, w_in) = (plan.h_in as isize, plan.w_in as isize);
    // valid x: 0 <= x*s + kx - pad < w_in
    let x_lo = ((pad - kx).max(0) + s - 1) / s;
    let x_hi = ((w_in - 1 + pad - kx).div_euclid(s) + 1).min(plan.w_out as isize);
    if x_hi <= x_lo {
        return;
    }
    let len = (x_hi - x_lo) as usize;
    for y in 0..plan.h_out as isize {
        let iy = y * s + ky - pad;
        if iy < 0 || iy >= h_in {
            continue;
        }
        let ix = x_lo * s + kx - pad;
        f(
            (y * plan.w_out as isize + x_lo) as usize,
            (iy * w_in + ix) as usize,
            len,
        );
    }
}

/// `out[o..o+len] += coef * inp[i], i stepping by step`.
#[inline]
fn gather_axpy(out: &mut [f64], o: usize, inp: &[f64], i: usize, len: usize, step: usize, coef: f64) {
    if step == 1 {
        for (a, b) in out[o..o + len].iter_mut().zip(&inp[i..i + len]) {
            *a += coef * b;
        }
    } else {
        for k in 0..len {
            out[o + k] += coef * inp[i + k * step];
        }
    }
}

#[inline]
fn gather_add(out: &mut [f64], o: usize, inp: &[f64], i: usize, len: usize, step: usize, negate: bool) {
    match (step, negate) {
        (1, false) => {
            for (a, b) in out[o..o + len].iter_mut().zip(&inp[i..i + len]) {
                *a += b;
            }
        }
        (1, true) => {
            for (a, b) in out[o..o + len].iter_mut().zip(&inp[i..i + len]) {
                *a -= b;
            }
        }
        (_, false) => {
            for k in 0..len {
                out[o + k] += inp[i + k * step];
            }
        }
        (_, true) => {
            for k in 0..len {
                out[o + k] -= inp[i + k * step];
            }
        }
    }
}

/// `inp[i], stepping, += coef * out[o..o+len]` (the adjoint of `gather_axpy`).
#[inline]
fn scatter_axpy(grad_in: &mut [f64], i: usize, grad_out: &[f64], o: usize, len: usize, step: usize, coef: f64) {
    if step == 1 {
        for (a, b) in grad_in[i..i + len].iter_mut().zip(&grad_out[o..o + len]) {
            *a += coef * b;
        }
    } else {
        for k in 0..len {
            grad_in[i + k * step] += coef * grad_out[o + k];
        }
    }
}

#[inline]
fn scatter_add(grad_in: &mut [f64], i: usize, grad_out: &[f64], o: usize, len: usize, step: usize, negate: bool) {
    match (step, negate) {
        (1, false) => {
            for (a, b) in grad_in[i..i + len].iter_mut().zip(&grad_out[o..o + len]) {
                *a += b;
            }
        }
        (1, true) => {
            for (a, b) in grad_in[i..i + len].iter_mut().zip(&grad_out[o..o + len]) {
                *a -= b;
            }
        }
        (_, false) => {
            for k in 0..len {
                grad_in[i + k * step] += grad_out[o + k];
            }
        }
        (_, true) => {
            for k in 0..len {
                grad_in[i + k * step] -= grad_out[o + k];
            }
        }
    }
}

#[inline]
fn strided_dot(a: &[f64], i: usize, b: &[f64], o: usize, len: usize, step: usize) -> f64 {
    if step == 1 {
        a[i..i + len].iter().zip(&b[o..o + len]).map(|(x, y)| x * y).sum()
    } else {
        (0..len).map(|k| a[i + k * step] * b[o + k]).sum()
    }
}

/// Unit-stride layout: each input plane is copied into a zero-padded
/// `hp x wp` buffer and outputs are accumulated on rows of width `wp`, so a
/// kernel tap `(ky, kx)` becomes one contiguous run
/// `ext[t] += pad[t + ky * wp + kx]` for `t < run`. Columns `w_out..wp` of
/// each extended row are scratch and are dropped when cropping.
struct Padded {
    hp: usize,
    wp: usize,
    run: usize,
}

impl Padded {
    fn new(plan: &Plan, geom: ConvGeometry) -> Option<Self> {
        if geom.stride != 1 {
            return None;
        }
        let wp = plan.w_in + 2 * geom.pad;
        Some(Padded {
            hp: plan.h_in + 2 * geom.pad,
            wp,
            run: (plan.h_out - 1) * wp + plan.w_out,
        })
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }

    fn ext_plane(&self, plan: &Plan) -> usize {
        plan.h_out * self.wp
    }

    fn tap(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp + kx
    }

    /// Copies the `channels` planes of one sample into padded buffers.
    fn pad_sample(&self, xs: &[f64], channels: usize, plan: &Plan, pad: usize, buf: &mut [f64]) {
        buf.iter_mut().for_each(|v| *v = 0.0);
        let (h, w) = (plan.h_in, plan.w_in);
        for c in 0..channels {
            for y in 0..h {
                let dst = c * self.plane() + (y + pad) * self.wp + pad;
                buf[dst..dst + w].copy_from_slice(&xs[(c * h + y) * w..(c * h + y + 1) * w]);
            }
        }
    }

    /// Copies the valid columns of an extended plane into a dense output plane.
    fn crop_out(&self, ext: &[f64], plan: &Plan, out: &mut [f64]) {
        for y in 0..plan.h_out {
            out[y * plan.w_out..(y + 1) * plan.w_out].copy_from_slice(&ext[y * self.wp..y * self.wp + plan.w_out]);
        }
    }

    /// Output-gradient planes of one sample in extended layout, scratch columns zero.
    fn extend_sample(&self, gs: &[f64], q: usize, plan: &Plan, ext: &mut [f64]) {
        ext.iter_mut().for_each(|v| *v = 0.0);
        let op = plan.out_plane();
        for f in 0..q {
            for y in 0..plan.h_out {
                let dst = f * self.run + y * self.wp;
                ext[dst..dst + plan.w_out].copy_from_slice(&gs[f * op + y * plan.w_out..f * op + (y + 1) * plan.w_out]);
            }
        }
    }

    /// Interior of a padded plane.
    fn crop_in(&self, padded: &[f64], plan: &Plan, pad: usize, out: &mut [f64]) {
        let w = plan.w_in;
        for y in 0..plan.h_in {
            let src = (y + pad) * self.wp + pad;
            out[y * w..(y + 1) * w].copy_from_slice(&padded[src..src + w]);
        }
    }
}

/// Output gradients laid out for the adjoint gather. Filter `f` occupies
/// `stride` values: a zero margin of `margin` (the largest tap offset), its
/// extended gradient plane (scratch columns zeroed), then zeros. Padded input
/// position `u` receives `g_f[u - off]` from a tap at offset `off`, read at
/// `f * stride + margin - off + u`.
struct Transposed {
    margin: usize,
    stride: usize,
}

impl Transposed {
    fn new(pd: &Padded, kh: usize, kw: usize) -> Self {
        let margin = pd.tap(kh - 1, kw - 1);
        Transposed {
            margin,
            stride: margin + pd.plane(),
        }
    }

    fn source(&self, f: usize, off: usize) -> usize {
        f * self.stride + self.margin - off
    }

    fn fill(&self, gs: &[f64], plan: &Plan, pd: &Padded, gpad: &mut [f64]) {
        gpad.iter_mut().for_each(|v| *v = 0.0);
        let op = plan.out_plane();
        for f in 0..plan.q {
            let base = f * self.stride + self.margin;
            for y in 0..plan.h_out {
                let dst = base + y * pd.wp;
                gpad[dst..dst + plan.w_out].copy_from_slice(&gs[f * op + y * plan.w_out..f * op + (y + 1) * plan.w_out]);
            }
        }
    }
}

#[inline(always)]
fn signed<const NEG: bool>(acc: f64, v: f64) -> f64 {
    if NEG {
        acc - v
    } else {
        acc + v
    }
}

#[inline(always)]
fn add4<const A: bool, const B: bool, const C: bool, const D: bool>(out: &mut [f64], s: [&[f64]; 4]) {
    let n = out.len();
    let (s0, s1, s2, s3) = (&s[0][..n], &s[1][..n], &s[2][..n], &s[3][..n]);
    for t in 0..n {
        let mut acc = out[t];
        acc = signed::<A>(acc, s0[t]);
        acc = signed::<B>(acc, s1[t]);
        acc = signed::<C>(acc, s2[t]);
        acc = signed::<D>(acc, s3[t]);
        out[t] = acc;
    }
}

/// `out[t] += sum_j ±src[off_j + t]`, terms added in tap order; `true`
/// subtracts. Four taps share one pass over `out`.
fn fused_add(out: &mut [f64], src: &[f64], taps: &[(usize, bool)]) {
    let n = out.len();
    let mut chunks = taps.chunks_exact(4);
    for c in &mut chunks {
        let s = [&src[c[0].0..c[0].0 + n], &src[c[1].0..c[1].0 + n], &src[c[2].0..c[2].0 + n], &src[c[3].0..c[3].0 + n]];
        match (c[0].1, c[1].1, c[2].1, c[3].1) {
            (false, false, false, false) => add4::<false, false, false, false>(out, s),
            (false, false, false, true) => add4::<false, false, false, true>(out, s),
            (false, false, true, false) => add4::<false, false, true, false>(out, s),
            (false, false, true, true) => add4::<false, false, true, true>(out, s),
            (false, true, false, false) => add4::<false, true, false, false>(out, s),
            (false, true, false, true) => add4::<false, true, false, true>(out, s),
            (false, true, true, false) => add4::<false, true, true, false>(out, s),
            (false, true, true, true) => add4::<false, true, true, true>(out, s),
            (true, false, false, false) => add4::<true, false, false, false>(out, s),
            (true, false, false, true) => add4::<true, false, false, true>(out, s),
            (true, false, true, false) => add4::<true, false, true, false>(out, s),
            (true, false, true, true) => add4::<true, false, true, true>(out, s),
            (true, true, false, false) => add4::<true, true, false, false>(out, s),
            (true, true, false, true) => add4::<true, true, false, true>(out, s),
            (true, true, true, false) => add4::<true, true, true, false>(out, s),
            (true, true, true, true) => add4::<true, true, true, true>(out, s),
        }
    }
    for &(off, neg) in chunks.remainder() {
        let src = &src[off..off + n];
        if neg {
            out.iter_mut().zip(src).for_each(|(a, b)| *a -= b);
        } else {
            out.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
}


/// Row-major view of a strided matrix for [`gemm`].
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
fn gemm(a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(b.rows == k && a.fits() && b.fits() && c.len() >= m * n, "gemm operands out of bounds");
    // SAFETY: every index touched, (rows-1)*rs + (cols-1)*cs, lies inside the
    // checked slices; `c` does not alias `a` or `b` (exclusive borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one group of a padded sample: row `(c, ky, kx)` of `col` is the
/// run of channel `c0 + c` starting at tap `(ky, kx)`.
fn im2col(buf: &[f64], pd: &Padded, c0: usize, pf: usize, kh: usize, kw: usize, col: &mut [f64]) {
    let mut r = 0;
    for c in 0..pf {
        let base = (c0 + c) * pd.plane();
        for ky in 0..kh {
            for kx in 0..kw {
                let src = base + pd.tap(ky, kx);
                col[r * pd.run..(r + 1) * pd.run].copy_from_slice(&buf[src..src + pd.run]);
                r += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds each row back onto its run.
fn col2im(col: &[f64], pd: &Padded, c0: usize, pf: usize, kh: usize, kw: usize, buf: &mut [f64]) {
    let mut r = 0;
    for c in 0..pf {
        let base = (c0 + c) * pd.plane();
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = base + pd.tap(ky, kx);
                for (a, b) in buf[dst..dst + pd.run].iter_mut().zip(&col[r * pd.run..(r + 1) * pd.run]) {
                    *a += b;
                }
                r += 1;
            }
        }
    }
}

pub fn conv2d_dense(x: &Tensor, wgt: &Tensor, geom: ConvGeometry, counter: &mut OpCounter) -> Result<Tensor> {
    let (q, pf, kh, kw) = wgt.dims4()?;
    let plan = Plan::new(x, q, pf, kh, kw, geom)?;
    let mut out = Tensor::zeros(&plan.out_shape())?;
    let (ip, op) = (plan.in_plane(), plan.out_plane());
    let wd = wgt.data();
    let taps = (plan.n * q * op * pf * kh * kw) as u64;
    counter.multiplications += taps;
    counter.additions += taps;
    if let Some(pd) = Padded::new(&plan, geom) {
        let p = x.shape()[1];
        let k = pf * kh * kw;
        let qg = plan.q_group;
        let mut buf = vec![0.0; p * pd.plane()];
        let mut col = vec![0.0; k * pd.run];
        let mut ext = vec![0.0; q * pd.run];
        for n in 0..plan.n {
            pd.pad_sample(x.sample(n), p, &plan, geom.pad, &mut buf);
            for g in 0..geom.groups {
                im2col(&buf, &pd, g * pf, pf, kh, kw, &mut col);
                gemm(
                    Mat::new(&wd[g * qg * k..(g + 1) * qg * k], qg, k),
                    Mat::new(&col, k, pd.run),
                    0.0,
                    &mut ext[g * qg * pd.run..(g + 1) * qg * pd.run],
                );
            }
            let ys = out.sample_mut(n);
            for f in 0..q {
                pd.crop_out(&ext[f * pd.run..(f + 1) * pd.run], &plan, &mut ys[f * op..(f + 1) * op]);
            }
        }
        return Ok(out);
    }
    for n in 0..plan.n {
        let xs = x.sample(n);
        let ys = out.sample_mut(n);
        for f in 0..q {
            let out_plane = &mut ys[f * op..(f + 1) * op];
            for c in 0..pf {
                let ci = plan.in_channel(f, c);
                let in_plane = &xs[ci * ip..(ci + 1) * ip];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let coef = wd[((f * pf + c) * kh + ky) * kw + kx];
                        tap_spans(&plan, geom, ky, kx, |o, i, len| {
                            gather_axpy(out_plane, o, in_plane, i, len, geom.stride, coef)
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_grad_out(grad_out: &Tensor, plan: &Plan) -> Result<()> {
    if grad_out.shape() != plan.out_shape() {
        return Err(Error::shape(format!(
            "output gradient has shape {:?}, forward output is {:?}",
            grad_out.shape(),
            plan.out_shape()
        )));
    }
    Ok(())
}

/// Gradients of `conv2d_dense` with respect to input and weights.
pub fn conv2d_dense_backward(
    x: &Tensor,
    wgt: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeometry,
    counter: &mut OpCounter,
) -> Result<(Tensor, Tensor)> {
    let (q, pf, kh, kw) = wgt.dims4()?;
    let plan = Plan::new(x, q, pf, kh, kw, geom)?;
    check_grad_out(grad_out, &plan)?;
    let mut grad_x = x.zeros_like();
    let mut grad_w = wgt.zeros_like();
    let (ip, op) = (plan.in_plane(), plan.out_plane());
    let wd = wgt.data();
    let taps = (plan.n * q * op * pf * kh * kw) as u64;
    counter.multiplications += 2 * taps;
    counter.additions += 2 * taps;
    if let Some(pd) = Padded::new(&plan, geom) {
        let p = x.shape()[1];
        let k = pf * kh * kw;
        let qg = plan.q_group;
        let mut buf = vec![0.0; p * pd.plane()];
        let mut gbuf = vec![0.0; p * pd.plane()];
        let mut col = vec![0.0; k * pd.run];
        let mut dcol = vec![0.0; k * pd.run];
        let mut gext = vec![0.0; q * pd.run];
        let gw = grad_w.data_mut();
        for n in 0..plan.n {
            pd.pad_sample(x.sample(n), p, &plan, geom.pad, &mut buf);
            pd.extend_sample(grad_out.sample(n), q, &plan, &mut gext);
            gbuf.iter_mut().for_each(|v| *v = 0.0);
            for g in 0..geom.groups {
                let gg = &gext[g * qg * pd.run..(g + 1) * qg * pd.run];
                let wg = &wd[g * qg * k..(g + 1) * qg * k];
                im2col(&buf, &pd, g * pf, pf, kh, kw, &mut col);
                gemm(Mat::new(gg, qg, pd.run), Mat::new(&col, k, pd.run).t(), 1.0, &mut gw[g * qg * k..(g + 1) * qg * k]);
                gemm(Mat::new(wg, qg, k).t(), Mat::new(gg, qg, pd.run), 0.0, &mut dcol);
                col2im(&dcol, &pd, g * pf, pf, kh, kw, &mut gbuf);
            }
            let gx = grad_x.sample_mut(n);
            for c in 0..p {
                pd.crop_in(&gbuf[c * pd.plane()..(c + 1) * pd.plane()], &plan, geom.pad, &mut gx[c * ip..(c + 1) * ip]);
            }
        }
        return Ok((grad_x, grad_w));
    }
    for n in 0..plan.n {
        let xs = x.sample(n);
        let gs = grad_out.sample(n);
        let gx = grad_x.sample_mut(n);
        for f in 0..q {
            let g_plane = &gs[f * op..(f + 1) * op];
            for c in 0..pf {
                let ci = plan.in_channel(f, c);
                let in_plane = &xs[ci * ip..(ci + 1) * ip];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((f * pf + c) * kh + ky) * kw + kx;
                        let coef = wd[widx];
                        let mut acc = 0.0;
                        let gx_plane = &mut gx[ci * ip..(ci + 1) * ip];
                        tap_spans(&plan, geom, ky, kx, |o, i, len| {
                            scatter_axpy(gx_plane, i, g_plane, o, len, geom.stride, coef);
                            acc += strided_dot(in_plane, i, g_plane, o, len, geom.stride);
                        });
                        grad_w.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_w))
}

fn bank_plan(x: &Tensor, bank: &SparseBinaryFilterBank, geom: ConvGeometry) -> Result<Plan> {
    Plan::new(x, bank.m(), bank.p(), bank.h(), bank.w(), geom)
}

/// Multiply-free convolution with a sparse ±1 bank.
pub fn conv2d_sparse_binary(
    x: &Tensor,
    bank: &SparseBinaryFilterBank,
    geom: ConvGeometry,
    counter: &mut OpCounter,
) -> Result<Tensor> {
    let plan = bank_plan(x, bank, geom)?;
    let mut out = Tensor::zeros(&plan.out_shape())?;
    let (ip, op) = (plan.in_plane(), plan.out_plane());
    counter.additions += (plan.n * op * bank.total_entries()) as u64;
    if let Some(pd) = Padded::new(&plan, geom) {
        let p = x.shape()[1];
        let taps: Vec<Vec<(usize, bool)>> = bank
            .filters()
            .iter()
            .enumerate()
            .map(|(f, entries)| {
                entries
                    .iter()
                    .map(|e| {
                        let base = plan.in_channel(f, e.channel as usize) * pd.plane();
                        (base + pd.tap(e.dy as usize, e.dx as usize), e.sign < 0)
                    })
                    .collect()
            })
            .collect();
        let mut buf = vec![0.0; p * pd.plane()];
        let mut ext = vec![0.0; pd.ext_plane(&plan)];
        for n in 0..plan.n {
            pd.pad_sample(x.sample(n), p, &plan, geom.pad, &mut buf);
            let ys = out.sample_mut(n);
            for (f, t) in taps.iter().enumerate() {
                ext.iter_mut().for_each(|v| *v = 0.0);
                fused_add(&mut ext[..pd.run], &buf, t);
                pd.crop_out(&ext, &plan, &mut ys[f * op..(f + 1) * op]);
            }
        }
        return Ok(out);
    }
    for n in 0..plan.n {
        let xs = x.sample(n);
        let ys = out.sample_mut(n);
        for (f, entries) in bank.filters().iter().enumerate() {
            let out_plane = &mut ys[f * op..(f + 1) * op];
            for e in entries {
                let ci = plan.in_channel(f, e.channel as usize);
                let in_plane = &xs[ci * ip..(ci + 1) * ip];
                tap_spans(&plan, geom, e.dy as usize, e.dx as usize, |o, i, len| {
                    gather_add(out_plane, o, in_plane, i, len, geom.stride, e.sign < 0)
                });
            }
        }
    }
    Ok(out)
}

/// Input gradient of [`conv2d_sparse_binary`]; anchor weights have no gradient.
pub fn conv2d_sparse_binary_backward(
    x: &Tensor,
    bank: &SparseBinaryFilterBank,
    grad_out: &Tensor,
    geom: ConvGeometry,
    counter: &mut OpCounter,
) -> Result<Tensor> {
    let plan = bank_plan(x, bank, geom)?;
    check_grad_out(grad_out, &plan)?;
    let mut grad_x = x.zeros_like();
    let (ip, op) = (plan.in_plane(), plan.out_plane());
    counter.additions += (plan.n * op * bank.total_entries()) as u64;
    if let Some(pd) = Padded::new(&plan, geom) {
        let p = x.shape()[1];
        let back = Transposed::new(&pd, bank.h(), bank.w());
        let mut taps: Vec<Vec<(usize, bool)>> = vec![Vec::new(); p];
        for (f, entries) in bank.filters().iter().enumerate() {
            for e in entries {
                let ci = plan.in_channel(f, e.channel as usize);
                taps[ci].push((back.source(f, pd.tap(e.dy as usize, e.dx as usize)), e.sign < 0));
            }
        }
        let mut gpad = vec![0.0; bank.m() * back.stride];
        let mut gplane = vec![0.0; pd.plane()];
        for n in 0..plan.n {
            back.fill(grad_out.sample(n), &plan, &pd, &mut gpad);
            let gx = grad_x.sample_mut(n);
            for (c, t) in taps.iter().enumerate() {
                gplane.iter_mut().for_each(|v| *v = 0.0);
                fused_add(&mut gplane, &gpad, t);
                pd.crop_in(&gplane, &plan, geom.pad, &mut gx[c * ip..(c + 1) * ip]);
            }
        }
        return Ok(grad_x);
    }
    for n in 0..plan.n {
        let gs = grad_out.sample(n);
        let gx = grad_x.sample_mut(n);
        for (f, entries) in bank.filters().iter().enumerate() {
            let g_plane = &gs[f * op..(f + 1) * op];
            for e in entries {
                let ci = plan.in_channel(f, e.channel as usize);
                let gx_plane = &mut gx[ci * ip..(ci + 1) * ip];
                tap_spans(&plan, geom, e.dy as usize, e.dx as usize, |o, i, len| {
                    scatter_add(gx_plane, i, g_plane, o, len, geom.stride, e.sign < 0)
                });
            }
        }
    }
    Ok(grad_x)
}

fn check_1x1(x: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, m, h, w) = x.dims4()?;
    let (q, mv, kh, kw) = v.dims4()?;
    if mv != m || kh != 1 || kw != 1 {
        return Err(Error::shape(format!(
            "1x1 weights {:?} do not match {m} input channels",
            v.shape()
        )));
    }
    Ok((n, m, h * w, q, h))
}

/// Per-pixel channel mixing: `out[t] = sum_i v[t, i] * in[i]`.
pub fn conv2d_1x1(x: &Tensor, v: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
    let (n, m, plane, q, h) = check_1x1(x, v)?;
    let w = plane / h;
    let mut out = Tensor::zeros(&[n, q, h, w])?;
    let vd = v.data();
    for s in 0..n {
        let xs = x.sample(s);
        let ys = out.sample_mut(s);
        gemm(Mat::new(vd, q, m), Mat::new(xs, m, plane), 0.0, ys);
    }
    let taps = (n * q * m * plane) as u64;
    counter.multiplications += taps;
    counter.additions += taps;
    Ok(out)
}

/// Gradients of [`conv2d_1x1`] with respect to input and mixing weights.
pub fn conv2d_1x1_backward(
    x: &Tensor,
    v: &Tensor,
    grad_out: &Tensor,
    counter: &mut OpCounter,
) -> Result<(Tensor, Tensor)> {
    let (n, m, plane, q, h) = check_1x1(x, v)?;
    if grad_out.shape() != [n, q, h, plane / h] {
        return Err(Error::shape(format!(
            "1x1 output gradient has shape {:?}",
            grad_out.shape()
        )));
    }
    let mut grad_x = x.zeros_like();
    let mut grad_v = v.zeros_like();
    let vd = v.data();
    for s in 0..n {
        let xs = x.sample(s);
        let gs = grad_out.sample(s);
        gemm(Mat::new(vd, q, m).t(), Mat::new(gs, q, plane), 0.0, grad_x.sample_mut(s));
        gemm(Mat::new(gs, q, plane), Mat::new(xs, m, plane).t(), 1.0, grad_v.data_mut());
    }
    let taps = (n * q * m * plane) as u64;
    counter.multiplications += 2 * taps;
    counter.additions += 2 * taps;
    Ok((grad_x, grad_v))
}
