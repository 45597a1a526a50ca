//! Raw loops behind the tape primitives. Nothing here records gradients.

use std::cell::Cell;

use super::{Real, Shape, Tensor};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates executed by forward kernels on this thread since the
/// last reset.
pub fn executed_macs() -> u64 {
    MACS.with(|m| m.get())
}

pub fn reset_executed_macs() {
    MACS.with(|m| m.set(0));
}

fn count_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

/// Geometry of a 3-D convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl ConvGeom {
    /// Leading zero padding on each axis; output extent is `ceil(in / stride)`.
    pub fn pad(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.kernel[a] - 1) * self.dilation[a] / 2)
    }

    pub fn out_extent(&self, input: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| input[a].div_ceil(self.stride[a]))
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn out_shape(&self, x: Shape, c_out: usize) -> Shape {
        let [t, h, w] = self.out_extent([x[2], x[3], x[4]]);
        [x[0], c_out, t, h, w]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }
}

struct Dims {
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    inp: [usize; 3],
    out: [usize; 3],
    pad: [usize; 3],
    kvol: usize,
}

impl Dims {
    fn new(x: Shape, w: Shape, g: &ConvGeom) -> Self {
        let cin = x[1];
        let cout = w[0];
        let inp = [x[2], x[3], x[4]];
        Dims {
            cin,
            cout,
            cin_g: cin / g.groups,
            cout_g: cout / g.groups,
            inp,
            out: g.out_extent(inp),
            pad: g.pad(),
            kvol: g.kernel_volume(),
        }
    }

    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }
}

/// Source coordinate for output position `o`, tap `k` on one axis, or `None`
/// when it falls in the zero padding.
#[inline]
fn src(o: usize, k: usize, stride: usize, dil: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + k * dil) as isize - pad as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

/// Unfolds one group of one sample into `[cin_g * kvol, out_plane]`.
fn im2col<T: Real>(x: &[T], d: &Dims, g: &ConvGeom, col: &mut [T]) {
    let p = d.out_plane();
    let [kt, kh, kw] = g.kernel;
    let [ot, oh, ow] = d.out;
    let [it, ih, iw] = d.inp;
    let mut row = 0;
    for ci in 0..d.cin_g {
        let plane = &x[ci * d.in_plane()..(ci + 1) * d.in_plane()];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut q = 0;
                    for to in 0..ot {
                        let ti = src(to, a, g.stride[0], g.dilation[0], d.pad[0], it);
                        for ho in 0..oh {
                            let hi = src(ho, b, g.stride[1], g.dilation[1], d.pad[1], ih);
                            match (ti, hi) {
                                (Some(ti), Some(hi)) => {
                                    let base = (ti * ih + hi) * iw;
                                    for wo in 0..ow {
                                        dst[q] = match src(wo, c, g.stride[2], g.dilation[2], d.pad[2], iw) {
                                            Some(wi) => plane[base + wi],
                                            None => T::zero(),
                                        };
                                        q += 1;
                                    }
                                }
                                _ => {
                                    dst[q..q + ow].fill(T::zero());
                                    q += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a sample group.
fn col2im<T: Real>(col: &[T], d: &Dims, g: &ConvGeom, dx: &mut [T]) {
    let p = d.out_plane();
    let [kt, kh, kw] = g.kernel;
    let [ot, oh, ow] = d.out;
    let [it, ih, iw] = d.inp;
    let mut row = 0;
    for ci in 0..d.cin_g {
        let plane = &mut dx[ci * d.in_plane()..(ci + 1) * d.in_plane()];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let srcrow = &col[row * p..(row + 1) * p];
                    let mut q = 0;
                    for to in 0..ot {
                        let ti = src(to, a, g.stride[0], g.dilation[0], d.pad[0], it);
                        for ho in 0..oh {
                            let hi = src(ho, b, g.stride[1], g.dilation[1], d.pad[1], ih);
                            if let (Some(ti), Some(hi)) = (ti, hi) {
                                let base = (ti * ih + hi) * iw;
                                for wo in 0..ow {
                                    if let Some(wi) = src(wo, c, g.stride[2], g.dilation[2], d.pad[2], iw) {
                                        plane[base + wi] += srcrow[q];
                                    }
                                    q += 1;
                                }
                            } else {
                                q += ow;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn is_depthwise(d: &Dims, g: &ConvGeom) -> bool {
    g.groups == d.cin && d.cout == d.cin && d.cin > 1
}

/// Zero-padded copy of one `[T, H, W]` plane.
fn padded_plane<T: Real>(x: &[T], d: &Dims, g: &ConvGeom) -> (Vec<T>, [usize; 3]) {
    let ext = [0, 1, 2].map(|a| {
        let need = (d.out[a] - 1) * g.stride[a] + (g.kernel[a] - 1) * g.dilation[a] + 1;
        need.max(d.inp[a] + d.pad[a])
    });
    let mut buf = vec![T::zero(); ext[0] * ext[1] * ext[2]];
    let [it, ih, iw] = d.inp;
    for t in 0..it {
        for h in 0..ih {
            let s = (t * ih + h) * iw;
            let o = ((t + d.pad[0]) * ext[1] + h + d.pad[1]) * ext[2] + d.pad[2];
            buf[o..o + iw].copy_from_slice(&x[s..s + iw]);
        }
    }
    (buf, ext)
}

pub fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let xs = x.shape();
    let d = Dims::new(xs, w.shape(), g);
    let out_shape = g.out_shape(xs, d.cout);
    let mut y = Tensor::zeros(out_shape);
    let p = d.out_plane();
    let kg = d.cin_g * d.kvol;

    if is_depthwise(&d, g) {
        let [kt, kh, kw] = g.kernel;
        let [ot, oh, ow] = d.out;
        for n in 0..xs[0] {
            for c in 0..d.cin {
                let xo = (n * d.cin + c) * d.in_plane();
                let (buf, ext) = padded_plane(&x.data()[xo..xo + d.in_plane()], &d, g);
                let wk = &w.data()[c * d.kvol..(c + 1) * d.kvol];
                let yo = (n * d.cout + c) * p;
                let yd = &mut y.data_mut()[yo..yo + p];
                let mut q = 0;
                for to in 0..ot {
                    for ho in 0..oh {
                        for wo in 0..ow {
                            let mut acc = T::zero();
                            let mut tap = 0;
                            for a in 0..kt {
                                let ti = to * g.stride[0] + a * g.dilation[0];
                                for b in 0..kh {
                                    let hi = ho * g.stride[1] + b * g.dilation[1];
                                    let row = (ti * ext[1] + hi) * ext[2];
                                    for cc in 0..kw {
                                        let wi = wo * g.stride[2] + cc * g.dilation[2];
                                        acc += wk[tap] * buf[row + wi];
                                        tap += 1;
                                    }
                                }
                            }
                            yd[q] = acc;
                            q += 1;
                        }
                    }
                }
            }
        }
        count_macs((xs[0] * d.cout * p * d.kvol) as u64);
        return y;
    }

    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kg * p] };
    for n in 0..xs[0] {
        for grp in 0..g.groups {
            let xo = (n * d.cin + grp * d.cin_g) * d.in_plane();
            let xg = &x.data()[xo..xo + d.cin_g * d.in_plane()];
            let b: &[T] = if g.is_pointwise() {
                xg
            } else {
                im2col(xg, &d, g, &mut col);
                &col
            };
            let wg = &w.data()[grp * d.cout_g * kg..(grp + 1) * d.cout_g * kg];
            let yo = (n * d.cout + grp * d.cout_g) * p;
            let yg = &mut y.data_mut()[yo..yo + d.cout_g * p];
            T::gemm(
                d.cout_g, kg, p, T::one(), wg, kg as isize, 1, b, p as isize, 1, T::zero(), yg,
                p as isize, 1,
            );
        }
    }
    count_macs((xs[0] * d.cout * kg * p) as u64);
    y
}

/// Returns `(dx, dw)`; each is computed only when requested.
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    dy: &Tensor<T>,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let d = Dims::new(xs, w.shape(), g);
    let p = d.out_plane();
    let kg = d.cin_g * d.kvol;
    let mut dx = want_dx.then(|| Tensor::zeros(xs));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));

    if is_depthwise(&d, g) {
        let [kt, kh, kw] = g.kernel;
        let [ot, oh, ow] = d.out;
        for n in 0..xs[0] {
            for c in 0..d.cin {
                let xo = (n * d.cin + c) * d.in_plane();
                let (buf, ext) = padded_plane(&x.data()[xo..xo + d.in_plane()], &d, g);
                let mut dbuf = vec![T::zero(); if want_dx { buf.len() } else { 0 }];
                let wk = &w.data()[c * d.kvol..(c + 1) * d.kvol];
                let mut dwk = vec![T::zero(); d.kvol];
                let yo = (n * d.cout + c) * p;
                let gd = &dy.data()[yo..yo + p];
                let mut q = 0;
                for to in 0..ot {
                    for ho in 0..oh {
                        for wo in 0..ow {
                            let gv = gd[q];
                            q += 1;
                            let mut tap = 0;
                            for a in 0..kt {
                                let ti = to * g.stride[0] + a * g.dilation[0];
                                for b in 0..kh {
                                    let hi = ho * g.stride[1] + b * g.dilation[1];
                                    let row = (ti * ext[1] + hi) * ext[2];
                                    for cc in 0..kw {
                                        let wi = row + wo * g.stride[2] + cc * g.dilation[2];
                                        if want_dw {
                                            dwk[tap] += buf[wi] * gv;
                                        }
                                        if want_dx {
                                            dbuf[wi] += wk[tap] * gv;
                                        }
                                        tap += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    for (acc, v) in dw.data_mut()[c * d.kvol..(c + 1) * d.kvol].iter_mut().zip(dwk) {
                        *acc += v;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let [it, ih, iw] = d.inp;
                    let plane = &mut dx.data_mut()[xo..xo + d.in_plane()];
                    for t in 0..it {
                        for h in 0..ih {
                            let s = ((t + d.pad[0]) * ext[1] + h + d.pad[1]) * ext[2] + d.pad[2];
                            let o = (t * ih + h) * iw;
                            plane[o..o + iw].copy_from_slice(&dbuf[s..s + iw]);
                        }
                    }
                }
            }
        }
        return (dx, dw);
    }

    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kg * p] };
    let mut dcol = if want_dx && !g.is_pointwise() { vec![T::zero(); kg * p] } else { Vec::new() };
    for n in 0..xs[0] {
        for grp in 0..g.groups {
            let xo = (n * d.cin + grp * d.cin_g) * d.in_plane();
            let yo = (n * d.cout + grp * d.cout_g) * p;
            let dyg = &dy.data()[yo..yo + d.cout_g * p];
            let wg = &w.data()[grp * d.cout_g * kg..(grp + 1) * d.cout_g * kg];
            if let Some(dw) = dw.as_mut() {
                let xg = &x.data()[xo..xo + d.cin_g * d.in_plane()];
                let b: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(xg, &d, g, &mut col);
                    &col
                };
                let dwg = &mut dw.data_mut()[grp * d.cout_g * kg..(grp + 1) * d.cout_g * kg];
                // dW[co, r] += Σ_p dY[co, p] · col[r, p]
                T::gemm(
                    d.cout_g, p, kg, T::one(), dyg, p as isize, 1, b, 1, p as isize, T::one(), dwg,
                    kg as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxg = &mut dx.data_mut()[xo..xo + d.cin_g * d.in_plane()];
                if g.is_pointwise() {
                    T::gemm(
                        kg, d.cout_g, p, T::one(), wg, 1, kg as isize, dyg, p as isize, 1, T::one(),
                        dxg, p as isize, 1,
                    );
                } else {
                    T::gemm(
                        kg, d.cout_g, p, T::one(), wg, 1, kg as isize, dyg, p as isize, 1, T::zero(),
                        &mut dcol, p as isize, 1,
                    );
                    col2im(&dcol, &d, g, dxg);
                }
            }
        }
    }
    (dx, dw)
}

/// Pooling window: 1×3×3 ("same" padding), given stride.
pub const POOL_KERNEL: [usize; 3] = [1, 3, 3];

fn pool_geom(stride: [usize; 3]) -> ConvGeom {
    ConvGeom {
        kernel: POOL_KERNEL,
        stride,
        dilation: [1, 1, 1],
        groups: 1,
    }
}

pub fn pool_out_shape(x: Shape, stride: [usize; 3]) -> Shape {
    pool_geom(stride).out_shape(x, x[1])
}

/// Visits every output position with the in-bounds input offsets of its window
/// (relative to the plane), in scan order.
fn for_each_window(x: Shape, stride: [usize; 3], mut f: impl FnMut(usize, &[usize])) {
    let g = pool_geom(stride);
    let pad = g.pad();
    let [ot, oh, ow] = g.out_extent([x[2], x[3], x[4]]);
    let [it, ih, iw] = [x[2], x[3], x[4]];
    let mut idx = Vec::with_capacity(9);
    let mut q = 0;
    for to in 0..ot {
        for ho in 0..oh {
            for wo in 0..ow {
                idx.clear();
                for a in 0..POOL_KERNEL[0] {
                    let Some(ti) = src(to, a, stride[0], 1, pad[0], it) else { continue };
                    for b in 0..POOL_KERNEL[1] {
                        let Some(hi) = src(ho, b, stride[1], 1, pad[1], ih) else { continue };
                        for c in 0..POOL_KERNEL[2] {
                            if let Some(wi) = src(wo, c, stride[2], 1, pad[2], iw) {
                                idx.push((ti * ih + hi) * iw + wi);
                            }
                        }
                    }
                }
                f(q, &idx);
                q += 1;
            }
        }
    }
}

/// Window positions and their in-bounds input offsets, computed once per shape.
fn windows(x: Shape, stride: [usize; 3]) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for_each_window(x, stride, |_, idx| out.push(idx.iter().map(|&i| i as u32).collect()));
    out
}

/// Average pooling over in-bounds taps only (padding is excluded from the count).
pub fn avg_pool_forward<T: Real>(x: &Tensor<T>, stride: [usize; 3]) -> Tensor<T> {
    let xs = x.shape();
    let ys = pool_out_shape(xs, stride);
    let wins = windows(xs, stride);
    let mut y = Tensor::zeros(ys);
    let (ip, op) = (x.plane_len(), y.plane_len());
    for nc in 0..xs[0] * xs[1] {
        let xp = &x.data()[nc * ip..(nc + 1) * ip];
        let yp = &mut y.data_mut()[nc * op..(nc + 1) * op];
        for (q, win) in wins.iter().enumerate() {
            let s: T = win.iter().map(|&i| xp[i as usize]).sum();
            yp[q] = s / T::from_usize(win.len()).unwrap();
        }
    }
    y
}

pub fn avg_pool_backward<T: Real>(xs: Shape, stride: [usize; 3], dy: &Tensor<T>) -> Tensor<T> {
    let wins = windows(xs, stride);
    let mut dx = Tensor::zeros(xs);
    let ip = xs[2] * xs[3] * xs[4];
    let op = dy.plane_len();
    for nc in 0..xs[0] * xs[1] {
        let gp = &dy.data()[nc * op..(nc + 1) * op];
        let dp = &mut dx.data_mut()[nc * ip..(nc + 1) * ip];
        for (q, win) in wins.iter().enumerate() {
            let share = gp[q] / T::from_usize(win.len()).unwrap();
            for &i in win {
                dp[i as usize] += share;
            }
        }
    }
    dx
}

/// Max pooling; returns the output and the winning input offset (within the
/// whole tensor) per output element. Ties go to the first maximum in scan
/// order.
pub fn max_pool_forward<T: Real>(x: &Tensor<T>, stride: [usize; 3]) -> (Tensor<T>, Vec<u32>) {
    let xs = x.shape();
    let ys = pool_out_shape(xs, stride);
    let wins = windows(xs, stride);
    let mut y = Tensor::zeros(ys);
    let (ip, op) = (x.plane_len(), y.plane_len());
    let mut arg = vec![0u32; y.len()];
    for nc in 0..xs[0] * xs[1] {
        let xp = &x.data()[nc * ip..(nc + 1) * ip];
        for (q, win) in wins.iter().enumerate() {
            let mut best = win[0] as usize;
            for &i in &win[1..] {
                if xp[i as usize] > xp[best] {
                    best = i as usize;
                }
            }
            y.data_mut()[nc * op + q] = xp[best];
            arg[nc * op + q] = (nc * ip + best) as u32;
        }
    }
    (y, arg)
}

pub fn max_pool_backward<T: Real>(xs: Shape, arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(xs);
    for (&i, &g) in arg.iter().zip(dy.data()) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}

/// Records MACs for a dense `n × k` by `k × m` product outside the conv path.
pub(crate) fn count_linear_macs(n: usize, k: usize, m: usize) {
    count_macs((n * k * m) as u64);
}
