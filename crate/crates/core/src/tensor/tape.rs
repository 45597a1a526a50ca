use super::kernels::{self, ConvGeom};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddN(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        stride: [usize; 3],
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Concat(Vec<Var>),
    Shift {
        x: Var,
        offset: [usize; 3],
    },
    SoftmaxLast(Var),
    MixedSum {
        ys: Vec<Option<Var>>,
        weights: Var,
        row: usize,
    },
    GlobalAvgPool(Var),
    MulConst {
        x: Var,
        mask: Vec<T>,
    },
    ScaleSamples {
        x: Var,
        factors: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddN(..) => "add_n",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Conv { .. } => "conv",
            Op::AvgPool { .. } => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat(..) => "concat",
            Op::Shift { .. } => "shift",
            Op::SoftmaxLast(..) => "softmax",
            Op::MixedSum { .. } => "mixed_sum",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::MulConst { .. } => "mul_const",
            Op::ScaleSamples { .. } => "scale_samples",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// Batch statistics reported by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (divides by `m - 1`).
    pub var_unbiased: Vec<T>,
}

/// Define-by-run computation record. Build a fresh tape per step, read the
/// values you need, then consume it with [`Tape::backward`].
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    non_finite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let idx = self.values.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((idx, op.name()));
        }
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Var(idx)
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Errors if any recorded value so far is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((idx, name)) => Err(Error::NonFinite(format!("{name} (tape entry {idx})"))),
            None => Ok(()),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let mut out = self.values[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n needs at least one operand");
        if xs.len() == 1 {
            return xs[0];
        }
        let mut out = self.values[xs[0].0].clone();
        for &x in &xs[1..] {
            self.same_shape(xs[0], x, "add_n");
            for (o, &v) in out.data_mut().iter_mut().zip(self.values[x.0].data()) {
                *o += v;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(out, Op::AddN(xs.to_vec()), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let mut out = self.values[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o *= v;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.values[a.0].map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Sum of all elements as a `[1, 1, 1, 1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(compensated_sum(self.values[a.0].data().iter().copied()));
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let out = kernels::conv_forward(&self.values[x.0], &self.values[w.0], &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Conv { x, w, geom }, rg)
    }

    pub fn avg_pool(&mut self, x: Var, stride: [usize; 3]) -> Var {
        let out = kernels::avg_pool_forward(&self.values[x.0], stride);
        let rg = self.rg(x);
        self.push(out, Op::AvgPool { x, stride }, rg)
    }

    pub fn max_pool(&mut self, x: Var, stride: [usize; 3]) -> Var {
        let (out, arg) = kernels::max_pool_forward(&self.values[x.0], stride);
        let rg = self.rg(x);
        self.push(out, Op::MaxPool { x, arg }, rg)
    }

    /// Per-channel normalisation over `(N, T, H, W)`.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise `running = (mean, var)` is applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<BatchStats<T>>) {
        let xv = &self.values[x.0];
        let [n, c, ..] = xv.shape();
        let plane = xv.plane_len();
        let m = n * plane;
        let (mean, inv_std, stats) = match running {
            Some((rm, rv)) => {
                let inv: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (rm.to_vec(), inv, None)
            }
            None => {
                let mf = T::from_usize(m).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let channel = || {
                        (0..n).flat_map(move |b| {
                            let o = (b * c + ch) * plane;
                            xv.data()[o..o + plane].iter().copied()
                        })
                    };
                    let mu = compensated_sum(channel()) / mf;
                    let ss = compensated_sum(channel().map(|v| (v - mu) * (v - mu)));
                    mean[ch] = mu;
                    var[ch] = ss;
                }
                let biased: Vec<T> = var.iter().map(|&s| s / mf).collect();
                let denom = T::from_usize(m.saturating_sub(1).max(1)).unwrap();
                let unbiased: Vec<T> = var.iter().map(|&s| s / denom).collect();
                let inv: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, inv, Some(stats))
            }
        };
        let g = gamma.map(|v| self.values[v.0].data().to_vec());
        let bt = beta.map(|v| self.values[v.0].data().to_vec());
        let mut out = xv.clone();
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * plane;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let gm = g.as_ref().map_or(T::one(), |g| g[ch]);
                let bb = bt.as_ref().map_or(T::zero(), |b| b[ch]);
                for v in &mut out.data_mut()[o..o + plane] {
                    *v = (*v - mu) * is * gm + bb;
                }
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|v| self.rg(v)) || beta.is_some_and(|v| self.rg(v));
        let batch_stats = stats.is_some();
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        );
        (var, stats)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]);
        for &x in xs {
            let s = self.shape(x);
            assert!(
                s[0] == first[0] && s[2..] == first[2..],
                "concat: non-channel extents differ"
            );
        }
        let c_total: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
        let plane = first[2] * first[3] * first[4];
        let mut out = Tensor::zeros([first[0], c_total, first[2], first[3], first[4]]);
        for b in 0..first[0] {
            let mut c0 = 0;
            for &x in xs {
                let v = &self.values[x.0];
                let c = v.shape()[1];
                let src = &v.data()[b * c * plane..(b + 1) * c * plane];
                let o = (b * c_total + c0) * plane;
                out.data_mut()[o..o + c * plane].copy_from_slice(src);
                c0 += c;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(out, Op::Concat(xs.to_vec()), rg)
    }

    /// `out[t, h, w] = x[t + ot, h + oh, w + ow]`, zero beyond the far edge.
    pub fn shift(&mut self, x: Var, offset: [usize; 3]) -> Var {
        let xv = &self.values[x.0];
        let [n, c, t, h, w] = xv.shape();
        let mut out = Tensor::zeros(xv.shape());
        for nc in 0..n * c {
            for ti in 0..t.saturating_sub(offset[0]) {
                for hi in 0..h.saturating_sub(offset[1]) {
                    let s = ((nc * t + ti + offset[0]) * h + hi + offset[1]) * w + offset[2];
                    let o = ((nc * t + ti) * h + hi) * w;
                    let len = w.saturating_sub(offset[2]);
                    out.data_mut()[o..o + len].copy_from_slice(&xv.data()[s..s + len]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Shift { x, offset }, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let xv = &self.values[a.0];
        let k = xv.shape()[4];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxLast(a), rg)
    }

    /// `Σ_o weights[row, o] · ys[o]`; a `None` entry is an all-zero candidate.
    pub fn mixed_sum(&mut self, ys: &[Option<Var>], weights: Var, row: usize) -> Var {
        let k = self.shape(weights)[4];
        assert_eq!(ys.len(), k, "mixed_sum: one candidate per weight column");
        let wrow: Vec<T> = self.values[weights.0].data()[row * k..(row + 1) * k].to_vec();
        let shape = ys
            .iter()
            .flatten()
            .map(|&y| self.shape(y))
            .next()
            .expect("mixed_sum needs a non-zero candidate");
        let mut out = Tensor::zeros(shape);
        for (o, y) in ys.iter().enumerate() {
            if let Some(y) = y {
                assert_eq!(self.shape(*y), shape, "mixed_sum: candidate shapes differ");
                let wo = wrow[o];
                for (acc, &v) in out.data_mut().iter_mut().zip(self.values[y.0].data()) {
                    *acc += wo * v;
                }
            }
        }
        let rg = self.rg(weights) || ys.iter().flatten().any(|&y| self.rg(y));
        self.push(
            out,
            Op::MixedSum {
                ys: ys.to_vec(),
                weights,
                row,
            },
            rg,
        )
    }

    /// Mean over `(T, H, W)`, keeping `[N, C, 1, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let [n, c, ..] = xv.shape();
        let plane = xv.plane_len();
        let pf = T::from_usize(plane).unwrap();
        let data = xv
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / pf)
            .collect();
        let out = Tensor::from_vec([n, c, 1, 1, 1], data).expect("pooled shape");
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: Vec<T>) -> Var {
        let mut out = self.values[x.0].clone();
        assert_eq!(mask.len(), out.len(), "mul_const: mask length");
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(x);
        self.push(out, Op::MulConst { x, mask }, rg)
    }

    /// Multiplies each batch entry by its own constant factor.
    pub fn scale_samples(&mut self, x: Var, factors: Vec<T>) -> Var {
        let mut out = self.values[x.0].clone();
        let len = out.sample_len();
        assert_eq!(factors.len(), out.shape()[0], "scale_samples: one factor per sample");
        for (chunk, &f) in out.data_mut().chunks_mut(len).zip(&factors) {
            for v in chunk {
                *v *= f;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ScaleSamples { x, factors }, rg)
    }

    /// `x: [N, C, 1, 1, 1]`, `w: [1, 1, 1, K, C]` → `[N, K, 1, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, c, k) = (xs[0], xs[1], ws[3]);
        assert_eq!(ws[4], c, "linear: weight inner extent must match channels");
        let mut out = Tensor::zeros([n, k, 1, 1, 1]);
        T::gemm(
            n,
            c,
            k,
            T::one(),
            self.values[x.0].data(),
            c as isize,
            1,
            self.values[w.0].data(),
            1,
            c as isize,
            T::zero(),
            out.data_mut(),
            k as isize,
            1,
        );
        kernels::count_linear_macs(n, c, k);
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Linear { x, w }, rg)
    }

    /// Mean softmax cross-entropy of `[N, K, 1, 1, 1]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.values[logits.0];
        let [n, k, ..] = lv.shape();
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            loss += lse - row[l];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / T::from_usize(n).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every entry
    /// that requires one; fan-out contributions are summed.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_finite()?;
        if self.shape(loss) != [1; 5] {
            return Err(Error::Shape(format!(
                "loss must be [1,1,1,1,1], got {:?}",
                self.shape(loss)
            )));
        }
        let n = self.values.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let ops = std::mem::take(&mut self.ops);
        for (i, op) in ops.into_iter().enumerate().rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(op, Op::Leaf) {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of tape entry {i}")));
                }
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, op, g, &mut grads);
            // Entry i has no remaining readers once its own rule has run.
            self.values[i] = Tensor::zeros([0; 5]);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, op: Op<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.values[v.0];
        match op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if self.rg(b) {
                    self.accumulate(grads, b, g.clone());
                }
                self.accumulate(grads, a, g);
            }
            Op::AddN(xs) => {
                for &x in &xs {
                    self.accumulate(grads, x, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let mut ga = g.clone();
                    for (o, &v) in ga.data_mut().iter_mut().zip(val(b).data()) {
                        *o *= v;
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let mut gb = g;
                    for (o, &v) in gb.data_mut().iter_mut().zip(val(a).data()) {
                        *o *= v;
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let mut ga = g;
                for (o, &x) in ga.data_mut().iter_mut().zip(val(a).data()) {
                    if x <= T::zero() {
                        *o = T::zero();
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, a, Tensor::full(self.shape(a), s));
            }
            Op::Conv { x, w, geom } => {
                let (dx, dw) =
                    kernels::conv_backward(val(x), val(w), &geom, &g, self.rg(x), self.rg(w));
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
            }
            Op::AvgPool { x, stride } => {
                let dx = kernels::avg_pool_backward(self.shape(x), stride, &g);
                self.accumulate(grads, x, dx);
            }
            Op::MaxPool { x, arg } => {
                let dx = kernels::max_pool_backward(self.shape(x), &arg, &g);
                self.accumulate(grads, x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => self.batch_norm_backward(x, gamma, beta, &mean, &inv_std, batch_stats, &g, grads),
            Op::Concat(xs) => {
                let [n, c_total, ..] = g.shape();
                let plane = g.plane_len();
                let mut c0 = 0;
                for &x in &xs {
                    let s = self.shape(x);
                    let c = s[1];
                    if self.rg(x) {
                        let mut gx = Tensor::zeros(s);
                        for b in 0..n {
                            let o = (b * c_total + c0) * plane;
                            gx.data_mut()[b * c * plane..(b + 1) * c * plane]
                                .copy_from_slice(&g.data()[o..o + c * plane]);
                        }
                        self.accumulate(grads, x, gx);
                    }
                    c0 += c;
                }
            }
            Op::Shift { x, offset } => {
                let [n, c, t, h, w] = g.shape();
                let mut gx = Tensor::zeros(g.shape());
                let len = w.saturating_sub(offset[2]);
                for nc in 0..n * c {
                    for ti in 0..t.saturating_sub(offset[0]) {
                        for hi in 0..h.saturating_sub(offset[1]) {
                            let s = ((nc * t + ti + offset[0]) * h + hi + offset[1]) * w + offset[2];
                            let o = ((nc * t + ti) * h + hi) * w;
                            gx.data_mut()[s..s + len].copy_from_slice(&g.data()[o..o + len]);
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::SoftmaxLast(a) => {
                let y = &self.values[i];
                let k = y.shape()[4];
                let mut ga = g;
                for (grow, yrow) in ga.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::MixedSum { ys, weights, row } => {
                let k = self.shape(weights)[4];
                let wrow = &val(weights).data()[row * k..(row + 1) * k];
                if self.rg(weights) {
                    let mut gw = Tensor::zeros(self.shape(weights));
                    for (o, y) in ys.iter().enumerate() {
                        if let Some(y) = y {
                            gw.data_mut()[row * k + o] =
                                g.data().iter().zip(val(*y).data()).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, weights, gw);
                }
                for (o, y) in ys.iter().enumerate() {
                    if let Some(y) = *y {
                        if self.rg(y) {
                            let wo = wrow[o];
                            self.accumulate(grads, y, g.map(|v| v * wo));
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let plane = s[2] * s[3] * s[4];
                let pf = T::from_usize(plane).unwrap();
                let mut gx = Tensor::zeros(s);
                for (chunk, &gv) in gx.data_mut().chunks_mut(plane).zip(g.data()) {
                    chunk.fill(gv / pf);
                }
                self.accumulate(grads, x, gx);
            }
            Op::MulConst { x, mask } => {
                let mut gx = g;
                for (o, &m) in gx.data_mut().iter_mut().zip(&mask) {
                    *o *= m;
                }
                self.accumulate(grads, x, gx);
            }
            Op::ScaleSamples { x, factors } => {
                let mut gx = g;
                let len = gx.sample_len();
                for (chunk, &f) in gx.data_mut().chunks_mut(len).zip(&factors) {
                    for v in chunk {
                        *v *= f;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Linear { x, w } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let (n, c, k) = (xs[0], xs[1], ws[3]);
                if self.rg(x) {
                    let mut gx = Tensor::zeros(xs);
                    T::gemm(
                        n, k, c, T::one(), g.data(), k as isize, 1, val(w).data(), c as isize, 1,
                        T::zero(), gx.data_mut(), c as isize, 1,
                    );
                    self.accumulate(grads, x, gx);
                }
                if self.rg(w) {
                    let mut gw = Tensor::zeros(ws);
                    T::gemm(
                        k, n, c, T::one(), g.data(), 1, k as isize, val(x).data(), c as isize, 1,
                        T::zero(), gw.data_mut(), c as isize, 1,
                    );
                    self.accumulate(grads, w, gw);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = self.shape(logits);
                let k = s[1];
                let scale = g.data()[0] / T::from_usize(labels.len()).unwrap();
                let mut gl = Tensor::from_vec(s, probs).expect("probs shape");
                for (row, &l) in gl.data_mut().chunks_mut(k).zip(&labels) {
                    row[l] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, logits, gl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = &self.values[x.0];
        let [n, c, ..] = xv.shape();
        let plane = xv.plane_len();
        let mf = T::from_usize(n * plane).unwrap();
        let gm = gamma.map(|v| self.values[v.0].data().to_vec());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            for b in 0..n {
                let o = (b * c + ch) * plane;
                for (&gv, &xv) in g.data()[o..o + plane].iter().zip(&xv.data()[o..o + plane]) {
                    dgamma[ch] += gv * (xv - mu) * is;
                    dbeta[ch] += gv;
                }
            }
        }
        if self.rg(x) {
            let mut gx = Tensor::zeros(xv.shape());
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                let gmc = gm.as_ref().map_or(T::one(), |g| g[ch]);
                // With xhat = (x - mu) * is and dxhat = g * gamma:
                // dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
                let (mean_d, mean_dx) = if batch_stats {
                    (dbeta[ch] * gmc / mf, dgamma[ch] * gmc / mf)
                } else {
                    (T::zero(), T::zero())
                };
                for b in 0..n {
                    let o = (b * c + ch) * plane;
                    let src = &xv.data()[o..o + plane];
                    let gs = &g.data()[o..o + plane];
                    for ((dst, &xv), &gv) in gx.data_mut()[o..o + plane].iter_mut().zip(src).zip(gs) {
                        let xhat = (xv - mu) * is;
                        *dst = is * (gv * gmc - mean_d - xhat * mean_dx);
                    }
                }
            }
            self.accumulate(grads, x, gx);
        }
        if let Some(gv) = gamma {
            let s = self.shape(gv);
            self.accumulate(grads, gv, Tensor::from_vec(s, dgamma).expect("gamma shape"));
        }
        if let Some(bv) = beta {
            let s = self.shape(bv);
            self.accumulate(grads, bv, Tensor::from_vec(s, dbeta).expect("beta shape"));
        }
    }
}

/// Neumaier-compensated summation.
pub(crate) fn compensated_sum<T: Real>(values: impl Iterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a differentiable leaf. `None` when the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
