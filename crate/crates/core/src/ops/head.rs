use super::params::{Forward, Mode, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{seeded_init, InitKind, Real, Rng, Tape, Var};

/// Global average pool → dropout → bias-free fully-connected layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc: ParamId,
    pub in_channels: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn new<T: Real>(
        name: &str,
        in_channels: usize,
        n_classes: usize,
        dropout: f64,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {n_classes}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {dropout}")));
        }
        let w = seeded_init(InitKind::LinearUniform, [1, 1, 1, n_classes, in_channels], rng)?;
        Ok(Self {
            fc: store.add(format!("{name}.fc"), w),
            in_channels,
            n_classes,
            dropout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.in_channels * self.n_classes
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        classifier_head(f, x, self)
    }
}

/// Logits `[N, n_classes, 1, 1, 1]` from the final feature map.
pub fn classifier_head<T: Real>(f: &mut Forward<'_, T>, x: Var, head: &ClassifierHead) -> Result<Var> {
    let c = f.tape.shape(x)[1];
    if c != head.in_channels {
        return Err(Error::Shape(format!("head expects {} channels, got {c}", head.in_channels)));
    }
    let pooled = f.tape.global_avg_pool(x);
    let pooled = if f.mode() == Mode::Train && head.dropout > 0.0 {
        let keep = 1.0 - head.dropout;
        let n = f.tape.value(pooled).len();
        let scale = T::from_f64_lossy(1.0 / keep);
        let mask = (0..n)
            .map(|_| if f.rng().bernoulli(keep) { scale } else { T::zero() })
            .collect();
        f.tape.mul_const(pooled, mask)
    } else {
        pooled
    };
    let w = f.param(head.fc);
    Ok(f.tape.linear(pooled, w))
}

/// Zeroes whole samples with probability `p` (train mode), scaling survivors
/// by `1 / (1 - p)`. Identity in eval mode or when `p == 0`.
pub fn drop_path<T: Real>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Rng, mode: Mode) -> Var {
    if mode == Mode::Eval || p <= 0.0 {
        return x;
    }
    let n = tape.shape(x)[0];
    let keep = 1.0 - p;
    let scale = T::from_f64_lossy(1.0 / keep);
    let factors = (0..n)
        .map(|_| if rng.bernoulli(keep) { scale } else { T::zero() })
        .collect();
    tape.scale_samples(x, factors)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: Var,
    pub top1: usize,
    pub top5: usize,
}

/// Whether `label` ranks within the `k` largest of `logits`; equal logits
/// rank by class index.
pub fn topk_hits<T: Real>(logits: &[T], label: usize, k: usize) -> bool {
    let target = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count();
    rank < k
}

/// Mean cross-entropy plus top-1 / top-5 hit counts.
pub fn softmax_cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<LossOutput> {
    let loss = tape.cross_entropy(logits, labels)?;
    let k = tape.shape(logits)[1];
    let (mut top1, mut top5) = (0, 0);
    for (row, &l) in tape.value(logits).data().chunks(k).zip(labels) {
        top1 += usize::from(topk_hits(row, l, 1));
        top5 += usize::from(topk_hits(row, l, 5));
    }
    Ok(LossOutput { loss, top1, top5 })
}
