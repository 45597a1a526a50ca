//! Pieces shared by the supernet and the discrete network: the stem, cell
//! input preprocessing, the per-cell width/resolution plan and the training
//! interface the engine drives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    batch_norm, softmax_cross_entropy, BatchNorm, Conv, Forward, Mode, ParamId, ParamStore, Stride, UNIT_STRIDE,
};
use crate::space::{CellCategory, DEFAULT_INTERMEDIATE};
use crate::tensor::{Real, Rng, Shape, Tensor, Var};

/// Builder settings common to both network kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub c0: usize,
    pub n_intermediate: usize,
    pub n_classes: usize,
    pub spatial_reduction_stride: Stride,
    pub temporal_reduction_stride: Stride,
    /// Affine batch norm inside cells (stem BN is always affine).
    pub affine: bool,
    pub dropout: f64,
    pub drop_path: f64,
}

impl NetConfig {
    pub fn search(c0: usize, n_classes: usize) -> Self {
        Self {
            c0,
            n_intermediate: DEFAULT_INTERMEDIATE,
            n_classes,
            spatial_reduction_stride: [1, 2, 2],
            temporal_reduction_stride: [2, 2, 2],
            affine: false,
            dropout: 0.0,
            drop_path: 0.0,
        }
    }

    pub fn retrain(c0: usize, n_classes: usize) -> Self {
        Self {
            affine: true,
            dropout: 0.4,
            drop_path: 0.1,
            ..Self::search(c0, n_classes)
        }
    }

    pub fn reduction_stride(&self, cat: CellCategory) -> Stride {
        match cat {
            CellCategory::SpatialReduction => self.spatial_reduction_stride,
            CellCategory::TemporalReduction => self.temporal_reduction_stride,
            _ => UNIT_STRIDE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.c0 == 0 || self.n_intermediate == 0 {
            return Err(Error::invalid("channels and intermediate nodes must be positive"));
        }
        for s in [self.spatial_reduction_stride, self.temporal_reduction_stride] {
            if s.iter().any(|&v| !(1..=2).contains(&v)) {
                return Err(Error::invalid(format!("reduction stride components must be 1 or 2, got {s:?}")));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::invalid(format!("drop-path must be in [0, 1), got {}", self.drop_path)));
        }
        Ok(())
    }
}

/// Where one cell sits in the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSlot {
    pub category: CellCategory,
    /// Per-node width `C`; the cell emits `n_intermediate · C` channels.
    pub channels: usize,
    /// Stride on edges leaving the two input nodes.
    pub stride: Stride,
    /// Channels of the two raw inputs (outputs of cells k-2 and k-1).
    pub in_channels: [usize; 2],
    /// Stride applied when preprocessing input 0, to match input 1.
    pub pre0_stride: Stride,
    /// `(T, H, W)` of the preprocessed inputs.
    pub in_extent: [usize; 3],
    pub out_extent: [usize; 3],
    pub out_channels: usize,
}

/// Widths and resolutions for every cell. Widths double at each reduction
/// cell; reduction cells need even extents along their strided axes.
pub fn plan_cells(categories: &[CellCategory], input: Shape, cfg: &NetConfig) -> Result<Vec<CellSlot>> {
    cfg.validate()?;
    if categories.is_empty() {
        return Err(Error::invalid("stack plan is empty"));
    }
    if input[1..].contains(&0) {
        return Err(Error::Shape(format!("degenerate input shape {input:?}")));
    }
    let stem = (cfg.c0, [input[2], input[3], input[4]]);
    let (mut pp, mut p) = (stem, stem);
    let mut c = cfg.c0;
    let mut slots = Vec::with_capacity(categories.len());
    for (k, &cat) in categories.iter().enumerate() {
        let stride = cfg.reduction_stride(cat);
        if cat.is_reduction() {
            c *= 2;
            for a in 0..3 {
                if stride[a] > 1 && p.1[a] % stride[a] != 0 {
                    return Err(Error::Shape(format!(
                        "cell {k} ({cat}) reduces an odd extent {:?}; input extents must divide the cumulative strides",
                        p.1
                    )));
                }
            }
        }
        let mut pre0_stride = UNIT_STRIDE;
        for a in 0..3 {
            pre0_stride[a] = pp.1[a] / p.1[a];
            if pre0_stride[a] * p.1[a] != pp.1[a] {
                return Err(Error::Shape(format!("cell {k}: inputs {:?} and {:?} do not align", pp.1, p.1)));
            }
        }
        let out_extent = [p.1[0] / stride[0], p.1[1] / stride[1], p.1[2] / stride[2]];
        let out_channels = cfg.n_intermediate * c;
        slots.push(CellSlot {
            category: cat,
            channels: c,
            stride,
            in_channels: [pp.0, p.0],
            pre0_stride,
            in_extent: p.1,
            out_extent,
            out_channels,
        });
        pp = p;
        p = (out_channels, out_extent);
    }
    Ok(slots)
}

/// `(1,3,3)` conv from the input channels to `C0`, then affine batch norm.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Stem {
    pub fn new<T: Real>(c_in: usize, c0: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv::new("stem.conv", c_in, c0, [1, 3, 3], UNIT_STRIDE, [1, 1, 1], 1, store, rng)?,
            bn: BatchNorm::new("stem.bn", c0, true, store)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let mode = f.mode();
        batch_norm(f, y, &self.bn, mode)
    }
}

/// ReLU → 1×1×1 conv (strided when the source predates a reduction) → BN.
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Preprocess {
    pub fn new<T: Real>(
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: Stride,
        affine: bool,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(&format!("{name}.conv"), c_in, c_out, [1, 1, 1], stride, [1, 1, 1], 1, store, rng)?,
            bn: BatchNorm::new(&format!("{name}.bn"), c_out, affine, store)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let r = f.relu(x);
        let y = self.conv.forward(f, r)?;
        self.bn.forward(f, y)
    }
}

pub(crate) fn build_preprocess<T: Real>(
    prefix: &str,
    slot: &CellSlot,
    affine: bool,
    store: &mut ParamStore<T>,
    rng: &mut Rng,
) -> Result<[Preprocess; 2]> {
    Ok([
        Preprocess::new(
            &format!("{prefix}.pre0"),
            slot.in_channels[0],
            slot.channels,
            slot.pre0_stride,
            affine,
            store,
            rng,
        )?,
        Preprocess::new(&format!("{prefix}.pre1"), slot.in_channels[1], slot.channels, UNIT_STRIDE, affine, store, rng)?,
    ])
}

/// Which gradients a pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Nothing,
    Weights,
    Alpha,
}

/// Result of one forward (and optional backward) pass on a batch.
#[derive(Clone, Debug)]
pub struct PassOutput<T> {
    pub loss: T,
    pub top1: usize,
    pub top5: usize,
    pub weight_grads: Vec<(ParamId, Tensor<T>)>,
    /// Per cell category, for supernets asked for [`Wrt::Alpha`].
    pub alpha_grads: Option<Vec<Tensor<T>>>,
}

/// Anything the engine can train.
pub trait Network<T: Real> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// Expected per-sample input `[C, T, H, W]`.
    fn sample_shape(&self) -> [usize; 4];
    fn n_classes(&self) -> usize;
    /// Loss, hit counts and the requested gradients. `rng` drives dropout and
    /// drop-path.
    fn pass(&mut self, x: &Tensor<T>, labels: &[usize], mode: Mode, rng: Rng, wrt: Wrt) -> Result<PassOutput<T>>;
    /// Logits `[N, n_classes]`, row-major.
    fn logits(&mut self, x: &Tensor<T>, mode: Mode, rng: Rng) -> Result<Tensor<T>>;
}

/// Checks a batch against the network's expected sample shape.
pub(crate) fn check_input<T: Real>(x: &Tensor<T>, sample: [usize; 4]) -> Result<()> {
    let s = x.shape();
    if s[1..] != sample || s[0] == 0 {
        return Err(Error::Shape(format!("network expects [N, {sample:?}] input, got {s:?}")));
    }
    Ok(())
}

/// Shared tail of a pass: loss, backward and gradient collection.
/// `alpha` lists the tape entries of the architecture logits, if any.
pub(crate) fn finish_pass<T: Real>(
    mut f: Forward<'_, T>,
    logits: Var,
    labels: &[usize],
    wrt: Wrt,
    alpha: &[Var],
) -> Result<PassOutput<T>> {
    let out = softmax_cross_entropy(&mut f.tape, logits, labels)?;
    let loss = f.tape.value(out.loss).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", loss.as_f64())));
    }
    let (tape, bindings) = f.finish();
    let alpha_shapes: Vec<Shape> = alpha.iter().map(|&v| tape.shape(v)).collect();
    let (weight_grads, alpha_grads) = if wrt == Wrt::Nothing {
        (Vec::new(), None)
    } else {
        let mut grads = tape.backward(out.loss)?;
        let wg = if wrt == Wrt::Weights { bindings.collect(&mut grads) } else { Vec::new() };
        let ag = if wrt == Wrt::Alpha {
            // Categories absent from the stack get zero gradient.
            Some(
                alpha
                    .iter()
                    .zip(&alpha_shapes)
                    .map(|(&v, &s)| grads.take(v).unwrap_or_else(|| Tensor::zeros(s)))
                    .collect(),
            )
        } else {
            None
        };
        (wg, ag)
    };
    Ok(PassOutput {
        loss,
        top1: out.top1,
        top5: out.top5,
        weight_grads,
        alpha_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_plan_widths_double_at_reductions() {
        let cats = [
            CellCategory::SpatialNormal,
            CellCategory::SpatialReduction,
            CellCategory::TemporalNormal,
            CellCategory::TemporalReduction,
        ];
        let slots = plan_cells(&cats, [2, 1, 8, 32, 32], &NetConfig::search(16, 8)).unwrap();
        let widths: Vec<usize> = slots.iter().map(|s| s.channels).collect();
        assert_eq!(widths, vec![16, 32, 32, 64]);
        assert_eq!(slots[1].out_extent, [8, 16, 16]);
        assert_eq!(slots[2].pre0_stride, [1, 2, 2]);
        assert_eq!(slots[3].out_extent, [4, 8, 8]);
        assert_eq!(slots[0].in_channels, [16, 16]);
        assert_eq!(slots[2].in_channels, [64, 128]);
    }

    #[test]
    fn odd_extent_into_reduction_is_rejected() {
        let cats = [CellCategory::SpatialNormal, CellCategory::SpatialReduction];
        assert!(plan_cells(&cats, [1, 1, 8, 15, 16], &NetConfig::search(4, 8)).is_err());
        let t = [CellCategory::TemporalReduction];
        assert!(plan_cells(&t, [1, 1, 3, 16, 16], &NetConfig::search(4, 8)).is_err());
    }

    #[test]
    fn stride_override_is_honoured() {
        let mut cfg = NetConfig::search(4, 8);
        cfg.temporal_reduction_stride = [2, 1, 1];
        let slots = plan_cells(&[CellCategory::TemporalReduction], [1, 1, 4, 6, 6], &cfg).unwrap();
        assert_eq!(slots[0].out_extent, [2, 6, 6]);
    }
}
