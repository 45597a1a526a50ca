//! Candidate operations of the search space and the network-head primitives.

mod check;
mod head;
mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use check::{gradcheck_op, GRADCHECK_EPS, GRADCHECK_SHAPE};
pub use head::{
    classifier_head, drop_path, softmax_cross_entropy, topk_hits, ClassifierHead, LossOutput,
};
pub use layers::{batch_norm, conv, BatchNorm, Conv, BN_EPS, BN_MOMENTUM};
pub use params::{Bindings, BufferId, Forward, Mode, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{kernels::ConvGeom, Real, Rng, Shape, Var};

/// Per-axis stride `(t, h, w)`.
pub type Stride = [usize; 3];

pub const UNIT_STRIDE: Stride = [1, 1, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "avg_pool_1x3x3")]
    AvgPool1x3x3,
    #[serde(rename = "max_pool_1x3x3")]
    MaxPool1x3x3,
    #[serde(rename = "sep_conv_1x3x3")]
    SepConv1x3x3,
    #[serde(rename = "dil_sep_conv_1x3x3")]
    DilSepConv1x3x3,
    #[serde(rename = "t_conv_3_3x3")]
    TConv3_3x3,
    #[serde(rename = "t_conv_3_1x1")]
    TConv3_1x1,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::AvgPool1x3x3,
        OpKind::MaxPool1x3x3,
        OpKind::SepConv1x3x3,
        OpKind::DilSepConv1x3x3,
        OpKind::TConv3_3x3,
        OpKind::TConv3_1x1,
    ];

    /// Spatial cells draw from the first six kinds.
    pub const SPATIAL: [OpKind; 6] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::AvgPool1x3x3,
        OpKind::MaxPool1x3x3,
        OpKind::SepConv1x3x3,
        OpKind::DilSepConv1x3x3,
    ];

    pub const TEMPORAL: [OpKind; 8] = Self::ALL;

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::AvgPool1x3x3 => "avg_pool_1x3x3",
            OpKind::MaxPool1x3x3 => "max_pool_1x3x3",
            OpKind::SepConv1x3x3 => "sep_conv_1x3x3",
            OpKind::DilSepConv1x3x3 => "dil_sep_conv_1x3x3",
            OpKind::TConv3_3x3 => "t_conv_3_3x3",
            OpKind::TConv3_1x1 => "t_conv_3_1x1",
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, OpKind::TConv3_3x3 | OpKind::TConv3_1x1)
    }

    /// Kinds counted by the random-wiring "minimum convolutions" constraint.
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            OpKind::SepConv1x3x3 | OpKind::DilSepConv1x3x3 | OpKind::TConv3_3x3 | OpKind::TConv3_1x1
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::parse("op", format!("unknown op kind \"{s}\"")))
    }
}

fn check_stride(stride: Stride) -> Result<()> {
    if stride.iter().any(|&s| !(1..=2).contains(&s)) {
        return Err(Error::invalid(format!("stride components must be 1 or 2, got {stride:?}")));
    }
    Ok(())
}

/// Output shape of any search op with this stride.
pub fn strided_shape(x: Shape, stride: Stride) -> Shape {
    [x[0], x[1], x[2].div_ceil(stride[0]), x[3].div_ceil(stride[1]), x[4].div_ceil(stride[2])]
}

#[derive(Clone, Debug)]
enum Body {
    Zero,
    Identity,
    FactorizedReduce {
        halves: Vec<(Conv, Stride)>,
        bn: BatchNorm,
    },
    AvgPool {
        bn: BatchNorm,
    },
    MaxPool,
    SepConv {
        depthwise: Conv,
        pointwise: Conv,
        bn: BatchNorm,
    },
    TemporalConv {
        spatial: Conv,
        temporal: Conv,
        bn: BatchNorm,
    },
}

/// A constructed candidate operation with its parameters registered in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: Stride,
    pub affine: bool,
    body: Body,
}

/// Builds an operation, registering its tensors under `prefix` in `store`.
pub fn build_op<T: Real>(
    kind: OpKind,
    channels: usize,
    stride: Stride,
    affine: bool,
    prefix: &str,
    store: &mut ParamStore<T>,
    rng: &mut Rng,
) -> Result<OpInstance> {
    if channels == 0 {
        return Err(Error::invalid("an op needs at least one channel"));
    }
    check_stride(stride)?;
    let c = channels;
    let p = |s: &str| format!("{prefix}.{s}");
    let body = match kind {
        OpKind::Zero => Body::Zero,
        OpKind::Identity if stride == UNIT_STRIDE => Body::Identity,
        OpKind::Identity => {
            // Two strided 1×1×1 convs, the second on the input shifted by one
            // along every strided axis, concatenated to C channels.
            let first = c / 2;
            let offset = stride.map(|s| usize::from(s > 1));
            let mut halves = Vec::new();
            if first > 0 {
                halves.push((Conv::new(&p("fr_a"), c, first, [1, 1, 1], stride, [1, 1, 1], 1, store, rng)?, [0, 0, 0]));
            }
            halves.push((Conv::new(&p("fr_b"), c, c - first, [1, 1, 1], stride, [1, 1, 1], 1, store, rng)?, offset));
            Body::FactorizedReduce {
                halves,
                bn: BatchNorm::new(&p("bn"), c, affine, store)?,
            }
        }
        OpKind::AvgPool1x3x3 => Body::AvgPool {
            bn: BatchNorm::new(&p("bn"), c, affine, store)?,
        },
        OpKind::MaxPool1x3x3 => Body::MaxPool,
        OpKind::SepConv1x3x3 | OpKind::DilSepConv1x3x3 => {
            let dil = if kind == OpKind::DilSepConv1x3x3 { 2 } else { 1 };
            Body::SepConv {
                depthwise: Conv::new(&p("dw"), c, c, [1, 3, 3], stride, [1, dil, dil], c, store, rng)?,
                pointwise: Conv::new(&p("pw"), c, c, [1, 1, 1], UNIT_STRIDE, [1, 1, 1], 1, store, rng)?,
                bn: BatchNorm::new(&p("bn"), c, affine, store)?,
            }
        }
        OpKind::TConv3_3x3 | OpKind::TConv3_1x1 => {
            let k = if kind == OpKind::TConv3_3x3 { 3 } else { 1 };
            Body::TemporalConv {
                spatial: Conv::new(
                    &p("spatial"),
                    c,
                    c,
                    [1, k, k],
                    [1, stride[1], stride[2]],
                    [1, 1, 1],
                    1,
                    store,
                    rng,
                )?,
                temporal: Conv::new(&p("temporal"), c, c, [3, 1, 1], [stride[0], 1, 1], [1, 1, 1], 1, store, rng)?,
                bn: BatchNorm::new(&p("bn"), c, affine, store)?,
            }
        }
    };
    Ok(OpInstance {
        kind,
        channels,
        stride,
        affine,
        body,
    })
}

impl OpInstance {
    pub fn output_shape(&self, x: Shape) -> Shape {
        strided_shape(x, self.stride)
    }

    /// Applies the op. Returns `None` for `zero`, whose output is all zeros.
    pub fn forward_opt<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Option<Var>> {
        let xs = f.tape.shape(x);
        if xs[1] != self.channels {
            return Err(Error::Shape(format!(
                "{}: expected {} channels, got {}",
                self.kind, self.channels, xs[1]
            )));
        }
        let out = match &self.body {
            Body::Zero => return Ok(None),
            Body::Identity => x,
            Body::FactorizedReduce { halves, bn } => {
                let mut parts = Vec::with_capacity(2);
                for (conv, offset) in halves {
                    let src = if offset.iter().any(|&o| o > 0) {
                        f.tape.shift(x, *offset)
                    } else {
                        x
                    };
                    parts.push(conv.forward(f, src)?);
                }
                let y = if parts.len() == 1 { parts[0] } else { f.tape.concat(&parts) };
                bn.forward(f, y)?
            }
            Body::AvgPool { bn } => {
                let y = f.tape.avg_pool(x, self.stride);
                bn.forward(f, y)?
            }
            Body::MaxPool => f.tape.max_pool(x, self.stride),
            Body::SepConv {
                depthwise,
                pointwise,
                bn,
            } => {
                let r = f.relu(x);
                let y = depthwise.forward(f, r)?;
                let y = pointwise.forward(f, y)?;
                bn.forward(f, y)?
            }
            Body::TemporalConv {
                spatial,
                temporal,
                bn,
            } => {
                let r = f.relu(x);
                let y = spatial.forward(f, r)?;
                let y = temporal.forward(f, y)?;
                bn.forward(f, y)?
            }
        };
        Ok(Some(out))
    }

    /// Applies the op, materialising zeros for `zero`.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self.forward_opt(f, x)? {
            Some(v) => Ok(v),
            None => {
                let shape = self.output_shape(f.tape.shape(x));
                Ok(f.tape.constant(crate::tensor::Tensor::zeros(shape)))
            }
        }
    }

    /// Every conv inside the op with the input extent it sees, for cost
    /// accounting.
    pub fn convs(&self) -> Vec<&Conv> {
        match &self.body {
            Body::Zero | Body::Identity | Body::AvgPool { .. } | Body::MaxPool => vec![],
            Body::FactorizedReduce { halves, .. } => halves.iter().map(|(c, _)| c).collect(),
            Body::SepConv {
                depthwise,
                pointwise,
                ..
            } => vec![depthwise, pointwise],
            Body::TemporalConv {
                spatial, temporal, ..
            } => vec![spatial, temporal],
        }
    }

    pub fn batch_norm(&self) -> Option<&BatchNorm> {
        match &self.body {
            Body::FactorizedReduce { bn, .. }
            | Body::AvgPool { bn }
            | Body::SepConv { bn, .. }
            | Body::TemporalConv { bn, .. } => Some(bn),
            _ => None,
        }
    }
}

/// Geometry helper shared with the cost model.
pub fn conv_geom(kernel: [usize; 3], stride: Stride, dilation: [usize; 3], groups: usize) -> ConvGeom {
    ConvGeom {
        kernel,
        stride,
        dilation,
        groups,
    }
}
