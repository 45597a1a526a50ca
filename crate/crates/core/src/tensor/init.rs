use super::{numel, Real, Rng, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// `Normal(0, sqrt(2 / fan_in))` with `shape = [C_out, C_in/groups, kt, kh, kw]`.
    ConvFanInNormal,
    /// `Uniform(-sqrt(1 / fan_in), sqrt(1 / fan_in))` with `shape = [1, 1, 1, out, in]`.
    LinearUniform,
    BnGammaOne,
    BnBetaZero,
    /// `1e-3 * Normal(0, 1)`.
    AlphaSmallNormal,
}

impl InitKind {
    pub fn fan_in(self, shape: &Shape) -> usize {
        match self {
            InitKind::ConvFanInNormal => shape[1] * shape[2] * shape[3] * shape[4],
            InitKind::LinearUniform => shape[4],
            _ => 1,
        }
    }
}

/// Draws a tensor of `shape`. Random kinds consume one draw per element, in
/// row-major order.
pub fn seeded_init<T: Real>(kind: InitKind, shape: Shape, rng: &mut Rng) -> Result<Tensor<T>> {
    let fan_in = kind.fan_in(&shape);
    if fan_in == 0 {
        return Err(Error::invalid(format!("{kind:?}: zero fan-in for shape {shape:?}")));
    }
    let n = numel(&shape);
    let data: Vec<f64> = match kind {
        InitKind::ConvFanInNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| std * rng.normal()).collect()
        }
        InitKind::LinearUniform => {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
        }
        InitKind::BnGammaOne => vec![1.0; n],
        InitKind::BnBetaZero => vec![0.0; n],
        InitKind::AlphaSmallNormal => (0..n).map(|_| 1e-3 * rng.normal()).collect(),
    };
    Tensor::from_vec(shape, data.into_iter().map(T::from_f64_lossy).collect())
}
