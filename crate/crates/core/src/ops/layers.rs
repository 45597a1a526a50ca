use super::params::{BufferId, Forward, Mode, ParamId, ParamStore};
use super::Stride;
use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{seeded_init, InitKind, Real, Rng, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Bias-free 3-D convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: Stride,
        dilation: [usize; 3],
        groups: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let geom = ConvGeom {
            kernel,
            stride,
            dilation,
            groups,
        };
        validate(&geom, c_in, c_out)?;
        let shape = [c_out, c_in / groups, kernel[0], kernel[1], kernel[2]];
        let w = seeded_init(InitKind::ConvFanInNormal, shape, rng)?;
        Ok(Self {
            weight: store.add(name, w),
            c_in,
            c_out,
            geom,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        conv(&mut f.tape, x, w, &self.geom)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * (self.c_in / self.geom.groups) * self.geom.kernel_volume()
    }
}

fn validate(g: &ConvGeom, c_in: usize, c_out: usize) -> Result<()> {
    if g.kernel.iter().any(|k| k % 2 == 0) {
        return Err(Error::invalid(format!("kernel extents must be odd, got {:?}", g.kernel)));
    }
    if g.stride.contains(&0) || g.dilation.contains(&0) {
        return Err(Error::invalid("stride and dilation must be at least 1"));
    }
    if g.groups == 0 || !c_in.is_multiple_of(g.groups) || !c_out.is_multiple_of(g.groups) {
        return Err(Error::invalid(format!(
            "groups {} must divide C_in {c_in} and C_out {c_out}",
            g.groups
        )));
    }
    Ok(())
}

/// Records a convolution of `x: [N, C_in, T, H, W]` with
/// `w: [C_out, C_in / groups, kt, kh, kw]`.
pub fn conv<T: Real>(tape: &mut crate::tensor::Tape<T>, x: Var, w: Var, geom: &ConvGeom) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(w);
    validate(geom, xs[1], ws[0])?;
    if ws[1] * geom.groups != xs[1] || [ws[2], ws[3], ws[4]] != geom.kernel {
        return Err(Error::Shape(format!(
            "weight {ws:?} does not fit input {xs:?} with {} groups and kernel {:?}",
            geom.groups, geom.kernel
        )));
    }
    Ok(tape.conv(x, w, *geom))
}

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(name: &str, channels: usize, affine: bool, store: &mut ParamStore<T>) -> Result<Self> {
        let shape = [1, channels, 1, 1, 1];
        let mut dummy = Rng::new(0);
        let (gamma, beta) = if affine {
            (
                Some(store.add(format!("{name}.gamma"), seeded_init(InitKind::BnGammaOne, shape, &mut dummy)?)),
                Some(store.add(format!("{name}.beta"), seeded_init(InitKind::BnBetaZero, shape, &mut dummy)?)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            channels,
            gamma,
            beta,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(shape)),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(shape, T::one())),
        })
    }

    pub fn num_params(&self) -> usize {
        if self.gamma.is_some() {
            2 * self.channels
        } else {
            0
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mode = f.mode();
        batch_norm(f, x, self, mode)
    }
}

/// Train mode normalises with batch statistics over `(N, T, H, W)` and moves
/// the running statistics by momentum 0.1 (the running variance tracks the
/// unbiased batch variance). Eval mode applies the running statistics.
pub fn batch_norm<T: Real>(f: &mut Forward<'_, T>, x: Var, bn: &BatchNorm, mode: Mode) -> Result<Var> {
    let c = f.tape.shape(x)[1];
    if c != bn.channels {
        return Err(Error::Shape(format!("batch norm over {} channels got {c}", bn.channels)));
    }
    let gamma = bn.gamma.map(|g| f.param(g));
    let beta = bn.beta.map(|b| f.param(b));
    let eps = T::from_f64_lossy(BN_EPS);
    match mode {
        Mode::Eval => {
            let rm = f.store().buffer(bn.running_mean).data().to_vec();
            let rv = f.store().buffer(bn.running_var).data().to_vec();
            Ok(f.tape.batch_norm(x, gamma, beta, Some((&rm, &rv)), eps).0)
        }
        Mode::Train => {
            let (y, stats) = f.tape.batch_norm(x, gamma, beta, None, eps);
            let stats = stats.expect("train mode reports batch statistics");
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let keep = T::one() - m;
            let store = f.store_mut();
            for (r, &b) in store.buffer_mut(bn.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in store
                .buffer_mut(bn.running_var)
                .data_mut()
                .iter_mut()
                .zip(&stats.var_unbiased)
            {
                *r = keep * *r + m * b;
            }
            Ok(y)
        }
    }
}
