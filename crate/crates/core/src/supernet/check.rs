use super::mixed_op_forward;
use crate::error::Result;
use crate::ops::{build_op, Forward, Mode, OpKind, ParamStore, GRADCHECK_EPS, UNIT_STRIDE};
use crate::tensor::{finite_difference_check, numel, Rng, Shape, Tensor};

/// Input shape of the mixed-op logit check.
pub const MIXED_GRADCHECK_SHAPE: Shape = [1, 4, 4, 8, 8];

/// Max relative error of `∂ sum(mixed(x) ⊙ r) / ∂α` for one edge holding
/// `ops`, in `f64`.
pub fn gradcheck_mixed_alpha(ops: &[OpKind], seed: u64) -> Result<f64> {
    let shape = MIXED_GRADCHECK_SHAPE;
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::<f64>::new();
    let instances = ops
        .iter()
        .map(|&k| build_op(k, shape[1], UNIT_STRIDE, false, &format!("e.{k}"), &mut store, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut draw = |s: Shape| Tensor::from_vec(s, (0..numel(&s)).map(|_| rng.normal()).collect());
    let x = draw(shape)?;
    let r = draw(shape)?;
    let alpha = draw([1, 1, 1, 1, ops.len()])?;
    let rep = finite_difference_check(
        |tape, a| {
            let mut scratch = store.clone();
            let mut f = Forward::with_tape(std::mem::take(tape), &mut scratch, Mode::Train, Rng::new(0), false);
            let w = f.tape.softmax_last(a);
            let xv = f.tape.constant(x.clone());
            let y = mixed_op_forward(&mut f, &instances, w, 0, xv).expect("edge ops share a shape");
            let rv = f.tape.constant(r.clone());
            let p = f.tape.mul(y, rv);
            let s = f.tape.sum(p);
            *tape = f.finish().0;
            s
        },
        &alpha,
        GRADCHECK_EPS,
    );
    Ok(rep.max_rel_error)
}
