use super::{build_op, Forward, Mode, OpKind, ParamId, ParamStore, Stride};
use crate::error::Result;
use crate::tensor::{finite_difference_check, numel, Rng, Shape, Tape, Tensor, Var};

/// Shape used by [`gradcheck_op`].
pub const GRADCHECK_SHAPE: Shape = [2, 4, 4, 6, 6];

/// Step used by the central differences.
pub const GRADCHECK_EPS: f64 = 1e-5;

pub(crate) fn gaussian(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_vec(shape, (0..numel(&shape)).map(|_| rng.normal()).collect()).expect("length matches")
}

/// Max relative error of the input gradient and of every parameter gradient
/// of `sum(op(x) ⊙ r)` against central differences, in `f64`, train mode.
pub fn gradcheck_op(kind: OpKind, stride: Stride, affine: bool) -> Result<Vec<(String, f64)>> {
    let shape = GRADCHECK_SHAPE;
    let mut store = ParamStore::<f64>::new();
    let op = build_op(kind, shape[1], stride, affine, "op", &mut store, &mut Rng::new(1))?;
    for id in store.ids().collect::<Vec<_>>() {
        // Move affine parameters off 1 / 0 so their gradients are generic.
        let v = store.get(id).clone();
        let seed = 900 + store.name(id).bytes().map(u64::from).sum::<u64>();
        let noise = gaussian(v.shape(), seed);
        let mixed = v.data().iter().zip(noise.data()).map(|(a, b)| a + 0.1 * b).collect();
        *store.get_mut(id) = Tensor::from_vec(v.shape(), mixed)?;
    }
    // Unit-scale activations after pooling keep the truncation error of the
    // central differences well below the tolerance.
    let x = gaussian(shape, 17).map(|v| 3.0 * v);
    let r = gaussian(op.output_shape(shape), 18);

    let objective = |tape: &mut Tape<f64>, store: &mut ParamStore<f64>, x: Var, bind: Option<(ParamId, Var)>| {
        let mut f = Forward::with_tape(std::mem::take(tape), store, Mode::Train, Rng::new(0), false);
        if let Some((id, v)) = bind {
            f.bind(id, v);
        }
        let y = op.forward(&mut f, x).expect("shapes were validated at build time");
        let rv = f.tape.constant(r.clone());
        let p = f.tape.mul(y, rv);
        let s = f.tape.sum(p);
        *tape = f.finish().0;
        s
    };

    let mut results = Vec::new();
    let rep = finite_difference_check(|t, xv| objective(t, &mut store.clone(), xv, None), &x, GRADCHECK_EPS);
    results.push(("input".to_string(), rep.max_rel_error));
    for id in store.ids().collect::<Vec<_>>() {
        let w = store.get(id).clone();
        let name = store.name(id).to_string();
        let mut scratch = store.clone();
        let rep = finite_difference_check(
            |t, wv| {
                let xv = t.constant(x.clone());
                objective(t, &mut scratch, xv, Some((id, wv)))
            },
            &w,
            GRADCHECK_EPS,
        );
        results.push((name, rep.max_rel_error));
    }
    Ok(results)
}
