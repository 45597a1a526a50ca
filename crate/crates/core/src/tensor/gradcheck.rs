use super::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over components of `|fd - ad| / max(|fd|, |ad|, 1e-8)`.
    pub max_rel_error: f64,
    /// Component where the maximum occurred.
    pub worst_index: usize,
    pub components: usize,
}

fn evaluate(f: &mut impl FnMut(&mut Tape<f64>, Var) -> Var, x: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv);
    tape.value(out).data()[0]
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, component by component. Runs in `f64`.
///
/// A backward failure (non-finite values, non-scalar output) reports an
/// infinite error.
pub fn finite_difference_check(
    mut f: impl FnMut(&mut Tape<f64>, Var) -> Var,
    x: &Tensor<f64>,
    eps: f64,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv);
    let analytic = match tape.backward(out) {
        Ok(mut g) => g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())),
        Err(_) => {
            return GradCheckReport {
                max_rel_error: f64::INFINITY,
                worst_index: 0,
                components: x.len(),
            }
        }
    };

    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        components: x.len(),
    };
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = evaluate(&mut f, &probe);
        probe.data_mut()[i] = orig - eps;
        let down = evaluate(&mut f, &probe);
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ad = analytic.data()[i];
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        if !(rel <= report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report
}
