//! Continuous relaxation of the search space: architecture logits, mixed
//! operations, dense super-cells and the stacked search network.

mod alpha;
mod check;

pub use alpha::ArchParams;
pub use check::{gradcheck_mixed_alpha, MIXED_GRADCHECK_SHAPE};

use crate::error::{Error, Result};
use crate::net::{
    build_preprocess, check_input, finish_pass, plan_cells, CellSlot, NetConfig, Network, PassOutput, Preprocess,
    Stem, Wrt,
};
use crate::ops::{build_op, ClassifierHead, Forward, Mode, OpInstance, ParamStore, UNIT_STRIDE};
use crate::space::{edge_index, CellCategory};
use crate::tensor::{softmax_in_place, Real, Rng, Shape, Tensor, Var};

/// Softmax of one logit row.
pub fn edge_weights<T: Real>(alpha_row: &[T]) -> Vec<T> {
    let mut w = alpha_row.to_vec();
    softmax_in_place(&mut w);
    w
}

/// `Σ_o softmax(α)_o · o(x)`, reading row `row` of the softmaxed logits
/// `weights`.
pub fn mixed_op_forward<T: Real>(
    f: &mut Forward<'_, T>,
    ops: &[OpInstance],
    weights: Var,
    row: usize,
    x: Var,
) -> Result<Var> {
    let k = f.tape.shape(weights)[4];
    if ops.len() != k {
        return Err(Error::Shape(format!("{} ops on the edge but {k} weights per row", ops.len())));
    }
    let mut ys = Vec::with_capacity(ops.len());
    let mut shape: Option<Shape> = None;
    for op in ops {
        let y = op.forward_opt(f, x)?;
        let s = y.map(|v| f.tape.shape(v)).unwrap_or_else(|| op.output_shape(f.tape.shape(x)));
        match shape {
            None => shape = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::Shape(format!("{} produces {s:?}, other ops {prev:?}", op.kind)));
            }
            _ => {}
        }
        ys.push(y);
    }
    if ys.iter().all(Option::is_none) {
        return Ok(f.tape.constant(Tensor::zeros(shape.expect("at least one op"))));
    }
    Ok(f.tape.mixed_sum(&ys, weights, row))
}

/// A dense cell: every edge holds one op per candidate kind.
#[derive(Clone, Debug)]
pub struct SuperCell {
    pub slot: CellSlot,
    pub pre: [Preprocess; 2],
    /// Dense edge order; ops in the category's op order.
    pub edges: Vec<Vec<OpInstance>>,
    pub n_intermediate: usize,
}

impl SuperCell {
    pub fn build<T: Real>(
        prefix: &str,
        slot: &CellSlot,
        n_intermediate: usize,
        affine: bool,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let pre = build_preprocess(prefix, slot, affine, store, rng)?;
        let mut edges = Vec::new();
        for to in 2..2 + n_intermediate {
            for from in 0..to {
                let e = edge_index(from, to);
                let stride = if from < 2 { slot.stride } else { UNIT_STRIDE };
                let ops = slot
                    .category
                    .ops()
                    .iter()
                    .map(|&kind| {
                        build_op(kind, slot.channels, stride, affine, &format!("{prefix}.e{e}.{kind}"), store, rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                edges.push(ops);
            }
        }
        Ok(Self {
            slot: slot.clone(),
            pre,
            edges,
            n_intermediate,
        })
    }

    /// Cell output from the raw inputs `(cell k-2, cell k-1)`; `weights` are
    /// the softmaxed logits of this cell's category.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, inputs: (Var, Var), weights: Var) -> Result<Var> {
        let s0 = self.pre[0].forward(f, inputs.0)?;
        let s1 = self.pre[1].forward(f, inputs.1)?;
        let mut nodes = vec![s0, s1];
        for to in 2..2 + self.n_intermediate {
            let mut terms = Vec::with_capacity(to);
            for (from, &src) in nodes.iter().enumerate() {
                let e = edge_index(from, to);
                terms.push(mixed_op_forward(f, &self.edges[e], weights, e, src)?);
            }
            let node = f.tape.add_n(&terms);
            nodes.push(node);
        }
        Ok(f.tape.concat(&nodes[2..]))
    }
}

/// The stacked search network with its architecture logits.
#[derive(Clone, Debug)]
pub struct SuperNet<T> {
    pub cfg: NetConfig,
    pub plan: Vec<CellCategory>,
    pub store: ParamStore<T>,
    pub alpha: ArchParams<T>,
    pub stem: Stem,
    pub cells: Vec<SuperCell>,
    pub head: ClassifierHead,
    sample: [usize; 4],
}

/// Builds a supernet for inputs shaped `input` (`N` is ignored).
pub fn build_supernet<T: Real>(
    plan: &[CellCategory],
    input: Shape,
    cfg: &NetConfig,
    rng: &mut Rng,
) -> Result<SuperNet<T>> {
    let slots = plan_cells(plan, input, cfg)?;
    let alpha = ArchParams::init(cfg.n_intermediate, rng)?;
    let mut store = ParamStore::new();
    let stem = Stem::new(input[1], cfg.c0, &mut store, rng)?;
    let mut cells = Vec::with_capacity(slots.len());
    for (k, slot) in slots.iter().enumerate() {
        cells.push(SuperCell::build(
            &format!("cells.{k}"),
            slot,
            cfg.n_intermediate,
            cfg.affine,
            &mut store,
            rng,
        )?);
    }
    let last = slots.last().expect("plan is non-empty").out_channels;
    let head = ClassifierHead::new("head", last, cfg.n_classes, cfg.dropout, &mut store, rng)?;
    Ok(SuperNet {
        cfg: cfg.clone(),
        plan: plan.to_vec(),
        store,
        alpha,
        stem,
        cells,
        head,
        sample: [input[1], input[2], input[3], input[4]],
    })
}

impl<T: Real> SuperNet<T> {
    fn run(&mut self, x: &Tensor<T>, mode: Mode, rng: Rng, wrt: Wrt) -> Result<(Forward<'_, T>, Var, Vec<Var>)> {
        check_input(x, self.sample)?;
        if !self.alpha.is_finite() {
            return Err(Error::NonFinite("architecture logits".into()));
        }
        let mut f = Forward::new(&mut self.store, mode, rng, wrt == Wrt::Weights);
        let alpha_vars: Vec<Var> = self
            .alpha
            .tensors()
            .iter()
            .map(|a| {
                if wrt == Wrt::Alpha {
                    f.tape.param(a.clone())
                } else {
                    f.tape.constant(a.clone())
                }
            })
            .collect();
        let xv = f.tape.constant(x.clone());
        let arch = ArchView {
            stem: &self.stem,
            cells: &self.cells,
            head: &self.head,
        };
        let logits = arch.record(&mut f, xv, &alpha_vars)?;
        Ok((f, logits, alpha_vars))
    }
}

struct ArchView<'a> {
    stem: &'a Stem,
    cells: &'a [SuperCell],
    head: &'a ClassifierHead,
}

impl ArchView<'_> {
    fn record<T: Real>(&self, f: &mut Forward<'_, T>, x: Var, alpha: &[Var]) -> Result<Var> {
        let mut weights: [Option<Var>; 4] = [None; 4];
        let s = self.stem.forward(f, x)?;
        let (mut pp, mut p) = (s, s);
        for cell in self.cells {
            let i = cell.slot.category.index();
            let w = *weights[i].get_or_insert_with(|| f.tape.softmax_last(alpha[i]));
            let out = cell.forward(f, (pp, p), w)?;
            pp = p;
            p = out;
        }
        self.head.forward(f, p)
    }
}

impl<T: Real> Network<T> for SuperNet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn sample_shape(&self) -> [usize; 4] {
        self.sample
    }

    fn n_classes(&self) -> usize {
        self.cfg.n_classes
    }

    fn pass(&mut self, x: &Tensor<T>, labels: &[usize], mode: Mode, rng: Rng, wrt: Wrt) -> Result<PassOutput<T>> {
        let (f, logits, alpha_vars) = self.run(x, mode, rng, wrt)?;
        finish_pass(f, logits, labels, wrt, &alpha_vars)
    }

    fn logits(&mut self, x: &Tensor<T>, mode: Mode, rng: Rng) -> Result<Tensor<T>> {
        let (f, logits, _) = self.run(x, mode, rng, Wrt::Nothing)?;
        Ok(f.tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests;
