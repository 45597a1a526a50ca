//! Discrete networks: stacking searched cells, channel scaling and the
//! retrain-time regularisers.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{build_preprocess, check_input, finish_pass, plan_cells, CellSlot, NetConfig, Network, PassOutput, Preprocess, Stem, Wrt};
use crate::ops::{build_op, ClassifierHead, Forward, Mode, OpInstance, OpKind, ParamStore, UNIT_STRIDE};
use crate::space::{edge_index, validate_genotype, CellCategory, CellGenotype, Genotype};
use crate::tensor::{Real, Rng, Shape, Tensor, Var};

/// Cell order of a network: `(category, repeats)` entries plus the initial
/// width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackPlan {
    pub entries: Vec<(CellCategory, usize)>,
    pub k: usize,
    pub c0: usize,
}

pub const DEFAULT_C0: usize = 16;

impl StackPlan {
    pub fn new(entries: Vec<(CellCategory, usize)>, k: usize, c0: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("stack plan is empty"));
        }
        if entries.iter().any(|&(_, r)| r == 0) {
            return Err(Error::invalid("stack plan repeats must be at least 1"));
        }
        if c0 == 0 {
            return Err(Error::invalid("initial channels must be at least 1"));
        }
        Ok(Self { entries, k, c0 })
    }

    /// Flattened cell sequence.
    pub fn cells(&self) -> Vec<CellCategory> {
        self.entries
            .iter()
            .flat_map(|&(c, r)| std::iter::repeat_n(c, r))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `[S-NC×K, S-RC, S-NC×K, S-RC, T-NC×K, T-RC, T-NC×K]` at the desk-scale
/// width.
pub fn default_stack_plan(k: usize) -> Result<StackPlan> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    use CellCategory::*;
    StackPlan::new(
        vec![
            (SpatialNormal, k),
            (SpatialReduction, 1),
            (SpatialNormal, k),
            (SpatialReduction, 1),
            (TemporalNormal, k),
            (TemporalReduction, 1),
            (TemporalNormal, k),
        ],
        k,
        DEFAULT_C0,
    )
}

/// One cell of each category, in search order.
pub fn search_stack_plan(c0: usize) -> Result<StackPlan> {
    StackPlan::new(CellCategory::ALL.iter().map(|&c| (c, 1)).collect(), 1, c0)
}

/// Scales the initial width, rounding to the nearest integer. Fails when the
/// product drops below one channel.
pub fn scale_channels(plan: &StackPlan, factor: f64) -> Result<StackPlan> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(format!("channel factor must be positive, got {factor}")));
    }
    let scaled = plan.c0 as f64 * factor;
    if scaled < 1.0 {
        return Err(Error::invalid(format!("{} channels scaled by {factor} leaves no channel", plan.c0)));
    }
    Ok(StackPlan {
        c0: scaled.round() as usize,
        ..plan.clone()
    })
}

/// An edge of a discrete cell.
#[derive(Clone, Debug)]
pub struct DiscreteEdge {
    pub from: usize,
    pub to: usize,
    pub op: OpInstance,
}

#[derive(Clone, Debug)]
pub struct DiscreteCell {
    pub slot: CellSlot,
    pub pre: [Preprocess; 2],
    /// Two edges per intermediate node, in genotype order.
    pub edges: Vec<DiscreteEdge>,
    pub n_intermediate: usize,
}

impl DiscreteCell {
    pub fn build<T: Real>(
        prefix: &str,
        slot: &CellSlot,
        genotype: &CellGenotype,
        affine: bool,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let pre = build_preprocess(prefix, slot, affine, store, rng)?;
        let mut edges = Vec::with_capacity(2 * genotype.n_intermediate());
        for (to, gene) in genotype.genes() {
            let stride = if gene.from < 2 { slot.stride } else { UNIT_STRIDE };
            let name = format!("{prefix}.e{}.{}", edge_index(gene.from, to), gene.op);
            edges.push(DiscreteEdge {
                from: gene.from,
                to,
                op: build_op(gene.op, slot.channels, stride, affine, &name, store, rng)?,
            });
        }
        Ok(Self {
            slot: slot.clone(),
            pre,
            edges,
            n_intermediate: genotype.n_intermediate(),
        })
    }

    /// Drop-path with probability `drop_prob` wraps every edge except plain
    /// skips.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, inputs: (Var, Var), drop_prob: f64) -> Result<Var> {
        let s0 = self.pre[0].forward(f, inputs.0)?;
        let s1 = self.pre[1].forward(f, inputs.1)?;
        let mut nodes = vec![s0, s1];
        for to in 2..2 + self.n_intermediate {
            let mut terms = Vec::with_capacity(2);
            for e in self.edges.iter().filter(|e| e.to == to) {
                let y = e.op.forward(f, nodes[e.from])?;
                let skip = e.op.kind == OpKind::Identity && e.op.stride == UNIT_STRIDE;
                let y = if skip { y } else { f.drop_path(y, drop_prob) };
                terms.push(y);
            }
            let node = f.tape.add_n(&terms);
            nodes.push(node);
        }
        Ok(f.tape.concat(&nodes[2..]))
    }
}

/// A network instantiated from a genotype.
#[derive(Clone, Debug)]
pub struct DiscreteNet<T> {
    pub cfg: NetConfig,
    pub plan: StackPlan,
    pub genotype: Genotype,
    pub store: ParamStore<T>,
    pub stem: Stem,
    pub cells: Vec<DiscreteCell>,
    pub head: ClassifierHead,
    sample: [usize; 4],
}

/// Builds the discrete network. The plan's `c0` overrides `cfg.c0`.
pub fn build_discrete<T: Real>(
    genotype: &Genotype,
    plan: &StackPlan,
    input: Shape,
    cfg: &NetConfig,
    rng: &mut Rng,
) -> Result<DiscreteNet<T>> {
    let violations = validate_genotype(genotype);
    if !violations.is_empty() {
        return Err(Error::invalid(format!("invalid genotype: {}", violations.join("; "))));
    }
    let cfg = NetConfig {
        c0: plan.c0,
        ..cfg.clone()
    };
    let categories = plan.cells();
    for &cat in &categories {
        let n = genotype.cell(cat).n_intermediate();
        if n != cfg.n_intermediate {
            return Err(Error::invalid(format!(
                "{cat} genotype has {n} intermediate nodes, network expects {}",
                cfg.n_intermediate
            )));
        }
    }
    let slots = plan_cells(&categories, input, &cfg)?;
    let mut store = ParamStore::new();
    let stem = Stem::new(input[1], cfg.c0, &mut store, rng)?;
    let mut cells = Vec::with_capacity(slots.len());
    for (k, slot) in slots.iter().enumerate() {
        cells.push(DiscreteCell::build(
            &format!("cells.{k}"),
            slot,
            genotype.cell(slot.category),
            cfg.affine,
            &mut store,
            rng,
        )?);
    }
    let last = slots.last().expect("plan is non-empty").out_channels;
    let head = ClassifierHead::new("head", last, cfg.n_classes, cfg.dropout, &mut store, rng)?;
    Ok(DiscreteNet {
        cfg,
        plan: plan.clone(),
        genotype: genotype.clone(),
        store,
        stem,
        cells,
        head,
        sample: [input[1], input[2], input[3], input[4]],
    })
}

struct ArchView<'a> {
    stem: &'a Stem,
    cells: &'a [DiscreteCell],
    head: &'a ClassifierHead,
    drop_prob: f64,
}

impl ArchView<'_> {
    fn record<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = self.stem.forward(f, x)?;
        let (mut pp, mut p) = (s, s);
        for cell in self.cells {
            let out = cell.forward(f, (pp, p), self.drop_prob)?;
            pp = p;
            p = out;
        }
        self.head.forward(f, p)
    }
}

impl<T: Real> DiscreteNet<T> {
    fn run(&mut self, x: &Tensor<T>, mode: Mode, rng: Rng, wrt: Wrt) -> Result<(Forward<'_, T>, Var)> {
        check_input(x, self.sample)?;
        let mut f = Forward::new(&mut self.store, mode, rng, wrt == Wrt::Weights);
        let xv = f.tape.constant(x.clone());
        let view = ArchView {
            stem: &self.stem,
            cells: &self.cells,
            head: &self.head,
            drop_prob: self.cfg.drop_path,
        };
        let logits = view.record(&mut f, xv)?;
        Ok((f, logits))
    }

    /// Learnable scalars allocated by the builder.
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

impl<T: Real> Network<T> for DiscreteNet<T> {
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
        if wrt == Wrt::Alpha {
            return Err(Error::invalid("a discrete network has no architecture logits"));
        }
        let (f, logits) = self.run(x, mode, rng, wrt)?;
        finish_pass(f, logits, labels, wrt, &[])
    }

    fn logits(&mut self, x: &Tensor<T>, mode: Mode, rng: Rng) -> Result<Tensor<T>> {
        let (f, logits) = self.run(x, mode, rng, Wrt::Nothing)?;
        Ok(f.tape.value(logits).clone())
    }
}
