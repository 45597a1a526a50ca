//! Discrete search space: cell categories, genotypes, counting, derivation
//! from architecture logits, random sampling and serialisation.

mod derive;
mod dot;
mod json;

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

pub use derive::{derive_cell, derive_genotype};
pub use dot::export_dot;
pub use json::{genotype_from_json, genotype_to_json};

use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::tensor::Rng;

/// Intermediate nodes per cell.
pub const DEFAULT_INTERMEDIATE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellCategory {
    #[serde(rename = "s_nc")]
    SpatialNormal,
    #[serde(rename = "s_rc")]
    SpatialReduction,
    #[serde(rename = "t_nc")]
    TemporalNormal,
    #[serde(rename = "t_rc")]
    TemporalReduction,
}

impl CellCategory {
    pub const ALL: [CellCategory; 4] = [
        CellCategory::SpatialNormal,
        CellCategory::SpatialReduction,
        CellCategory::TemporalNormal,
        CellCategory::TemporalReduction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, CellCategory::TemporalNormal | CellCategory::TemporalReduction)
    }

    pub fn is_reduction(self) -> bool {
        matches!(self, CellCategory::SpatialReduction | CellCategory::TemporalReduction)
    }

    /// Candidate operations, zero first.
    pub fn ops(self) -> &'static [OpKind] {
        if self.is_temporal() {
            &OpKind::TEMPORAL
        } else {
            &OpKind::SPATIAL
        }
    }

    /// Key used in JSON files and DOT graph names.
    pub fn key(self) -> &'static str {
        match self {
            CellCategory::SpatialNormal => "s_nc",
            CellCategory::SpatialReduction => "s_rc",
            CellCategory::TemporalNormal => "t_nc",
            CellCategory::TemporalReduction => "t_rc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CellCategory::SpatialNormal => "S-NC",
            CellCategory::SpatialReduction => "S-RC",
            CellCategory::TemporalNormal => "T-NC",
            CellCategory::TemporalReduction => "T-RC",
        }
    }
}

impl fmt::Display for CellCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CellCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        CellCategory::ALL
            .into_iter()
            .find(|c| c.key() == norm)
            .ok_or_else(|| Error::parse("cell category", format!("unknown cell category \"{s}\"")))
    }
}

/// Dense-DAG edges of a cell with `n_intermediate` nodes, ordered by target
/// node then source node: `(2←0), (2←1), (3←0), (3←1), (3←2), …`.
pub fn dense_edges(n_intermediate: usize) -> Vec<(usize, usize)> {
    (2..2 + n_intermediate)
        .flat_map(|to| (0..to).map(move |from| (from, to)))
        .collect()
}

pub fn num_dense_edges(n_intermediate: usize) -> usize {
    (1..=n_intermediate).map(|k| k + 1).sum()
}

/// Index of edge `from → to` in [`dense_edges`] order.
pub fn edge_index(from: usize, to: usize) -> usize {
    debug_assert!(from < to && to >= 2);
    // Edges into nodes 2..to come first: Σ_{j=2}^{to-1} j.
    (2..to).sum::<usize>() + from
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeGene {
    pub from: usize,
    pub op: OpKind,
}

impl EdgeGene {
    pub fn new(from: usize, op: OpKind) -> Self {
        Self { from, op }
    }
}

/// Two incoming genes per intermediate node, sorted by `from`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGenotype {
    pub nodes: Vec<[EdgeGene; 2]>,
}

impl CellGenotype {
    pub fn n_intermediate(&self) -> usize {
        self.nodes.len()
    }

    /// `(target node, gene)` pairs in node order.
    pub fn genes(&self) -> impl Iterator<Item = (usize, &EdgeGene)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, pair)| pair.iter().map(move |g| (i + 2, g)))
    }

    pub fn conv_count(&self) -> usize {
        self.genes().filter(|(_, g)| g.op.is_conv()).count()
    }
}

/// The discrete architecture: one cell genotype per category.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    cells: [CellGenotype; 4],
}

impl Genotype {
    pub fn new(cells: [CellGenotype; 4]) -> Self {
        Self { cells }
    }

    pub fn cell(&self, cat: CellCategory) -> &CellGenotype {
        &self.cells[cat.index()]
    }

    pub fn cell_mut(&mut self, cat: CellCategory) -> &mut CellGenotype {
        &mut self.cells[cat.index()]
    }

    pub fn cells(&self) -> impl Iterator<Item = (CellCategory, &CellGenotype)> {
        CellCategory::ALL.into_iter().map(move |c| (c, self.cell(c)))
    }
}

/// `∏_{k=1..n} [k(k+1)/2 · m²]`: two distinct predecessors and one of `m`
/// non-zero ops per gene, for every intermediate node. Graph isomorphism is
/// not factored out.
pub fn count_cell_architectures(n_intermediate: usize, n_ops_excl_zero: usize) -> BigUint {
    let m2 = BigUint::from(n_ops_excl_zero) * BigUint::from(n_ops_excl_zero);
    (1..=n_intermediate).fold(BigUint::from(1u32), |acc, k| {
        acc * BigUint::from(k * (k + 1) / 2) * &m2
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpaceCount {
    pub spatial: BigUint,
    pub temporal: BigUint,
    pub total: BigUint,
}

/// Cardinalities for `n_intermediate` nodes with the standard op sets; the
/// network total covers two spatial and two temporal categories.
pub fn count_search_space(n_intermediate: usize) -> SearchSpaceCount {
    let spatial = count_cell_architectures(n_intermediate, OpKind::SPATIAL.len() - 1);
    let temporal = count_cell_architectures(n_intermediate, OpKind::TEMPORAL.len() - 1);
    let total = &spatial * &spatial * &temporal * &temporal;
    SearchSpaceCount {
        spatial,
        temporal,
        total,
    }
}

/// The four-node total.
pub fn count_total_search_space() -> BigUint {
    count_search_space(DEFAULT_INTERMEDIATE).total
}

/// The total recomputed from the rounded per-cell figures 7×10⁷ (spatial) and
/// 10⁹ (temporal).
pub fn rounded_total_search_space() -> f64 {
    let spatial = 7e7f64;
    let temporal = 1e9f64;
    spatial * spatial * temporal * temporal
}

/// Uniformly random cell: an unordered pair of distinct predecessors and a
/// uniform non-zero op per gene, redrawn until it holds at least `min_convs`
/// convolutional ops.
pub fn random_cell(
    rng: &mut Rng,
    ops: &[OpKind],
    n_intermediate: usize,
    min_convs: usize,
) -> Result<CellGenotype> {
    let choices: Vec<OpKind> = ops.iter().copied().filter(|&o| o != OpKind::Zero).collect();
    if choices.is_empty() {
        return Err(Error::invalid("op set has no non-zero operation"));
    }
    let conv_choices = choices.iter().filter(|o| o.is_conv()).count();
    if min_convs > 2 * n_intermediate || (min_convs > 0 && conv_choices == 0) {
        return Err(Error::invalid(format!(
            "cannot place {min_convs} convolutions in a {n_intermediate}-node cell"
        )));
    }
    loop {
        let nodes: Vec<[EdgeGene; 2]> = (2..2 + n_intermediate)
            .map(|to| {
                let a = rng.below(to);
                let mut b = rng.below(to - 1);
                if b >= a {
                    b += 1;
                }
                let (lo, hi) = (a.min(b), a.max(b));
                let op_lo = choices[rng.below(choices.len())];
                let op_hi = choices[rng.below(choices.len())];
                [EdgeGene::new(lo, op_lo), EdgeGene::new(hi, op_hi)]
            })
            .collect();
        let cell = CellGenotype { nodes };
        if cell.conv_count() >= min_convs {
            return Ok(cell);
        }
    }
}

/// Random-wired genotype with at least `min_convs` convolutions per cell.
pub fn random_genotype(rng: &mut Rng, min_convs: usize) -> Result<Genotype> {
    random_genotype_with(rng, min_convs, DEFAULT_INTERMEDIATE)
}

pub fn random_genotype_with(rng: &mut Rng, min_convs: usize, n_intermediate: usize) -> Result<Genotype> {
    let mut cells = Vec::with_capacity(4);
    for cat in CellCategory::ALL {
        cells.push(random_cell(rng, cat.ops(), n_intermediate, min_convs)?);
    }
    Ok(Genotype::new(cells.try_into().expect("four cells")))
}

/// Checks every cell invariant; an empty list means the genotype is valid.
pub fn validate_genotype(g: &Genotype) -> Vec<String> {
    let mut out = Vec::new();
    for (cat, cell) in g.cells() {
        if cell.nodes.is_empty() {
            out.push(format!("{cat}: cell has no intermediate nodes"));
        }
        for (i, pair) in cell.nodes.iter().enumerate() {
            let node = i + 2;
            if pair[0].from == pair[1].from {
                out.push(format!("{cat} node {node}: duplicate from {}", pair[0].from));
            }
            if pair[0].from > pair[1].from {
                out.push(format!("{cat} node {node}: genes not sorted by from"));
            }
            for gene in pair {
                if gene.from >= node {
                    out.push(format!("{cat} node {node}: from {} is not a predecessor", gene.from));
                }
                if gene.op == OpKind::Zero {
                    out.push(format!("{cat} node {node}: zero op in genotype"));
                }
                if !cat.is_temporal() && gene.op.is_temporal() {
                    out.push(format!("{cat} node {node}: temporal op in spatial cell ({})", gene.op));
                }
            }
        }
    }
    if g.cells().map(|(_, c)| c.n_intermediate()).collect::<std::collections::BTreeSet<_>>().len() > 1 {
        out.push("cells disagree on the number of intermediate nodes".to_string());
    }
    out
}

#[cfg(test)]
mod tests;
