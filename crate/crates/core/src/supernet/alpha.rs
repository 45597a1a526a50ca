use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{edge_index, num_dense_edges, CellCategory, Genotype};
use crate::tensor::{seeded_init, InitKind, Real, Rng, Tensor};

/// Architecture logits, one `[1, 1, 1, n_edges, n_ops]` matrix per cell
/// category, shared by every cell of that category.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams<T> {
    n_intermediate: usize,
    alpha: Vec<Tensor<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlphaFile {
    version: u32,
    alpha: BTreeMap<CellCategory, Vec<Vec<f64>>>,
}

fn matrix_shape(n_intermediate: usize, cat: CellCategory) -> [usize; 5] {
    [1, 1, 1, num_dense_edges(n_intermediate), cat.ops().len()]
}

impl<T: Real> ArchParams<T> {
    pub fn zeros(n_intermediate: usize) -> Self {
        Self {
            n_intermediate,
            alpha: CellCategory::ALL
                .iter()
                .map(|&c| Tensor::zeros(matrix_shape(n_intermediate, c)))
                .collect(),
        }
    }

    /// Small Gaussian logits, drawn category by category.
    pub fn init(n_intermediate: usize, rng: &mut Rng) -> Result<Self> {
        let alpha = CellCategory::ALL
            .iter()
            .map(|&c| seeded_init(InitKind::AlphaSmallNormal, matrix_shape(n_intermediate, c), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_intermediate, alpha })
    }

    /// Logits that make `g` the argmax everywhere: `+magnitude` on the gene op
    /// of kept edges and on `zero` for pruned edges.
    pub fn one_hot(g: &Genotype, magnitude: f64) -> Result<Self> {
        let n = g.cell(CellCategory::SpatialNormal).n_intermediate();
        let mut out = Self::zeros(n);
        for (cat, cell) in g.cells() {
            if cell.n_intermediate() != n {
                return Err(Error::invalid("cells disagree on the number of intermediate nodes"));
            }
            let ops = cat.ops();
            let k = ops.len();
            let m = T::from_f64_lossy(magnitude);
            let data = out.alpha[cat.index()].data_mut();
            for e in 0..num_dense_edges(n) {
                data[e * k] = m;
            }
            for (to, gene) in cell.genes() {
                let e = edge_index(gene.from, to);
                let o = ops
                    .iter()
                    .position(|&op| op == gene.op)
                    .ok_or_else(|| Error::invalid(format!("{} is not available in {cat} cells", gene.op)))?;
                data[e * k] = T::zero();
                data[e * k + o] = m;
            }
        }
        Ok(out)
    }

    pub fn n_intermediate(&self) -> usize {
        self.n_intermediate
    }

    pub fn get(&self, cat: CellCategory) -> &Tensor<T> {
        &self.alpha[cat.index()]
    }

    pub fn get_mut(&mut self, cat: CellCategory) -> &mut Tensor<T> {
        &mut self.alpha[cat.index()]
    }

    /// Matrices in [`CellCategory::ALL`] order.
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.alpha
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.alpha
    }

    /// Logits of edge `e` in category `cat`.
    pub fn row(&self, cat: CellCategory, e: usize) -> &[T] {
        let k = cat.ops().len();
        &self.get(cat).data()[e * k..(e + 1) * k]
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().all(Tensor::is_finite)
    }

    pub fn to_json(&self) -> String {
        let alpha = CellCategory::ALL
            .iter()
            .map(|&c| {
                let k = c.ops().len();
                let rows = self.get(c).data().chunks(k).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
                (c, rows)
            })
            .collect();
        serde_json::to_string_pretty(&AlphaFile { version: 1, alpha }).expect("alpha serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: AlphaFile = serde_json::from_str(text).map_err(|e| {
            Error::parse(format!("alpha line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        if file.version != 1 {
            return Err(Error::parse("alpha field version", format!("unsupported version {}", file.version)));
        }
        let mut n_intermediate = None;
        let mut alpha = Vec::with_capacity(4);
        for cat in CellCategory::ALL {
            let rows = file
                .alpha
                .get(&cat)
                .ok_or_else(|| Error::parse(format!("alpha field {}", cat.key()), "missing cell category"))?;
            let n = (1..=64)
                .find(|&n| num_dense_edges(n) == rows.len())
                .ok_or_else(|| Error::parse(format!("alpha field {}", cat.key()), format!("{} rows is not a dense cell", rows.len())))?;
            if *n_intermediate.get_or_insert(n) != n {
                return Err(Error::parse(format!("alpha field {}", cat.key()), "row count differs between categories"));
            }
            let k = cat.ops().len();
            let mut data = Vec::with_capacity(rows.len() * k);
            for (e, row) in rows.iter().enumerate() {
                if row.len() != k {
                    return Err(Error::parse(
                        format!("alpha field {} row {e}", cat.key()),
                        format!("expected {k} logits, found {}", row.len()),
                    ));
                }
                data.extend(row.iter().map(|&v| T::from_f64_lossy(v)));
            }
            alpha.push(Tensor::from_vec(matrix_shape(n, cat), data)?);
        }
        let out = Self {
            n_intermediate: n_intermediate.expect("four categories"),
            alpha,
        };
        if !out.is_finite() {
            return Err(Error::NonFinite("alpha file holds non-finite logits".into()));
        }
        Ok(out)
    }
}
