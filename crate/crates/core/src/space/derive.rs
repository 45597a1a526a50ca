use std::cmp::Ordering;

use super::{num_dense_edges, CellCategory, CellGenotype, EdgeGene, Genotype};
use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::supernet::ArchParams;
use crate::tensor::{softmax_in_place, Real};

/// Discretises one cell from its logits, `alpha[e * ops.len() + o]` in dense
/// edge order.
///
/// Each edge proposes its strongest non-zero op, scored by the softmax over
/// the full row. Each node keeps its two best-scoring incoming edges. Ties go
/// to the lower op index within an edge and to the lower source node between
/// edges.
pub fn derive_cell(alpha: &[f64], ops: &[OpKind], n_intermediate: usize) -> Result<CellGenotype> {
    let k = ops.len();
    let n_edges = num_dense_edges(n_intermediate);
    if n_intermediate == 0 || k == 0 || alpha.len() != n_edges * k {
        return Err(Error::Shape(format!(
            "alpha has {} entries, expected {n_edges} edges x {k} ops",
            alpha.len()
        )));
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("architecture logits".into()));
    }
    let mut rows = alpha.chunks(k);
    let mut nodes = Vec::with_capacity(n_intermediate);
    for to in 2..2 + n_intermediate {
        // (from, op index, score) per incoming edge.
        let mut candidates: Vec<(usize, usize, f64)> = Vec::with_capacity(to);
        for from in 0..to {
            let row = rows.next().expect("row count checked");
            let mut probs = row.to_vec();
            softmax_in_place(&mut probs);
            let mut best: Option<usize> = None;
            for (o, &op) in ops.iter().enumerate() {
                if op == OpKind::Zero {
                    continue;
                }
                // Argmax on the raw logits keeps the choice exactly shift invariant.
                if best.is_none_or(|b| row[o] > row[b]) {
                    best = Some(o);
                }
            }
            let best = best.ok_or_else(|| Error::invalid("op set has no non-zero operation"))?;
            candidates.push((from, best, probs[best]));
        }
        // Stable sort: equal scores keep ascending `from`.
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
        let mut kept = [candidates[0], candidates[1]];
        kept.sort_by_key(|c| c.0);
        nodes.push(kept.map(|(from, o, _)| EdgeGene::new(from, ops[o])));
    }
    Ok(CellGenotype { nodes })
}

/// Discretises every cell category.
pub fn derive_genotype<T: Real>(alpha: &ArchParams<T>) -> Result<Genotype> {
    let n = alpha.n_intermediate();
    let mut cells = Vec::with_capacity(4);
    for cat in CellCategory::ALL {
        let flat: Vec<f64> = alpha.get(cat).data().iter().map(|v| v.as_f64()).collect();
        cells.push(derive_cell(&flat, cat.ops(), n)?);
    }
    Ok(Genotype::new(cells.try_into().expect("four cells")))
}
