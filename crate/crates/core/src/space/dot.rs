use std::fmt::Write;

use super::Genotype;

fn node_name(i: usize) -> String {
    if i < 2 {
        format!("in_{i}")
    } else {
        format!("n{i}")
    }
}

/// One `digraph` per cell category, keyed by category.
pub fn export_dot(g: &Genotype) -> Vec<(super::CellCategory, String)> {
    g.cells()
        .map(|(cat, cell)| {
            let mut s = String::new();
            let _ = writeln!(s, "digraph {} {{", cat.key());
            let _ = writeln!(s, "  rankdir=LR;");
            let _ = writeln!(s, "  label=\"{}\";", cat.label());
            let _ = writeln!(s, "  in_0 [shape=box];");
            let _ = writeln!(s, "  in_1 [shape=box];");
            for i in 2..2 + cell.n_intermediate() {
                let _ = writeln!(s, "  {} [shape=ellipse];", node_name(i));
            }
            let _ = writeln!(s, "  out [shape=box];");
            for (to, gene) in cell.genes() {
                let _ = writeln!(s, "  {} -> {} [label=\"{}\"];", node_name(gene.from), node_name(to), gene.op);
            }
            for i in 2..2 + cell.n_intermediate() {
                let _ = writeln!(s, "  {} -> out;", node_name(i));
            }
            s.push_str("}\n");
            (cat, s)
        })
        .collect()
}
