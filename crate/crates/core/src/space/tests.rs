use std::collections::{HashMap, HashSet};

use num_bigint::BigUint;
use proptest::prelude::*;

use super::*;
use crate::tensor::Rng;
use crate::supernet::ArchParams;

/// Every assignment of (predecessor pair, op pair) to every node.
fn brute_force(n: usize, m: usize) -> usize {
    fn rec(node: usize, n: usize, m: usize) -> usize {
        if node == 2 + n {
            return 1;
        }
        let mut total = 0;
        for a in 0..node {
            for b in a + 1..node {
                for _oa in 0..m {
                    for _ob in 0..m {
                        let _ = (a, b);
                        total += rec(node + 1, n, m);
                    }
                }
            }
        }
        total
    }
    rec(2, n, m)
}

#[test]
fn cell_counts() {
    assert_eq!(count_cell_architectures(4, 5), BigUint::from(70_312_500u64));
    assert_eq!(count_cell_architectures(4, 7), BigUint::from(1_037_664_180u64));
    assert_eq!(count_cell_architectures(1, 5), BigUint::from(25u32));
    assert_eq!(count_cell_architectures(2, 2), BigUint::from(48u32));
}

#[test]
fn counts_match_enumeration() {
    for n in 1..=2 {
        for m in 1..=3 {
            assert_eq!(count_cell_architectures(n, m), BigUint::from(brute_force(n, m)), "n={n} m={m}");
        }
    }
}

#[test]
fn total_is_exact_product() {
    let s = BigUint::from(70_312_500u64);
    let t = BigUint::from(1_037_664_180u64);
    assert_eq!(count_total_search_space(), &s * &s * &t * &t);
    assert_eq!(count_total_search_space().to_string().len(), 34);
    assert!(count_total_search_space().to_string().starts_with("5323"));
    assert_eq!(format!("{:.1e}", rounded_total_search_space()), "4.9e33");
    assert_eq!(count_cell_architectures(1, 1), BigUint::from(1u32));
}

#[test]
fn edge_order_and_index() {
    let edges = dense_edges(4);
    assert_eq!(edges.len(), 14);
    assert_eq!(num_dense_edges(4), 14);
    assert_eq!(&edges[..5], &[(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
    for (i, &(from, to)) in edges.iter().enumerate() {
        assert_eq!(edge_index(from, to), i);
    }
}

#[test]
fn category_names() {
    for c in CellCategory::ALL {
        assert_eq!(c.key().parse::<CellCategory>().unwrap(), c);
        assert_eq!(c.label().parse::<CellCategory>().unwrap(), c);
    }
    assert_eq!(CellCategory::SpatialNormal.ops().len(), 6);
    assert_eq!(CellCategory::TemporalReduction.ops().len(), 8);
    assert!(CellCategory::SpatialReduction.is_reduction());
    assert!(!CellCategory::TemporalNormal.is_reduction());
}

const TINY_OPS: [OpKind; 3] = [OpKind::Zero, OpKind::Identity, OpKind::SepConv1x3x3];

#[test]
fn worked_derivation_example() {
    #[rustfmt::skip]
    let alpha = [
        2.0, 0.5, 0.1,
        0.0, 1.0, 2.0,
        0.0, 0.0, 1.5,
        0.0, 2.5, 0.0,
        0.0, 0.0, 0.0,
    ];
    let cell = derive_cell(&alpha, &TINY_OPS, 2).unwrap();
    assert_eq!(
        cell.nodes[0],
        [EdgeGene::new(0, OpKind::Identity), EdgeGene::new(1, OpKind::SepConv1x3x3)]
    );
    assert_eq!(
        cell.nodes[1],
        [EdgeGene::new(0, OpKind::SepConv1x3x3), EdgeGene::new(1, OpKind::Identity)]
    );
    // Scores quoted for node 3.
    let score = |row: [f64; 3], o: usize| row[o].exp() / row.iter().map(|v| v.exp()).sum::<f64>();
    assert!((score([0.0, 0.0, 1.5], 2) - 0.6914).abs() < 1e-4);
    assert!((score([0.0, 2.5, 0.0], 1) - 0.8590).abs() < 1e-4);
    assert!((score([0.0, 0.0, 0.0], 1) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn all_zero_alpha_uses_tie_breaks() {
    let g = derive_genotype(&ArchParams::<f64>::zeros(4)).unwrap();
    for (_, cell) in g.cells() {
        for pair in &cell.nodes {
            assert_eq!(pair, &[EdgeGene::new(0, OpKind::Identity), EdgeGene::new(1, OpKind::Identity)]);
        }
    }
}

#[test]
fn edge_tie_prefers_lower_from() {
    // Node 3: edges from 1 and 2 tie above edge from 0.
    #[rustfmt::skip]
    let alpha = [
        0.0, 1.0, 0.0,
        0.0, 1.0, 0.0,
        0.0, 0.0, 0.0,
        0.0, 0.0, 3.0,
        0.0, 0.0, 3.0,
    ];
    let cell = derive_cell(&alpha, &TINY_OPS, 2).unwrap();
    assert_eq!(
        cell.nodes[1],
        [EdgeGene::new(1, OpKind::SepConv1x3x3), EdgeGene::new(2, OpKind::SepConv1x3x3)]
    );
}

#[test]
fn zero_never_selected() {
    // Zero dominates every row; the remaining choice still applies.
    let mut alpha = vec![0.0; 15];
    for e in 0..5 {
        alpha[e * 3] = 50.0;
        alpha[e * 3 + 2] = 1.0;
    }
    let cell = derive_cell(&alpha, &TINY_OPS, 2).unwrap();
    assert!(cell.genes().all(|(_, g)| g.op == OpKind::SepConv1x3x3));
}

#[test]
fn dominant_logit_selected() {
    let mut rng = Rng::new(3);
    let mut alpha = ArchParams::<f64>::zeros(4);
    let mut chosen = HashMap::new();
    for cat in CellCategory::ALL {
        let k = cat.ops().len();
        let data = alpha.get_mut(cat).data_mut();
        for e in 0..14 {
            let o = 1 + rng.below(k - 1);
            data[e * k + o] = 20.0;
            chosen.insert((cat, e), cat.ops()[o]);
        }
    }
    let g = derive_genotype(&alpha).unwrap();
    for (cat, cell) in g.cells() {
        for (to, gene) in cell.genes() {
            assert_eq!(gene.op, chosen[&(cat, edge_index(gene.from, to))]);
        }
    }
}

#[test]
fn malformed_alpha_rejected() {
    assert!(derive_cell(&[0.0; 14], &TINY_OPS, 2).is_err());
    assert!(derive_cell(&[f64::NAN; 15], &TINY_OPS, 2).is_err());
}

fn random_alpha(rng: &mut Rng, scale: f64) -> ArchParams<f64> {
    let mut a = ArchParams::<f64>::zeros(4);
    for t in a.tensors_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
    a
}

#[test]
fn derive_is_shift_invariant_per_row() {
    let mut rng = Rng::new(11);
    for _ in 0..100 {
        let a = random_alpha(&mut rng, 1.0);
        let mut b = a.clone();
        for cat in CellCategory::ALL {
            let k = cat.ops().len();
            for row in b.get_mut(cat).data_mut().chunks_mut(k) {
                let c = rng.uniform_range(-10.0, 10.0);
                row.iter_mut().for_each(|v| *v += c);
            }
        }
        assert_eq!(derive_genotype(&a).unwrap(), derive_genotype(&b).unwrap());
    }
}

#[test]
fn one_hot_round_trip() {
    let mut rng = Rng::new(5);
    for _ in 0..50 {
        let g = random_genotype(&mut rng, 0).unwrap();
        let a = ArchParams::<f64>::one_hot(&g, 20.0).unwrap();
        assert_eq!(derive_genotype(&a).unwrap(), g);
    }
}

#[test]
fn derived_genotypes_validate() {
    let mut rng = Rng::new(8);
    for _ in 0..20 {
        let g = derive_genotype(&random_alpha(&mut rng, 2.0)).unwrap();
        assert!(validate_genotype(&g).is_empty());
    }
}

#[test]
fn random_min_convs() {
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        let g = random_genotype(&mut rng, 4).unwrap();
        assert!(validate_genotype(&g).is_empty());
        assert!(g.cells().all(|(_, c)| c.conv_count() >= 4));
    }
    let g = random_genotype(&mut rng, 8).unwrap();
    assert!(g.cells().all(|(_, c)| c.genes().all(|(_, gene)| gene.op.is_conv())));
    assert!(random_genotype(&mut rng, 9).is_err());
}

#[test]
fn random_zero_constraint_takes_first_draw() {
    let mut a = Rng::new(42);
    let mut b = Rng::new(42);
    let g = random_genotype(&mut a, 0).unwrap();
    let mut cells = Vec::new();
    for cat in CellCategory::ALL {
        cells.push(random_cell(&mut b, cat.ops(), 4, 0).unwrap());
    }
    assert_eq!(g, Genotype::new(cells.try_into().unwrap()));
    assert_eq!(a.position(), b.position());
}

#[test]
fn random_cell_is_uniform() {
    let ops = [OpKind::Zero, OpKind::Identity, OpKind::SepConv1x3x3];
    let draws = 100_000usize;
    let mut rng = Rng::new(2024);
    let mut counts: HashMap<CellGenotype, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(random_cell(&mut rng, &ops, 2, 0).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 48);
    let p = 1.0 / 48.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (g, &c) in &counts {
        let dev = (c as f64 - draws as f64 * p).abs();
        assert!(dev <= 3.0 * sigma, "{g:?}: {c} draws, {:.1} sigma", dev / sigma);
    }
}

#[test]
fn validation_reports_violations() {
    let mut rng = Rng::new(0);
    let mut g = random_genotype(&mut rng, 0).unwrap();
    g.cell_mut(CellCategory::SpatialNormal).nodes[0][0].op = OpKind::TConv3_3x3;
    let v = validate_genotype(&g);
    assert!(v.iter().any(|m| m.contains("temporal op in spatial cell")), "{v:?}");

    let mut g = random_genotype(&mut rng, 0).unwrap();
    let node = &mut g.cell_mut(CellCategory::TemporalNormal).nodes[1];
    node[1].from = node[0].from;
    let v = validate_genotype(&g);
    assert!(v.iter().any(|m| m.contains("duplicate from")), "{v:?}");

    let mut g = random_genotype(&mut rng, 0).unwrap();
    g.cell_mut(CellCategory::TemporalReduction).nodes[0][1] = EdgeGene::new(2, OpKind::Zero);
    let v = validate_genotype(&g);
    assert!(v.iter().any(|m| m.contains("zero op")));
    assert!(v.iter().any(|m| m.contains("not a predecessor")));
}

#[test]
fn json_round_trip_and_schema() {
    let mut rng = Rng::new(9);
    let g = random_genotype(&mut rng, 2).unwrap();
    let text = genotype_to_json(&g);
    assert_eq!(genotype_from_json(&text).unwrap(), g);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["cells"]["s_nc"]["nodes"].as_array().unwrap().len(), 4);
    assert!(v["cells"]["t_rc"]["nodes"][0][0]["from"].is_u64());
    assert!(v["cells"]["t_rc"]["nodes"][0][0]["op"].is_string());
}

#[test]
fn json_errors_name_the_problem() {
    let mut rng = Rng::new(9);
    let text = genotype_to_json(&random_genotype(&mut rng, 0).unwrap());
    let first_op = serde_json::from_str::<serde_json::Value>(&text).unwrap()["cells"]["s_nc"]["nodes"][0][0]["op"]
        .as_str()
        .unwrap()
        .to_string();
    let bad = text.replacen(&format!("\"{first_op}\""), "\"conv_9x9\"", 1);
    let err = genotype_from_json(&bad).unwrap_err().to_string();
    assert!(err.contains("conv_9x9"), "{err}");
    assert!(err.contains("line"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["cells"].as_object_mut().unwrap().remove("t_nc");
    let err = genotype_from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("t_nc"), "{err}");

    assert!(genotype_from_json("{").is_err());
    let err = genotype_from_json(&text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap_err();
    assert!(err.to_string().contains("version"));
}

/// Minimal DOT statement grammar: `digraph ID { stmt; ... }` with node,
/// attribute and edge statements.
fn parse_dot(text: &str) -> Result<(String, Vec<(String, String, Option<String>)>, HashSet<String>), String> {
    let text = text.trim();
    let rest = text.strip_prefix("digraph ").ok_or("missing digraph keyword")?;
    let open = rest.find('{').ok_or("missing {")?;
    let id = rest[..open].trim().to_string();
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(format!("bad graph id {id:?}"));
    }
    let body = rest[open + 1..].strip_suffix('}').ok_or("missing }")?;
    let ident = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    let mut edges = Vec::new();
    let mut nodes = HashSet::new();
    for stmt in body.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (head, attrs) = match stmt.find('[') {
            Some(i) => {
                let a = stmt[i..].strip_prefix('[').and_then(|a| a.strip_suffix(']')).ok_or("bad attr list")?;
                (stmt[..i].trim(), Some(a))
            }
            None => (stmt, None),
        };
        let label = attrs.and_then(|a| {
            a.split(',')
                .find_map(|kv| kv.trim().strip_prefix("label=\"").and_then(|v| v.strip_suffix('"')))
                .map(str::to_string)
        });
        if let Some((a, b)) = head.split_once("->") {
            let (a, b) = (a.trim(), b.trim());
            if !ident(a) || !ident(b) {
                return Err(format!("bad edge {stmt:?}"));
            }
            edges.push((a.to_string(), b.to_string(), label));
        } else if let Some((k, v)) = head.split_once('=') {
            if !ident(k.trim()) || v.trim().is_empty() {
                return Err(format!("bad attribute {stmt:?}"));
            }
        } else if ident(head) {
            nodes.insert(head.to_string());
        } else {
            return Err(format!("bad statement {stmt:?}"));
        }
    }
    Ok((id, edges, nodes))
}

#[test]
fn dot_export_format() {
    let mut rng = Rng::new(4);
    let mut g = random_genotype(&mut rng, 0).unwrap();
    g.cell_mut(CellCategory::SpatialNormal).nodes[0] =
        [EdgeGene::new(0, OpKind::Identity), EdgeGene::new(1, OpKind::SepConv1x3x3)];
    let graphs = export_dot(&g);
    assert_eq!(graphs.len(), 4);
    let (cat, s_nc) = &graphs[0];
    assert_eq!(*cat, CellCategory::SpatialNormal);
    assert!(s_nc.contains("in_0 -> n2 [label=\"identity\"];"));
    assert!(s_nc.contains("in_1 -> n2 [label=\"sep_conv_1x3x3\"];"));
    for (cat, text) in &graphs {
        let (id, edges, nodes) = parse_dot(text).unwrap();
        assert_eq!(id, cat.key());
        for n in ["in_0", "in_1", "n2", "n3", "n4", "n5", "out"] {
            assert!(nodes.contains(n), "{n} missing");
        }
        let labelled = edges.iter().filter(|e| e.2.is_some()).count();
        assert_eq!(labelled, 8);
        for i in 2..6 {
            let to_out = edges.iter().filter(|e| e.0 == format!("n{i}") && e.1 == "out").count();
            assert_eq!(to_out, 1);
        }
        for (a, b, _) in &edges {
            assert!(nodes.contains(a) && nodes.contains(b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_genotypes_are_valid(seed in any::<u64>(), min_convs in 0usize..=6) {
        let mut rng = Rng::new(seed);
        let g = random_genotype(&mut rng, min_convs).unwrap();
        prop_assert!(validate_genotype(&g).is_empty());
        prop_assert_eq!(genotype_from_json(&genotype_to_json(&g)).unwrap(), g.clone());
        let a = ArchParams::<f32>::one_hot(&g, 20.0).unwrap();
        prop_assert_eq!(derive_genotype(&a).unwrap(), g);
    }

    #[test]
    fn counts_match_enumeration_prop(n in 1usize..=2, m in 1usize..=3) {
        prop_assert_eq!(count_cell_architectures(n, m), BigUint::from(brute_force(n, m)));
    }
}
