use super::*;
use crate::net::plan_cells;
use crate::ops::OpKind;
use crate::tensor::numel;

const SEARCH_PLAN: [CellCategory; 4] = [
    CellCategory::SpatialNormal,
    CellCategory::SpatialReduction,
    CellCategory::TemporalNormal,
    CellCategory::TemporalReduction,
];

fn gaussian<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = Rng::new(seed);
    Tensor::from_vec(shape, (0..numel(&shape)).map(|_| T::from_f64_lossy(rng.normal())).collect()).unwrap()
}

#[test]
fn edge_weight_examples() {
    assert_eq!(edge_weights(&[0.0f64; 4]), vec![0.25; 4]);
    let w = edge_weights(&[0.0f64, 2f64.ln()]);
    assert!((w[0] - 1.0 / 3.0).abs() < 1e-15 && (w[1] - 2.0 / 3.0).abs() < 1e-15);
    let mut rng = Rng::new(0);
    for _ in 0..100 {
        let row: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
        let c = rng.uniform_range(-5.0, 5.0) as f32;
        let shifted: Vec<f32> = row.iter().map(|v| v + c).collect();
        let (a, b) = (edge_weights(&row), edge_weights(&shifted));
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(a.iter().all(|&v| v > 0.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }
}

fn edge(kinds: &[OpKind], c: usize, store: &mut ParamStore<f64>) -> Vec<OpInstance> {
    let mut rng = Rng::new(7);
    kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| build_op(k, c, UNIT_STRIDE, false, &format!("o{i}"), store, &mut rng).unwrap())
        .collect()
}

fn mixed(ops: &[OpInstance], store: &mut ParamStore<f64>, alpha: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
    let mut f = Forward::new(store, Mode::Eval, Rng::new(0), false);
    let a = f.tape.constant(Tensor::vector(alpha));
    let w = f.tape.softmax_last(a);
    let xv = f.tape.constant(x.clone());
    let y = mixed_op_forward(&mut f, ops, w, 0, xv).unwrap();
    f.tape.value(y).clone()
}

#[test]
fn mixed_zero_identity_halves() {
    let mut store = ParamStore::new();
    let ops = edge(&[OpKind::Zero, OpKind::Identity], 3, &mut store);
    let x = gaussian::<f64>([2, 3, 2, 4, 4], 1);
    let y = mixed(&ops, &mut store, &[0.0, 0.0], &x);
    assert_eq!(y, x.map(|v| 0.5 * v));
    let y = mixed(&ops, &mut store, &[0.0, 20.0], &x);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-12));
    }
}

#[test]
fn mixed_rejects_wrong_row_width() {
    let mut store = ParamStore::new();
    let ops = edge(&[OpKind::Zero, OpKind::Identity], 3, &mut store);
    let mut f = Forward::new(&mut store, Mode::Eval, Rng::new(0), false);
    let a = f.tape.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
    let xv = f.tape.constant(gaussian::<f64>([1, 3, 1, 2, 2], 0));
    assert!(mixed_op_forward(&mut f, &ops, a, 0, xv).is_err());
}

#[test]
fn mixed_rejects_shape_mismatch() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let ops = vec![
        build_op(OpKind::Identity, 3, UNIT_STRIDE, false, "a", &mut store, &mut rng).unwrap(),
        build_op(OpKind::MaxPool1x3x3, 3, [1, 2, 2], false, "b", &mut store, &mut rng).unwrap(),
    ];
    let mut f = Forward::new(&mut store, Mode::Eval, Rng::new(0), false);
    let a = f.tape.constant(Tensor::vector(&[0.0, 0.0]));
    let xv = f.tape.constant(gaussian::<f64>([1, 3, 1, 4, 4], 0));
    assert!(matches!(mixed_op_forward(&mut f, &ops, a, 0, xv), Err(Error::Shape(_))));
}

#[test]
fn alpha_gradient_through_mixed_op() {
    for seed in 0..2 {
        let err = gradcheck_mixed_alpha(&OpKind::TEMPORAL, seed).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
        let err = gradcheck_mixed_alpha(&OpKind::SPATIAL, seed).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn identical_ops_make_alpha_irrelevant() {
    let mut store = ParamStore::new();
    let ops = edge(&[OpKind::Identity, OpKind::Identity, OpKind::Identity], 2, &mut store);
    let x = gaussian::<f64>([1, 2, 2, 3, 3], 4);
    for alpha in [[0.0, 1.0, -2.0], [5.0, 0.0, 0.3]] {
        let y = mixed(&ops, &mut store, &alpha, &x);
        assert!(y.max_abs_diff(&x) < 1e-12);
    }
    // ∂/∂α vanishes: the weights sum to one.
    let mut f = Forward::new(&mut store, Mode::Eval, Rng::new(0), false);
    let a = f.tape.param(Tensor::vector(&[0.3, -1.0, 2.0]));
    let w = f.tape.softmax_last(a);
    let xv = f.tape.constant(x.clone());
    let y = mixed_op_forward(&mut f, &ops, w, 0, xv).unwrap();
    let s = f.tape.sum(y);
    let (tape, _) = f.finish();
    let g = tape.backward(s).unwrap();
    assert!(g.get(a).unwrap().data().iter().all(|v| v.abs() < 1e-12));
}

fn tiny_cfg() -> NetConfig {
    NetConfig::search(4, 8)
}

#[test]
fn supercell_shapes_and_zero_alpha() {
    let slots = plan_cells(&SEARCH_PLAN, [2, 1, 4, 8, 8], &tiny_cfg()).unwrap();
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(0);
    let cell = SuperCell::build("c", &slots[1], 4, false, &mut store, &mut rng).unwrap();
    let x0 = gaussian::<f64>([2, slots[1].in_channels[0], 4, 8, 8], 1);
    let x1 = gaussian::<f64>([2, slots[1].in_channels[1], 4, 8, 8], 2);

    let run = |store: &mut ParamStore<f64>, alpha: Tensor<f64>| {
        let mut f = Forward::new(store, Mode::Train, Rng::new(0), false);
        let a = f.tape.constant(alpha);
        let w = f.tape.softmax_last(a);
        let (v0, v1) = (f.tape.constant(x0.clone()), f.tape.constant(x1.clone()));
        let y = cell.forward(&mut f, (v0, v1), w).unwrap();
        f.tape.value(y).clone()
    };
    let y = run(&mut store, gaussian([1, 1, 1, 14, 6], 3));
    // S-RC: width doubles to 8 per node, four nodes, spatial stride 2.
    assert_eq!(y.shape(), [2, 32, 4, 4, 4]);

    let mut zero = Tensor::zeros([1, 1, 1, 14, 6]);
    for e in 0..14 {
        zero.data_mut()[e * 6] = 1e9;
    }
    let y = run(&mut store, zero);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn supercell_width_is_four_c() {
    let cfg = NetConfig::search(16, 8);
    let slots = plan_cells(&[CellCategory::SpatialNormal], [1, 1, 2, 4, 4], &cfg).unwrap();
    assert_eq!(slots[0].out_channels, 64);
}

#[test]
fn search_network_logits_shape() {
    let cfg = NetConfig::search(16, 8);
    let mut net = build_supernet::<f32>(&SEARCH_PLAN, [2, 1, 8, 32, 32], &cfg, &mut Rng::new(0)).unwrap();
    let x = gaussian::<f32>([2, 1, 8, 32, 32], 1);
    let y = net.logits(&x, Mode::Eval, Rng::new(0)).unwrap();
    assert_eq!(y.shape(), [2, 8, 1, 1, 1]);
    assert!(y.is_finite());
    let widths: Vec<usize> = net.cells.iter().map(|c| c.slot.channels).collect();
    assert_eq!(widths, vec![16, 32, 32, 64]);
}

#[test]
fn indivisible_input_rejected() {
    let r = build_supernet::<f32>(&SEARCH_PLAN, [1, 1, 8, 30, 30], &tiny_cfg(), &mut Rng::new(0));
    assert!(r.is_err());
    let r = build_supernet::<f32>(&SEARCH_PLAN, [1, 1, 5, 32, 32], &tiny_cfg(), &mut Rng::new(0));
    assert!(r.is_err());
}

#[test]
fn eval_forward_is_deterministic_and_batch_independent() {
    let mut net = build_supernet::<f64>(&SEARCH_PLAN, [3, 1, 4, 8, 8], &tiny_cfg(), &mut Rng::new(2)).unwrap();
    let x = gaussian::<f64>([3, 1, 4, 8, 8], 5);
    let a = net.logits(&x, Mode::Eval, Rng::new(0)).unwrap();
    let b = net.logits(&x, Mode::Eval, Rng::new(99)).unwrap();
    assert_eq!(a, b);
    let single = net.logits(&x.gather_samples(&[1]), Mode::Eval, Rng::new(0)).unwrap();
    for k in 0..8 {
        assert!((single.data()[k] - a.data()[8 + k]).abs() < 1e-12);
    }
}

#[test]
fn passes_return_requested_gradients() {
    let mut net = build_supernet::<f64>(&SEARCH_PLAN, [2, 1, 4, 8, 8], &tiny_cfg(), &mut Rng::new(2)).unwrap();
    let x = gaussian::<f64>([2, 1, 4, 8, 8], 5);
    let labels = [3, 6];
    let pa = net.pass(&x, &labels, Mode::Train, Rng::new(0), Wrt::Alpha).unwrap();
    let ag = pa.alpha_grads.unwrap();
    assert_eq!(ag.len(), 4);
    for (g, a) in ag.iter().zip(net.alpha.tensors()) {
        assert_eq!(g.shape(), a.shape());
        assert!(g.data().iter().any(|v| *v != 0.0));
    }
    assert!(pa.weight_grads.is_empty());

    let pw = net.pass(&x, &labels, Mode::Train, Rng::new(0), Wrt::Weights).unwrap();
    assert!(pw.alpha_grads.is_none());
    assert_eq!(pw.weight_grads.len(), net.store.len());
    assert!((pa.loss - pw.loss).abs() < 1e-9);
    assert!(pw.loss > 0.0);
}

#[test]
fn alpha_json_round_trip() {
    let a = ArchParams::<f32>::init(4, &mut Rng::new(3)).unwrap();
    let text = a.to_json();
    assert_eq!(ArchParams::<f32>::from_json(&text).unwrap(), a);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["alpha"]["s_nc"].as_array().unwrap().len(), 14);
    assert_eq!(v["alpha"]["s_nc"][0].as_array().unwrap().len(), 6);
    assert_eq!(v["alpha"]["t_rc"][13].as_array().unwrap().len(), 8);

    let mut bad = v.clone();
    bad["alpha"]["t_nc"][2] = serde_json::json!([1.0, 2.0]);
    let err = ArchParams::<f32>::from_json(&bad.to_string()).unwrap_err().to_string();
    assert!(err.contains("t_nc") && err.contains("row 2"), "{err}");
    let mut bad = v;
    bad["alpha"].as_object_mut().unwrap().remove("s_rc");
    assert!(ArchParams::<f32>::from_json(&bad.to_string()).unwrap_err().to_string().contains("s_rc"));
}
