use proptest::prelude::*;

use super::*;
use crate::tensor::{numel, Rng};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_train: 16,
        n_val: 8,
        ..SyntheticSpec::default()
    }
}

fn bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    write_dataset(ds, &mut out).unwrap();
    out
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic(&small_spec(), 5).unwrap();
    let b = generate_synthetic(&small_spec(), 5).unwrap();
    assert_eq!(bytes(&a.train), bytes(&b.train));
    assert_eq!(bytes(&a.val), bytes(&b.val));
    let c = generate_synthetic(&small_spec(), 6).unwrap();
    assert_ne!(bytes(&a.train), bytes(&c.train));
}

#[test]
fn classes_are_balanced() {
    let spec = SyntheticSpec { n_val: 8, ..SyntheticSpec::default() };
    let s = generate_synthetic(&spec, 0).unwrap();
    assert_eq!(s.train.len(), 800);
    assert_eq!(s.train.class_histogram(), vec![100; 8]);
    assert_eq!(s.val.class_histogram(), vec![1; 8]);
    assert_eq!(s.train.clip_shape(), [1, 16, 40, 40]);
}

fn frame(ds: &Dataset, i: usize, t: usize) -> Vec<f32> {
    let [_, _, h, w] = ds.clip_shape();
    ds.clip(i).data()[t * h * w..(t + 1) * h * w].to_vec()
}

#[test]
fn noiseless_motion_is_an_exact_shift() {
    let spec = SyntheticSpec { noise: 0.0, ..small_spec() };
    let ds = generate_synthetic(&spec, 1).unwrap().train;
    let s = spec.size;
    for i in 0..ds.len() {
        let label = ds.labels[i];
        let (dy, dx) = direction(label);
        for t in 0..spec.length - 1 {
            let (a, b) = (frame(&ds, i, t), frame(&ds, i, t + 1));
            // Mass is preserved: the shape never leaves the frame.
            assert_eq!(a.iter().sum::<f32>(), b.iter().sum::<f32>());
            let v = spec.velocity as isize;
            for y in 2..s - 2 {
                for x in 2..s - 2 {
                    let (sy, sx) = (y as isize - dy * v, x as isize - dx * v);
                    assert_eq!(b[y * s + x], a[sy as usize * s + sx as usize], "clip {i} t {t}");
                }
            }
        }
        assert!(frame(&ds, i, 0).iter().all(|&p| p == 0.0 || p == 1.0));
    }
}

#[test]
fn shapes_differ_but_directions_share_a_mask() {
    let spec = SyntheticSpec { noise: 0.0, ..small_spec() };
    let ds = generate_synthetic(&spec, 2).unwrap().train;
    for i in 0..ds.len() {
        let mass: f32 = frame(&ds, i, 0).iter().sum();
        let expect = shape_mask(ds.labels[i], spec.shape_side).iter().filter(|&&m| m).count() as f32;
        assert_eq!(mass, expect);
    }
    assert_eq!(shape_mask(0, 6).iter().filter(|&&m| m).count(), 36);
    assert_eq!(shape_mask(4, 6).iter().filter(|&&m| m).count(), 20);
}

#[test]
fn pixels_stay_in_unit_range() {
    let ds = generate_synthetic(&small_spec(), 3).unwrap().train;
    assert!(ds.clips.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn bad_specs_rejected() {
    assert!(SyntheticSpec { length: 7, ..small_spec() }.validate().is_err());
    assert!(SyntheticSpec { size: 15, ..small_spec() }.validate().is_err());
    assert!(SyntheticSpec { n_train: 10, ..small_spec() }.validate().is_err());
    assert!(SyntheticSpec { velocity: 3, ..small_spec() }.validate().is_err());
    assert!(SyntheticSpec { noise: -1.0, ..small_spec() }.validate().is_err());
    assert!(generate_synthetic(&SyntheticSpec { length: 32, ..small_spec() }, 0).is_err());
}

#[test]
fn file_round_trip() {
    let ds = generate_synthetic(&small_spec(), 4).unwrap().val;
    let raw = bytes(&ds);
    assert_eq!(&raw[..4], b"PVN1");
    assert_eq!(raw.len(), 24 + ds.len() * (4 + 4 * 16 * 40 * 40));
    let back = read_dataset(&raw[..]).unwrap();
    assert_eq!(back.labels, ds.labels);
    let same_bits = back.clips.data().iter().zip(ds.clips.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same_bits);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.pvn");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), raw);
    assert_eq!(load_dataset(&path).unwrap(), ds);
}

#[test]
fn malformed_files_rejected() {
    let ds = generate_synthetic(&small_spec(), 4).unwrap().val;
    let raw = bytes(&ds);
    assert!(matches!(read_dataset(&raw[..raw.len() - 1]), Err(Error::Format(_))));
    let mut bad = raw.clone();
    bad[0] = b'Q';
    assert!(matches!(read_dataset(&bad[..]), Err(Error::Format(_))));
    let mut bad = raw.clone();
    bad[4] = 2;
    assert!(read_dataset(&bad[..]).is_err());
    let mut bad = raw.clone();
    bad[24] = 9;
    assert!(read_dataset(&bad[..]).is_err());
    let mut long = raw.clone();
    long.push(0);
    assert!(read_dataset(&long[..]).is_err());
}

#[test]
fn clip_sampling() {
    let mut rng = Rng::new(0);
    let mut starts = std::collections::HashSet::new();
    for _ in 0..50 {
        let idx = sample_clip(64, 64, 8, &mut rng, Mode::Train).unwrap();
        assert_eq!(idx, vec![0, 8, 16, 24, 32, 40, 48, 56]);
        let idx = sample_clip(20, 8, 8, &mut rng, Mode::Train).unwrap();
        assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
        starts.insert(idx[0]);
    }
    assert_eq!(starts.len(), 13);
    assert_eq!(sample_clip(20, 8, 4, &mut rng, Mode::Eval).unwrap(), vec![6, 8, 10, 12]);
    assert_eq!(
        sample_clip(20, 8, 4, &mut Rng::new(1), Mode::Eval).unwrap(),
        sample_clip(20, 8, 4, &mut Rng::new(2), Mode::Eval).unwrap()
    );
    assert!(sample_clip(8, 16, 8, &mut rng, Mode::Train).is_err());
    assert!(sample_clip(16, 8, 9, &mut rng, Mode::Train).is_err());
}

fn clip_from(shape: Shape, f: impl Fn(usize) -> f32) -> Tensor<f32> {
    Tensor::from_vec(shape, (0..numel(&shape)).map(f).collect()).unwrap()
}

#[test]
fn augment_identity_when_no_resize_needed() {
    let x = clip_from([1, 1, 3, 32, 32], |i| (i % 97) as f32 / 97.0);
    for mode in [Mode::Train, Mode::Eval] {
        let y = augment(&x, (32, 32), 32, &mut Rng::new(0), mode).unwrap();
        assert_eq!(y, x);
    }
}

#[test]
fn augment_keeps_constant_images_constant() {
    let x = clip_from([1, 1, 2, 40, 40], |_| 0.3);
    let mut rng = Rng::new(1);
    for _ in 0..10 {
        let y = augment(&x, (36, 48), 32, &mut rng, Mode::Train).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 32, 32]);
        assert!(y.data().iter().all(|&v| v == 0.3));
    }
    let plane = vec![0.7f32; 5 * 9];
    assert!(resize_bilinear(&plane, 5, 9, 13, 4).iter().all(|&v| v == 0.7));
}

#[test]
fn augment_transforms_all_frames_alike() {
    // Every frame equal in, every frame equal out.
    let x = clip_from([1, 1, 4, 40, 40], |i| ((i % 1600) * 7 % 13) as f32);
    let y = augment(&x, (36, 48), 32, &mut Rng::new(3), Mode::Train).unwrap();
    let f: Vec<&[f32]> = y.data().chunks(32 * 32).collect();
    assert!(f.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn augment_eval_is_pure_and_centred() {
    let x = clip_from([1, 1, 2, 40, 40], |i| (i % 1600) as f32);
    let a = augment(&x, (36, 48), 32, &mut Rng::new(0), Mode::Eval).unwrap();
    let b = augment(&x, (36, 48), 32, &mut Rng::new(9), Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert!(augment(&x, (36, 48), 40, &mut Rng::new(0), Mode::Eval).is_err());
    assert!(augment(&x, (48, 36), 32, &mut Rng::new(0), Mode::Eval).is_err());
}

/// Half-pixel-centre bilinear interpolation evaluated pointwise, for
/// comparison with the separable implementation.
fn reference_bilinear(p: &[f32], h: usize, w: usize, oh: usize, ow: usize, y: usize, x: usize) -> f64 {
    let src = |o: usize, n_in: usize, n_out: usize| ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let (sy, sx) = (src(y, h, oh), src(x, w, ow));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let g = |r: usize, c: usize| p[r * w + c] as f64;
    g(y0, x0) * (1.0 - fy) * (1.0 - fx) + g(y0, x1) * (1.0 - fy) * fx + g(y1, x0) * fy * (1.0 - fx) + g(y1, x1) * fy * fx
}

#[test]
fn bilinear_matches_reference() {
    let (h, w) = (7, 11);
    let p: Vec<f32> = (0..h * w).map(|i| ((i * 31) % 17) as f32 / 17.0).collect();
    for (oh, ow) in [(14, 22), (5, 8), (7, 11), (20, 3)] {
        let out = resize_bilinear(&p, h, w, oh, ow);
        for y in 0..oh {
            for x in 0..ow {
                let r = reference_bilinear(&p, h, w, oh, ow, y, x);
                assert!((out[y * ow + x] as f64 - r).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn pipeline_batches() {
    let ds = generate_synthetic(&small_spec(), 7).unwrap().train;
    let pipe = ClipPipeline::default();
    let (x, labels) = pipe.batch(&ds, &[3, 0, 5], Mode::Train, &mut Rng::new(0)).unwrap();
    assert_eq!(x.shape(), [3, 1, 8, 32, 32]);
    assert_eq!(labels, vec![ds.labels[3], ds.labels[0], ds.labels[5]]);
    let (e1, _) = pipe.batch(&ds, &[1, 2], Mode::Eval, &mut Rng::new(0)).unwrap();
    let (e2, _) = pipe.batch(&ds, &[1, 2], Mode::Eval, &mut Rng::new(1)).unwrap();
    assert_eq!(e1, e2);
    let b = epoch_batches(10, 4, None).unwrap();
    assert_eq!(b, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
    let mut s = epoch_batches(10, 4, Some(&mut Rng::new(0))).unwrap().concat();
    s.sort();
    assert_eq!(s, (0..10).collect::<Vec<_>>());
    assert!(epoch_batches(10, 0, None).is_err());
}

proptest! {
    #[test]
    fn sampled_indices_stay_in_window(t in 1usize..80, wfrac in 0.0f64..1.0, ffrac in 0.0f64..1.0, seed in 0u64..1000) {
        let window = 1 + ((t - 1) as f64 * wfrac) as usize;
        let frames = 1 + ((window - 1) as f64 * ffrac) as usize;
        let idx = sample_clip(t, window, frames, &mut Rng::new(seed), Mode::Train).unwrap();
        prop_assert_eq!(idx.len(), frames);
        prop_assert!(idx.iter().all(|&i| i < t));
        prop_assert!(idx[frames - 1] - idx[0] < window);
    }

    #[test]
    fn resize_output_within_input_range(h in 2usize..12, w in 2usize..12, oh in 1usize..20, ow in 1usize..20, seed in 0u64..100) {
        let mut rng = Rng::new(seed);
        let p: Vec<f32> = (0..h * w).map(|_| rng.uniform() as f32).collect();
        let lo = p.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = p.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for v in resize_bilinear(&p, h, w, oh, ow) {
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }
}
