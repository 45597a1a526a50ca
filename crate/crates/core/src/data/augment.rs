use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Rng, Tensor};

/// Indices of `frames` frames spaced `window / frames` apart inside a window
/// of a `t_full`-frame video. Train mode draws the window start uniformly;
/// eval mode centres it.
pub fn sample_clip(t_full: usize, window: usize, frames: usize, rng: &mut Rng, mode: Mode) -> Result<Vec<usize>> {
    if window > t_full {
        return Err(Error::invalid(format!("clip window {window} exceeds the {t_full}-frame video")));
    }
    if frames == 0 || frames > window {
        return Err(Error::invalid(format!("cannot sample {frames} frames from a {window}-frame window")));
    }
    let start = match mode {
        Mode::Train => rng.int_inclusive(0, t_full - window),
        Mode::Eval => (t_full - window) / 2,
    };
    let step = window / frames;
    Ok((0..frames).map(|i| start + i * step).collect())
}

/// Source coordinate and weight pairs for one output axis, half-pixel
/// centres, edge-clamped.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resize of an `h × w` plane to `oh × ow`, keeping the window
/// `[y0, y0 + ch) × [x0, x0 + cw)` of the resized image.
#[allow(clippy::too_many_arguments)]
fn resize_window(
    plane: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    (y0, x0): (usize, usize),
    (ch, cw): (usize, usize),
    out: &mut Vec<f32>,
) {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    for &(r0, r1, fy) in &ty[y0..y0 + ch] {
        for &(c0, c1, fx) in &tx[x0..x0 + cw] {
            let top = lerp(plane[r0 * w + c0], plane[r0 * w + c1], fx);
            let bottom = lerp(plane[r1 * w + c0], plane[r1 * w + c1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
}

/// Full bilinear resize of one plane.
pub fn resize_bilinear(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    resize_window(plane, h, w, oh, ow, (0, 0), (oh, ow), &mut out);
    out
}

/// Resizes the shorter side to a jittered scale, then crops `crop × crop`.
/// Train mode draws the scale from `[a, b]` and the crop position uniformly;
/// eval mode uses the rounded mid-scale and a centre crop. Every frame of
/// the clip gets the same transform.
pub fn augment(clip: &Tensor<f32>, jitter: (usize, usize), crop: usize, rng: &mut Rng, mode: Mode) -> Result<Tensor<f32>> {
    let (a, b) = jitter;
    if a > b || a == 0 {
        return Err(Error::invalid(format!("bad jitter range [{a}, {b}]")));
    }
    if crop == 0 || crop > a {
        return Err(Error::invalid(format!("crop {crop} is larger than the smallest resized side {a}")));
    }
    let [n, c, t, h, w] = clip.shape();
    let s = match mode {
        Mode::Train => rng.int_inclusive(a, b),
        Mode::Eval => (a + b).div_ceil(2),
    };
    let (oh, ow) = if h <= w {
        (s, ((w * s) as f64 / h as f64).round() as usize)
    } else {
        (((h * s) as f64 / w as f64).round() as usize, s)
    };
    let (y0, x0) = match mode {
        Mode::Train => (rng.int_inclusive(0, oh - crop), rng.int_inclusive(0, ow - crop)),
        Mode::Eval => ((oh - crop) / 2, (ow - crop) / 2),
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c * t * crop * crop);
    for p in clip.data().chunks(plane) {
        resize_window(p, h, w, oh, ow, (y0, x0), (crop, crop), &mut out);
    }
    Tensor::from_vec([n, c, t, crop, crop], out)
}
