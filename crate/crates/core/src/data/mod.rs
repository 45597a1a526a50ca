//! Synthetic moving-shape videos, clip sampling, spatial augmentation and
//! the on-disk dataset format.
//!
//! Eight classes: `{square, plus} × {up, down, left, right}`. The shape is
//! placed at random, so a single frame identifies the shape but never the
//! direction.

mod augment;
mod format;

pub use augment::{augment, resize_bilinear, sample_clip};
pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Rng, Shape, Tensor};

pub const N_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "square_up",
    "square_down",
    "square_left",
    "square_right",
    "plus_up",
    "plus_down",
    "plus_left",
    "plus_right",
];

/// Labelled clips, stored as one `[n, C, T, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(clips: Tensor<f32>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if clips.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("{} clips but {} labels", clips.shape()[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Format(format!("label {l} is not below {n_classes} classes")));
        }
        Ok(Self { clips, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, T, H, W]` of one clip.
    pub fn clip_shape(&self) -> [usize; 4] {
        let s = self.clips.shape();
        [s[1], s[2], s[3], s[4]]
    }

    /// One clip as a `[1, C, T, H, W]` tensor.
    pub fn clip(&self, i: usize) -> Tensor<f32> {
        self.clips.gather_samples(&[i])
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    /// Frames per video.
    pub length: usize,
    /// Frame side in pixels.
    pub size: usize,
    pub shape_side: usize,
    /// Pixels per frame.
    pub velocity: usize,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_val: 200,
            length: 16,
            size: 40,
            shape_side: 6,
            velocity: 2,
            noise: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 8 {
            return Err(Error::invalid(format!("video length must be at least 8, got {}", self.length)));
        }
        if self.size < 16 {
            return Err(Error::invalid(format!("frame size must be at least 16, got {}", self.size)));
        }
        if !self.n_train.is_multiple_of(N_CLASSES) || !self.n_val.is_multiple_of(N_CLASSES) {
            return Err(Error::invalid(format!(
                "split sizes must be multiples of {N_CLASSES} for exact balance, got {}/{}",
                self.n_train, self.n_val
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid(format!("noise must be non-negative, got {}", self.noise)));
        }
        if self.shape_side < 3 {
            return Err(Error::invalid("shape side must be at least 3"));
        }
        let travel = self.velocity * (self.length - 1);
        if self.shape_side + travel > self.size {
            return Err(Error::invalid(format!(
                "a {}-pixel shape moving {travel} pixels does not fit a {}-pixel frame",
                self.shape_side, self.size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub val: Dataset,
}

/// Unit-intensity mask of the shape for `class`: a filled square or a
/// centred plus whose arms are a third of the side.
fn shape_mask(class: usize, side: usize) -> Vec<bool> {
    let plus = class >= 4;
    let lo = side / 3;
    let hi = side - side / 3;
    (0..side * side)
        .map(|i| {
            let (y, x) = (i / side, i % side);
            !plus || (lo..hi).contains(&y) || (lo..hi).contains(&x)
        })
        .collect()
}

/// `(dy, dx)` per frame for the motion of `class`.
fn direction(class: usize) -> (isize, isize) {
    match class % 4 {
        0 => (-1, 0),
        1 => (1, 0),
        2 => (0, -1),
        _ => (0, 1),
    }
}

/// Renders one `[1, T, S, S]` video.
fn render(spec: &SyntheticSpec, class: usize, rng: &mut Rng) -> Vec<f32> {
    let (s, side, l) = (spec.size, spec.shape_side, spec.length);
    let travel = spec.velocity * (l - 1);
    let (dy, dx) = direction(class);
    // Origin range keeping every frame of the trajectory inside the image.
    let range = |d: isize| if d == 0 { (0, s - side) } else if d > 0 { (0, s - side - travel) } else { (travel, s - side) };
    let (y_lo, y_hi) = range(dy);
    let (x_lo, x_hi) = range(dx);
    let y0 = rng.int_inclusive(y_lo, y_hi) as isize;
    let x0 = rng.int_inclusive(x_lo, x_hi) as isize;
    let mask = shape_mask(class, side);
    let mut out = vec![0f32; l * s * s];
    let v = spec.velocity as isize;
    for t in 0..l {
        let oy = (y0 + dy * v * t as isize) as usize;
        let ox = (x0 + dx * v * t as isize) as usize;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out[t * s * s + (oy + i / side) * s + ox + i % side] = 1.0;
            }
        }
    }
    if spec.noise > 0.0 {
        for p in &mut out {
            *p = (*p as f64 + spec.noise * rng.normal()).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn generate_split(spec: &SyntheticSpec, n: usize, rng: &mut Rng) -> Result<Dataset> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % N_CLASSES).collect();
    rng.shuffle(&mut labels);
    let shape: Shape = [n, 1, spec.length, spec.size, spec.size];
    let mut data = Vec::with_capacity(n * spec.length * spec.size * spec.size);
    for &label in &labels {
        data.extend(render(spec, label, rng));
    }
    Dataset::new(Tensor::from_vec(shape, data)?, labels, N_CLASSES)
}

/// Train and validation splits, fully determined by `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticSplits> {
    spec.validate()?;
    let root = Rng::new(seed);
    Ok(SyntheticSplits {
        train: generate_split(spec, spec.n_train, &mut root.fork(1))?,
        val: generate_split(spec, spec.n_val, &mut root.fork(2))?,
    })
}

/// Temporal sampling and spatial augmentation applied to every clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPipeline {
    pub window: usize,
    pub frames: usize,
    pub jitter: (usize, usize),
    pub crop: usize,
}

impl Default for ClipPipeline {
    fn default() -> Self {
        Self {
            window: 16,
            frames: 8,
            jitter: (36, 48),
            crop: 32,
        }
    }
}

impl ClipPipeline {
    /// Per-sample network input `[C, frames, crop, crop]` for clips of
    /// `clip_shape`.
    pub fn output_shape(&self, clip_shape: [usize; 4]) -> [usize; 4] {
        [clip_shape[0], self.frames, self.crop, self.crop]
    }

    /// Samples frames and augments clip `i` of `ds`.
    pub fn apply(&self, ds: &Dataset, i: usize, mode: Mode, rng: &mut Rng) -> Result<Tensor<f32>> {
        let [c, t, h, w] = ds.clip_shape();
        let idx = sample_clip(t, self.window, self.frames, rng, mode)?;
        let plane = h * w;
        let src = &ds.clips.data()[i * c * t * plane..(i + 1) * c * t * plane];
        let mut data = Vec::with_capacity(c * idx.len() * plane);
        for ch in 0..c {
            for &f in &idx {
                let off = (ch * t + f) * plane;
                data.extend_from_slice(&src[off..off + plane]);
            }
        }
        let clip = Tensor::from_vec([1, c, idx.len(), h, w], data)?;
        augment(&clip, self.jitter, self.crop, rng, mode)
    }

    /// Stacks processed clips `indices` into a batch.
    pub fn batch(&self, ds: &Dataset, indices: &[usize], mode: Mode, rng: &mut Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
        let [c, f, h, w] = self.output_shape(ds.clip_shape());
        let mut data = Vec::with_capacity(indices.len() * c * f * h * w);
        for &i in indices {
            data.extend_from_slice(self.apply(ds, i, mode, rng)?.data());
        }
        let labels = indices.iter().map(|&i| ds.labels[i]).collect();
        Ok((Tensor::from_vec([indices.len(), c, f, h, w], data)?, labels))
    }
}

/// Index batches covering `0..n`, shuffled in train mode. The last batch may
/// be short.
pub fn epoch_batches(n: usize, batch_size: usize, shuffle: Option<&mut Rng>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests;
