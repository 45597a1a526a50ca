//! Optimizers, learning-rate schedules, the one-level alternating search
//! loop and discrete-network retraining.

mod optim;
mod schedule;

pub use optim::{adam_step, sgd_step, Adam, AdamConfig, AdamState, Sgd, SgdConfig};
pub use schedule::{CosineWarmupSchedule, LrSchedule, StepSchedule};

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, ClipPipeline, Dataset};
use crate::error::{Error, Result};
use crate::net::{Network, Wrt};
use crate::ops::{topk_hits, Mode};
use crate::space::{derive_genotype, Genotype};
use crate::supernet::{ArchParams, SuperNet};
use crate::tensor::{Rng, Tensor};

// Stream ids of `Rng::fork` under the run seed.
const DATA_STREAM: u64 = 1;
const PASS_STREAMS: u64 = 1 << 32;

/// Loss and hits of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub top1: usize,
    pub top5: usize,
    pub n: usize,
}

/// A problem optimised by alternating architecture and weight updates on
/// the same batch.
pub trait OneLevel {
    type Batch: ?Sized;
    /// Gradient step on α at the current weights.
    fn alpha_step(&mut self, batch: &Self::Batch, lr: f64) -> Result<StepStats>;
    /// Gradient step on the weights at the current α.
    fn weight_step(&mut self, batch: &Self::Batch, lr: f64) -> Result<StepStats>;
}

/// α first, then the weights against the updated α. Returns the statistics
/// of the weight pass.
pub fn alternating_step<P: OneLevel>(p: &mut P, batch: &P::Batch, lr_alpha: f64, lr_weights: f64) -> Result<StepStats> {
    p.alpha_step(batch, lr_alpha)?;
    p.weight_step(batch, lr_weights)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Completed epochs, counting from 1.
    pub epoch: usize,
    pub phase: String,
    pub lr_w: f64,
    pub lr_a: Option<f64>,
    pub loss: f64,
    /// Percent.
    pub top1: f64,
}

impl EpochRecord {
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    /// Step decay of the weight learning rate; `None` keeps it constant.
    pub step: Option<(usize, f64)>,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Completed-epoch counts at which a genotype is derived.
    pub snapshots: Vec<usize>,
}

impl SearchConfig {
    /// 40 epochs, weight lr 0.1 decayed 10× every 10 epochs, batch 16.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            sgd: SgdConfig::default(),
            step: Some((10, 10.0)),
            adam: AdamConfig::default(),
            batch_size: 16,
            seed: 0,
            snapshots: vec![10, 20, 30, 40],
        }
    }

    pub fn weight_schedule(&self) -> Result<LrSchedule> {
        match self.step {
            Some((period, decay)) => LrSchedule::step(self.sgd.lr0, decay, period, self.epochs),
            None => Ok(LrSchedule::Constant {
                lr: self.sgd.lr0,
                horizon: self.epochs,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("search needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if let Some(&e) = self.snapshots.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(Error::invalid(format!("snapshot epoch {e} is outside 1..={}", self.epochs)));
        }
        self.sgd.validate()?;
        self.adam.validate()?;
        self.weight_schedule().map(|_| ())
    }
}

/// A supernet with its two optimizers.
pub struct SupernetSearch<'a> {
    pub net: &'a mut SuperNet<f32>,
    pub adam: Adam,
    pub sgd: Sgd,
    rng: Rng,
    passes: u64,
}

impl<'a> SupernetSearch<'a> {
    pub fn new(net: &'a mut SuperNet<f32>, sgd: SgdConfig, adam: AdamConfig, rng: Rng) -> Result<Self> {
        let adam = Adam::new(adam, net.alpha.tensors())?;
        Ok(Self {
            net,
            adam,
            sgd: Sgd::new(sgd)?,
            rng,
            passes: 0,
        })
    }

    fn pass(&mut self, batch: &(Tensor<f32>, Vec<usize>), wrt: Wrt) -> Result<crate::net::PassOutput<f32>> {
        self.passes += 1;
        self.net.pass(&batch.0, &batch.1, Mode::Train, self.rng.fork(PASS_STREAMS + self.passes), wrt)
    }
}

fn stats(out: &crate::net::PassOutput<f32>, n: usize) -> StepStats {
    StepStats {
        loss: out.loss as f64,
        top1: out.top1,
        top5: out.top5,
        n,
    }
}

impl OneLevel for SupernetSearch<'_> {
    type Batch = (Tensor<f32>, Vec<usize>);

    fn alpha_step(&mut self, batch: &Self::Batch, lr: f64) -> Result<StepStats> {
        let out = self.pass(batch, Wrt::Alpha)?;
        let grads = out.alpha_grads.as_deref().expect("alpha gradients requested");
        self.adam.step(self.net.alpha.tensors_mut(), grads, lr)?;
        Ok(stats(&out, batch.1.len()))
    }

    fn weight_step(&mut self, batch: &Self::Batch, lr: f64) -> Result<StepStats> {
        let out = self.pass(batch, Wrt::Weights)?;
        self.sgd.step(&mut self.net.store, &out.weight_grads, lr)?;
        Ok(stats(&out, batch.1.len()))
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub alpha: ArchParams<f32>,
    pub genotype: Genotype,
    /// `(epoch, genotype)` for each requested snapshot.
    pub snapshots: Vec<(usize, Genotype)>,
    pub log: Vec<EpochRecord>,
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Divergence { epoch, step, detail },
        other => other,
    }
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// One-level search: per training batch, an Adam step on α and then an SGD
/// step on the weights, both on that batch. The weight lr follows the step
/// schedule per epoch; the α lr is constant.
pub fn search(
    net: &mut SuperNet<f32>,
    train: &Dataset,
    pipeline: &ClipPipeline,
    cfg: &SearchConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let schedule = cfg.weight_schedule()?;
    let root = Rng::new(cfg.seed);
    let mut data_rng = root.fork(DATA_STREAM);
    let mut opt = SupernetSearch::new(net, cfg.sgd, cfg.adam, root.clone())?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr_w = schedule.lr_at(epoch)?;
        let lr_a = cfg.adam.lr;
        let (mut loss, mut hits, mut seen) = (0.0, 0, 0);
        for (step, idx) in epoch_batches(train.len(), cfg.batch_size, Some(&mut data_rng))?.into_iter().enumerate() {
            let batch = pipeline.batch(train, &idx, Mode::Train, &mut data_rng)?;
            let s = alternating_step(&mut opt, &batch, lr_a, lr_w).map_err(|e| diverged(e, epoch + 1, step))?;
            loss += s.loss * s.n as f64;
            hits += s.top1;
            seen += s.n;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            phase: "search".into(),
            lr_w,
            lr_a: Some(lr_a),
            loss: loss / seen as f64,
            top1: pct(hits, seen),
        };
        on_epoch(&record);
        log.push(record);
        if cfg.snapshots.contains(&(epoch + 1)) {
            snapshots.push((epoch + 1, derive_genotype(&opt.net.alpha)?));
        }
    }
    let alpha = opt.net.alpha.clone();
    Ok(SearchOutcome {
        genotype: derive_genotype(&alpha)?,
        alpha,
        snapshots,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub warmup: usize,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl RetrainConfig {
    /// 60 epochs, base lr 0.05 with a 10-epoch warmup, batch 16.
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            warmup: 10,
            sgd: SgdConfig {
                lr0: 0.05,
                ..SgdConfig::default()
            },
            batch_size: 16,
            eval_batch_size: 32,
            seed: 0,
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::cosine_warmup(self.sgd.lr0, self.warmup, self.epochs)
    }
}

/// Percent accuracies and mean loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Running metrics of the last training epoch.
    pub train: Metrics,
    pub val: Metrics,
}

/// SGD with momentum under the cosine-warmup schedule, then single-view
/// evaluation on `val`.
pub fn retrain<N: Network<f32>>(
    net: &mut N,
    train: &Dataset,
    val: &Dataset,
    pipeline: &ClipPipeline,
    cfg: &RetrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RetrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let schedule = cfg.schedule()?;
    let root = Rng::new(cfg.seed);
    let mut data_rng = root.fork(DATA_STREAM);
    let mut steps = 0u64;
    let mut sgd = Sgd::new(cfg.sgd)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last = Metrics::default();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        let (mut loss, mut h1, mut h5, mut seen) = (0.0, 0, 0, 0);
        for (step, idx) in epoch_batches(train.len(), cfg.batch_size, Some(&mut data_rng))?.into_iter().enumerate() {
            let (x, labels) = pipeline.batch(train, &idx, Mode::Train, &mut data_rng)?;
            steps += 1;
            let out = net
                .pass(&x, &labels, Mode::Train, root.fork(PASS_STREAMS + steps), Wrt::Weights)
                .map_err(|e| diverged(e, epoch + 1, step))?;
            sgd.step(net.store_mut(), &out.weight_grads, lr)
                .map_err(|e| diverged(e, epoch + 1, step))?;
            loss += out.loss as f64 * labels.len() as f64;
            h1 += out.top1;
            h5 += out.top5;
            seen += labels.len();
        }
        last = Metrics {
            loss: loss / seen as f64,
            top1: pct(h1, seen),
            top5: pct(h5, seen),
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            phase: "retrain".into(),
            lr_w: lr,
            lr_a: None,
            loss: last.loss,
            top1: last.top1,
        };
        on_epoch(&record);
        log.push(record);
    }
    let val = evaluate(net, val, pipeline, cfg.eval_batch_size)?;
    Ok(RetrainOutcome { log, train: last, val })
}

/// Eval-mode loss, top-1 and top-5 over a dataset, one centred view per
/// clip.
pub fn evaluate<N: Network<f32>>(net: &mut N, ds: &Dataset, pipeline: &ClipPipeline, batch_size: usize) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut rng = Rng::new(0);
    let (mut loss, mut h1, mut h5) = (0.0, 0, 0);
    for idx in epoch_batches(ds.len(), batch_size, None)? {
        let (x, labels) = pipeline.batch(ds, &idx, Mode::Eval, &mut rng)?;
        let out = net.pass(&x, &labels, Mode::Eval, Rng::new(0), Wrt::Nothing)?;
        loss += out.loss as f64 * labels.len() as f64;
        h1 += out.top1;
        h5 += out.top5;
    }
    Ok(Metrics {
        loss: loss / ds.len() as f64,
        top1: pct(h1, ds.len()),
        top5: pct(h5, ds.len()),
    })
}

/// Top-1 and top-5 percentages of row-major `[N, K]` logits; equal logits
/// rank by class index.
pub fn accuracy(logits: &[f32], k_classes: usize, labels: &[usize]) -> Result<(f64, f64)> {
    if logits.len() != k_classes * labels.len() {
        return Err(Error::Shape(format!("{} logits for {} labels of {k_classes} classes", logits.len(), labels.len())));
    }
    let (mut h1, mut h5) = (0, 0);
    for (row, &label) in logits.chunks(k_classes).zip(labels) {
        h1 += usize::from(topk_hits(row, label, 1));
        h5 += usize::from(topk_hits(row, label, 5));
    }
    Ok((pct(h1, labels.len()), pct(h5, labels.len())))
}
