use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `lr0 · d^(−⌊epoch / s⌋)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub period: usize,
    pub horizon: usize,
}

/// Linear warmup reaching `base` at the end of epoch `warmup − 1`, then a
/// cosine from `base` to 0 over the remaining epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmupSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64, horizon: usize },
    Step(StepSchedule),
    CosineWarmup(CosineWarmupSchedule),
}

impl LrSchedule {
    pub fn step(lr0: f64, decay: f64, period: usize, horizon: usize) -> Result<Self> {
        if !(decay > 1.0) {
            return Err(Error::invalid(format!("decay factor must exceed 1, got {decay}")));
        }
        if period == 0 {
            return Err(Error::invalid("decay period must be at least one epoch"));
        }
        Ok(Self::Step(StepSchedule {
            lr0,
            decay,
            period,
            horizon,
        }))
    }

    pub fn cosine_warmup(base: f64, warmup: usize, total: usize) -> Result<Self> {
        if warmup >= total {
            return Err(Error::invalid(format!("warmup {warmup} must be shorter than {total} epochs")));
        }
        Ok(Self::CosineWarmup(CosineWarmupSchedule { base, warmup, total }))
    }

    pub fn horizon(&self) -> usize {
        match *self {
            Self::Constant { horizon, .. } => horizon,
            Self::Step(s) => s.horizon,
            Self::CosineWarmup(c) => c.total,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.horizon() {
            return Err(Error::invalid(format!("epoch {epoch} is outside the {}-epoch schedule", self.horizon())));
        }
        Ok(match *self {
            Self::Constant { lr, .. } => lr,
            Self::Step(s) => s.lr0 / s.decay.powi((epoch / s.period) as i32),
            Self::CosineWarmup(c) if epoch < c.warmup => c.base * (epoch + 1) as f64 / c.warmup as f64,
            Self::CosineWarmup(c) => {
                let progress = (epoch - c.warmup) as f64 / (c.total - c.warmup) as f64;
                c.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        })
    }
}
