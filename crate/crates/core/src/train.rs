//! Gradient-descent loop shared by the denoiser and the AR model.
//!
//! Step `k` (1-based) sees the batch at position `(k−1) mod n` of epoch
//! `(k−1) / n`, where `n` is the number of batches per epoch and each epoch is
//! shuffled under its own derived seed. The step's own randomness comes from
//! `derive(seed, Training, k)`. Both depend only on `(seed, k)`, so a run
//! resumed at step `k` replays the uninterrupted run exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, CorpusError, WindowPool};
use crate::nelbo::NelboError;
use crate::nn::{NetError, Network};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak learning rate reached at the end of warmup.
    pub lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, lr: 3e-4, warmup: 100, batch_size: 16, length: 32, seed: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.length < 2 {
            return Err(TrainError::BadConfig(format!(
                "batch size {} and length {} must be positive (length ≥ 2)",
                self.batch_size, self.length
            )));
        }
        Ok(())
    }

    /// Learning rate for 1-based update `step`: linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            return self.lr;
        }
        self.lr * step.min(self.warmup) as f64 / self.warmup as f64
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or parameters at step {step} (loss {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Nelbo(#[from] NelboError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ar(#[from] crate::ar::ArError),
    #[error("malformed training log: {0}")]
    BadLog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub global_step: usize,
    /// Diffusion step drawn for this update; absent for the AR model.
    pub time_index: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Mean loss over the first `window` rows.
    pub fn initial_loss(&self, window: usize) -> Option<f64> {
        mean(self.rows.iter().take(window).map(|r| r.loss))
    }

    /// Mean loss over the last `window` rows.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let skip = self.rows.len().saturating_sub(window);
        mean(self.rows.iter().skip(skip).map(|r| r.loss))
    }

    /// Parse the output of [`TrainLog::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next() != Some("step,loss,lr,global_step,time_index") {
            return Err(TrainError::BadLog("missing header".into()));
        }
        let bad = |line: &str| TrainError::BadLog(line.to_string());
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            rows.push(TrainRow {
                step: f[0].parse().map_err(|_| bad(line))?,
                loss: f[1].parse().map_err(|_| bad(line))?,
                lr: f[2].parse().map_err(|_| bad(line))?,
                global_step: f[3].parse().map_err(|_| bad(line))?,
                time_index: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad(line))?) },
            });
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr,global_step,time_index\n");
        for r in &self.rows {
            let t = r.time_index.map(|t| t.to_string()).unwrap_or_default();
            // {:?} prints the shortest round-tripping form, so the CSV is exact
            let _ = writeln!(out, "{},{:?},{:?},{},{}", r.step, r.loss, r.lr, r.global_step, t);
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Seed for a fresh model's parameters.
pub fn init_seed(seed: u64) -> u64 {
    rng::derive(seed, Purpose::Init, 0)
}

/// Loss and gradient of one update.
pub(crate) struct StepResult {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub time_index: Option<usize>,
}

/// Batches addressed by 1-based step, one epoch cached at a time.
pub(crate) struct StepBatches<'a> {
    pool: &'a WindowPool,
    batch_size: usize,
    seed: u64,
    per_epoch: usize,
    epoch: Option<(usize, Vec<Batch>)>,
}

impl<'a> StepBatches<'a> {
    pub fn new(pool: &'a WindowPool, batch_size: usize, seed: u64) -> Result<Self, CorpusError> {
        // surfaces TooShort before any work is done
        pool.epoch(batch_size, seed)?;
        Ok(Self { pool, batch_size, seed, per_epoch: pool.batches_per_epoch(batch_size), epoch: None })
    }

    pub fn get(&mut self, step: usize) -> Result<&Batch, CorpusError> {
        let epoch = (step - 1) / self.per_epoch;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let seed = rng::derive(self.seed, Purpose::Shuffle, epoch as u64);
            self.epoch = Some((epoch, self.pool.epoch(self.batch_size, seed)?.collect()));
        }
        let (_, batches) = self.epoch.as_ref().expect("epoch loaded");
        Ok(&batches[(step - 1) % self.per_epoch])
    }
}

/// Run updates `start+1..=config.steps`, appending to `log`.
pub(crate) fn run_steps<F>(
    net: &mut Network,
    pool: &WindowPool,
    config: &TrainConfig,
    start: usize,
    log: &mut TrainLog,
    mut step_fn: F,
) -> Result<(), TrainError>
where
    F: FnMut(&Network, &Batch, u64) -> Result<StepResult, TrainError>,
{
    config.validate()?;
    if start >= config.steps {
        return Ok(());
    }
    let mut batches = StepBatches::new(pool, config.batch_size, config.seed)?;
    for step in start + 1..=config.steps {
        let batch = batches.get(step)?;
        let seed = rng::derive(config.seed, Purpose::Training, step as u64);
        let result = step_fn(net, batch, seed)?;
        if !result.loss.is_finite() || result.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step, loss: result.loss });
        }
        let lr = config.lr_at(step);
        net.apply_gradient(&result.grad, lr);
        if !net.all_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss: result.loss });
        }
        log.rows.push(TrainRow { step, loss: result.loss, lr, global_step: step, time_index: result.time_index });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_constant() {
        let c = TrainConfig { lr: 3e-4, warmup: 100, ..TrainConfig::default() };
        assert!((c.lr_at(50) - 1.5e-4).abs() < 1e-18);
        assert_eq!(c.lr_at(100), 3e-4);
        assert_eq!(c.lr_at(5000), 3e-4);
        let flat = TrainConfig { warmup: 0, ..c };
        assert_eq!(flat.lr_at(1), 3e-4);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let log = TrainLog {
            rows: vec![
                TrainRow { step: 1, loss: 2.5, lr: 0.1, global_step: 1, time_index: Some(3) },
                TrainRow { step: 2, loss: 0.1, lr: 0.2, global_step: 2, time_index: None },
            ],
        };
        assert_eq!(log.to_csv(), "step,loss,lr,global_step,time_index\n1,2.5,0.1,1,3\n2,0.1,0.2,2,\n");
        assert_eq!(log.initial_loss(1), Some(2.5));
        assert_eq!(log.final_loss(5), Some(1.3));
        assert_eq!(TrainLog::from_csv(&log.to_csv()).unwrap(), log);
        assert!(TrainLog::from_csv("nope\n").is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
