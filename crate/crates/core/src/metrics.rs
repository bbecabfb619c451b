//! Likelihood metrics and cross-seed aggregation. Everything is computed in
//! nats; bits appear only through [`bpt`] and [`bpc`].

use std::f64::consts::LN_2;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ar::ArModel;
use crate::corpus::{Batch, CorpusError, CorpusSplit, WindowPool};
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::nelbo::nelbo_terms;
use crate::rng::{self, Purpose};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ar,
    D3pm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ar => "ar",
            ModelKind::D3pm => "d3pm",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ar" => Ok(ModelKind::Ar),
            "d3pm" => Ok(ModelKind::D3pm),
            other => Err(format!("unknown model kind '{other}' (expected ar|d3pm)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no values to aggregate")]
    EmptyInput,
    #[error("reports mix model kinds {0} and {1}")]
    MixedKinds(ModelKind, ModelKind),
    #[error("token budget {budget} is smaller than one window of {length} tokens")]
    BudgetTooSmall { budget: usize, length: usize },
    #[error(transparent)]
    TooShort(#[from] CorpusError),
    #[error("scoring failed: {0}")]
    Scorer(String),
}

/// Bits per token from nats per token.
pub fn bpt(nll: f64) -> f64 {
    nll / LN_2
}

/// Perplexity from nats per token.
pub fn ppl(nll: f64) -> f64 {
    nll.exp()
}

/// Bits per character from per-character log-probabilities (nats).
pub fn bpc(logprobs: &[f64]) -> Result<f64, MetricsError> {
    if logprobs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(bpt(-logprobs.iter().sum::<f64>() / logprobs.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub bpt: f64,
    pub ppl: f64,
    pub token_count: usize,
    pub wall_seconds: f64,
    pub batches_per_sec: f64,
    pub seed: u64,
    pub model_kind: ModelKind,
}

/// The run-to-run reproducible part of an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub nll: f64,
    pub bpt: f64,
    pub ppl: f64,
    pub token_count: usize,
    pub seed: u64,
    pub model_kind: ModelKind,
}

/// The wall-clock part of an [`EvalReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportTiming {
    pub wall_seconds: f64,
    pub batches_per_sec: f64,
}

impl EvalReport {
    pub fn from_nll(nll: f64, token_count: usize, wall_seconds: f64, batches: usize, seed: u64, model_kind: ModelKind) -> Self {
        let wall = wall_seconds.max(1e-9);
        Self {
            nll,
            bpt: bpt(nll),
            ppl: ppl(nll),
            token_count,
            wall_seconds: wall,
            batches_per_sec: batches as f64 / wall,
            seed,
            model_kind,
        }
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            nll: self.nll,
            bpt: self.bpt,
            ppl: self.ppl,
            token_count: self.token_count,
            seed: self.seed,
            model_kind: self.model_kind,
        }
    }

    pub fn timing(&self) -> ReportTiming {
        ReportTiming { wall_seconds: self.wall_seconds, batches_per_sec: self.batches_per_sec }
    }

    /// Rebuild from the two halves written to disk.
    pub fn from_parts(summary: ReportSummary, timing: ReportTiming) -> Self {
        Self {
            nll: summary.nll,
            bpt: summary.bpt,
            ppl: summary.ppl,
            token_count: summary.token_count,
            wall_seconds: timing.wall_seconds,
            batches_per_sec: timing.batches_per_sec,
            seed: summary.seed,
            model_kind: summary.model_kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub model_kind: ModelKind,
    pub reports: Vec<EvalReport>,
    pub mean_bpt: f64,
    /// Population standard deviation.
    pub std_bpt: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedAggregate, MetricsError> {
    let first = reports.first().ok_or(MetricsError::EmptyInput)?;
    if let Some(other) = reports.iter().find(|r| r.model_kind != first.model_kind) {
        return Err(MetricsError::MixedKinds(first.model_kind, other.model_kind));
    }
    // sort so the floating-point sums do not depend on input order
    let mut bpts: Vec<f64> = reports.iter().map(|r| r.bpt).collect();
    bpts.sort_by(f64::total_cmp);
    let (mean_bpt, std_bpt) = mean_std(&bpts)?;
    Ok(SeedAggregate { model_kind: first.model_kind, reports: reports.to_vec(), mean_bpt, std_bpt })
}

/// A model that assigns a per-token NLL to a batch of windows.
pub trait Scorer {
    fn kind(&self) -> ModelKind;
    /// Mean NLL per token (nats). `seed` feeds any internal sampling.
    fn batch_nll(&self, batch: &Batch, seed: u64) -> Result<f64, MetricsError>;
}

impl Scorer for ArModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Ar
    }

    fn batch_nll(&self, batch: &Batch, _seed: u64) -> Result<f64, MetricsError> {
        ArModel::batch_nll(self, batch).map_err(|e| MetricsError::Scorer(e.to_string()))
    }
}

/// Scores with the NELBO total, an upper bound on the NLL.
pub struct D3pmScorer<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
}

impl Scorer for D3pmScorer<'_> {
    fn kind(&self) -> ModelKind {
        ModelKind::D3pm
    }

    fn batch_nll(&self, batch: &Batch, seed: u64) -> Result<f64, MetricsError> {
        nelbo_terms(batch, self.denoiser, self.schedule, seed)
            .map(|b| b.total)
            .map_err(|e| MetricsError::Scorer(e.to_string()))
    }
}

/// Every token gets probability `1/vocab`.
#[derive(Debug, Clone, Copy)]
pub struct UniformScorer {
    pub vocab: usize,
    pub kind: ModelKind,
}

impl Scorer for UniformScorer {
    fn kind(&self) -> ModelKind {
        self.kind
    }

    fn batch_nll(&self, _batch: &Batch, _seed: u64) -> Result<f64, MetricsError> {
        Ok((self.vocab as f64).ln())
    }
}

/// Score windows of `split` until `token_budget` tokens are consumed.
///
/// Full `batch_size × length` batches are taken from successive shuffled
/// epochs; a final batch with fewer rows covers the rest of the budget to
/// within one window. Only the scoring calls are timed.
pub fn eval_model(
    scorer: &dyn Scorer,
    split: &CorpusSplit,
    tok: &Tokenizer,
    batch_size: usize,
    length: usize,
    token_budget: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    let pool = WindowPool::new(split, tok, length)?;
    eval_pool(scorer, &pool, batch_size, token_budget, seed)
}

pub fn eval_pool(
    scorer: &dyn Scorer,
    pool: &WindowPool,
    batch_size: usize,
    token_budget: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    let length = pool.length();
    if token_budget < length {
        return Err(MetricsError::BudgetTooSmall { budget: token_budget, length });
    }
    let full = token_budget / (batch_size * length);
    let tail_rows = (token_budget - full * batch_size * length) / length;
    let mut plan: Vec<usize> = vec![batch_size; full];
    if tail_rows > 0 {
        plan.push(tail_rows);
    }
    let per_epoch = pool.batches_per_epoch(batch_size).max(1);
    let mut epoch_batches: Vec<Batch> = Vec::new();
    let mut current_epoch = usize::MAX;
    let mut nll_sum = 0.0;
    let mut tokens = 0usize;
    let mut scoring = 0.0;
    for (k, &rows) in plan.iter().enumerate() {
        let epoch = k / per_epoch;
        if epoch != current_epoch {
            let shuffle = rng::derive(seed, Purpose::Shuffle, epoch as u64);
            epoch_batches = pool.epoch(batch_size, shuffle)?.collect();
            current_epoch = epoch;
        }
        let full_batch = &epoch_batches[k % per_epoch];
        let batch = if rows == full_batch.rows() {
            full_batch.clone()
        } else {
            Batch::new(rows, length, full_batch.ids()[..rows * length].to_vec())
        };
        let started = Instant::now();
        let nll = scorer.batch_nll(&batch, rng::derive(seed, Purpose::Eval, k as u64))?;
        scoring += started.elapsed().as_secs_f64();
        nll_sum += nll * batch.len() as f64;
        tokens += batch.len();
    }
    Ok(EvalReport::from_nll(nll_sum / tokens as f64, tokens, scoring, plan.len(), seed, scorer.kind()))
}

/// One transcribed `(model, seed, BPT, NLL, PPL)` row of a published
/// comparison table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub seed: u64,
    pub bpt: f64,
    pub nll: f64,
    pub ppl: f64,
}

/// Published AR and GPT-2 rows (WikiText-103, 124M parameters).
pub const REFERENCE_AR_ROWS: [ReferenceRow; 4] = [
    ReferenceRow { model: "AR", seed: 1, bpt: 4.5925, nll: 3.1833, ppl: 24.126 },
    ReferenceRow { model: "AR", seed: 12, bpt: 4.6028, nll: 3.1904, ppl: 24.2989 },
    ReferenceRow { model: "GPT-2", seed: 1000, bpt: 4.2546, nll: 2.9491, ppl: 19.0886 },
    ReferenceRow { model: "GPT-2", seed: 2000, bpt: 4.2548, nll: 2.9492, ppl: 19.0905 },
];

/// Published D3PM rows.
pub const REFERENCE_D3PM_ROWS: [ReferenceRow; 3] = [
    ReferenceRow { model: "D3PM", seed: 1000, bpt: 9.0440, nll: 6.2693, ppl: 528.1280 },
    ReferenceRow { model: "D3PM", seed: 2000, bpt: 5.7219, nll: 3.9661, ppl: 52.7819 },
    ReferenceRow { model: "D3PM", seed: 3000, bpt: 9.4063, nll: 6.5199, ppl: 678.5501 },
];

pub const REFERENCE_AR_MEAN_BPT: f64 = 4.59765;
pub const REFERENCE_D3PM_MEAN_BPT: f64 = 8.0574;

/// Largest relative deviation of a row from `bpt = nll/ln 2` and `ppl = e^nll`.
pub fn identity_error(row: &ReferenceRow) -> f64 {
    let b = (bpt(row.nll) - row.bpt).abs() / row.bpt.abs();
    let p = (ppl(row.nll) - row.ppl).abs() / row.ppl.abs();
    b.max(p)
}

fn reference_report(row: &ReferenceRow, kind: ModelKind) -> EvalReport {
    EvalReport {
        nll: row.nll,
        bpt: row.bpt,
        ppl: row.ppl,
        token_count: 1,
        wall_seconds: 1.0,
        batches_per_sec: 1.0,
        seed: row.seed,
        model_kind: kind,
    }
}

/// Aggregates of the published AR seeds and D3PM seeds.
pub fn reference_aggregates() -> Result<(SeedAggregate, SeedAggregate), MetricsError> {
    let ar: Vec<EvalReport> = REFERENCE_AR_ROWS.iter().filter(|r| r.model == "AR").map(|r| reference_report(r, ModelKind::Ar)).collect();
    let d3pm: Vec<EvalReport> = REFERENCE_D3PM_ROWS.iter().map(|r| reference_report(r, ModelKind::D3pm)).collect();
    Ok((aggregate_seeds(&ar)?, aggregate_seeds(&d3pm)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bpc_examples() {
        assert!((bpc(&[0.5f64.ln(); 7]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bpc(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((bpc(&[0.5f64.ln(), 0.25f64.ln()]).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(bpc(&[]), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn report_identities() {
        let r = EvalReport::from_nll(16f64.ln(), 10, 0.5, 2, 1, ModelKind::Ar);
        assert!((r.bpt - 4.0).abs() < 1e-12);
        assert!((r.ppl - 16.0).abs() < 1e-12);
        assert_eq!(r.batches_per_sec, 4.0);
        let perfect = EvalReport::from_nll(0.0, 10, 0.5, 2, 1, ModelKind::Ar);
        assert_eq!((perfect.bpt, perfect.ppl), (0.0, 1.0));
        assert_eq!(EvalReport::from_parts(r.summary(), r.timing()), r);
    }

    #[test]
    fn reference_rows_satisfy_identities() {
        for row in REFERENCE_AR_ROWS.iter().chain(&REFERENCE_D3PM_ROWS) {
            assert!(identity_error(row) < 1e-3, "{row:?}: {}", identity_error(row));
        }
    }

    #[test]
    fn reference_means() {
        let (ar, d3pm) = reference_aggregates().unwrap();
        assert!((ar.mean_bpt - REFERENCE_AR_MEAN_BPT).abs() < 1e-4);
        assert!((d3pm.mean_bpt - REFERENCE_D3PM_MEAN_BPT).abs() < 1e-4);
        assert!((ar.std_bpt - 0.00515).abs() < 1e-9);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(aggregate_seeds(&[]), Err(MetricsError::EmptyInput)));
        let a = EvalReport::from_nll(1.0, 1, 1.0, 1, 1, ModelKind::Ar);
        let b = EvalReport::from_nll(1.0, 1, 1.0, 1, 2, ModelKind::D3pm);
        assert!(matches!(aggregate_seeds(&[a.clone(), b]), Err(MetricsError::MixedKinds(..))));
        assert_eq!(aggregate_seeds(&[a]).unwrap().std_bpt, 0.0);
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(nlls in proptest::collection::vec(0.0f64..10.0, 1..8), rot in 0usize..8) {
            let reports: Vec<EvalReport> = nlls.iter().enumerate()
                .map(|(k, &n)| EvalReport::from_nll(n, 1, 1.0, 1, k as u64, ModelKind::D3pm)).collect();
            let mut rotated = reports.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            rotated.reverse();
            let a = aggregate_seeds(&reports).unwrap();
            let b = aggregate_seeds(&rotated).unwrap();
            prop_assert_eq!(a.mean_bpt, b.mean_bpt);
            prop_assert_eq!(a.std_bpt, b.std_bpt);
            let (m, s) = mean_std(&reports.iter().map(|r| r.bpt).collect::<Vec<_>>()).unwrap();
            prop_assert!((m - a.mean_bpt).abs() < 1e-12 && (s - a.std_bpt).abs() < 1e-12);
        }

        #[test]
        fn identity_triangle(nll in 0.0f64..20.0) {
            let r = EvalReport::from_nll(nll, 1, 1.0, 1, 0, ModelKind::Ar);
            prop_assert!((r.bpt * LN_2 - nll).abs() <= 1e-9 * nll.max(1.0));
            prop_assert!((r.ppl - nll.exp()).abs() <= 1e-9 * nll.exp());
        }
    }
}
