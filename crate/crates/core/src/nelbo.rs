//! Variational bound for the absorbing-state model.
//!
//! The negative ELBO per token splits into a prior term `L_T`, a
//! reconstruction term `L_0 = E[−ln p_θ(x_0 | x_1)]`, and one KL term per
//! intermediate step,
//! `L_{i−1} = E[KL(q(x_{i−1} | x_i, x_0) ‖ p_θ(x_{i−1} | x_i))]` for `i ∈ [2, T]`.
//! Everything is in nats.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::Batch;
use crate::denoiser::Denoiser;
use crate::diffusion::{forward_marginal, forward_sample, posterior_into, real_token_probs, DiffusionError, NoiseSchedule, NoisyState};
use crate::rng::{self, Purpose};

/// Rows longer than this cannot be enumerated exhaustively.
pub const MAX_EXHAUSTIVE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum NelboError {
    #[error("q has no mass at state {index} where p has {mass}")]
    SupportMismatch { index: usize, mass: f64 },
    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("exhaustive evaluation limited to rows of {MAX_EXHAUSTIVE_LEN} tokens, got {0}")]
    TooLongForEnumeration(usize),
    #[error("clean batch contains the mask id {0}")]
    MaskInClean(u32),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// `Σ_k p_k ln(p_k / q_k)` with `0 · ln(0/·) = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64, NelboError> {
    if p.len() != q.len() {
        return Err(NelboError::LengthMismatch(p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (k, (&pk, &qk)) in p.iter().zip(q).enumerate() {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Err(NelboError::SupportMismatch { index: k, mass: pk });
        }
        kl += pk * (pk / qk).ln();
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NelboBreakdown {
    pub l_t: f64,
    pub l_0: f64,
    /// `L_1 … L_{T−1}`, i.e. the KL terms for `i = 2..=T`.
    pub l_mid: Vec<f64>,
    pub total: f64,
}

impl NelboBreakdown {
    fn from_terms(l_t: f64, l_0: f64, l_mid: Vec<f64>) -> Self {
        let total = l_t + l_0 + l_mid.iter().sum::<f64>();
        Self { l_t, l_0, l_mid, total }
    }

    pub fn mid_sum(&self) -> f64 {
        self.l_mid.iter().sum()
    }
}

fn check_clean(x0: &Batch, mask: u32) -> Result<(), NelboError> {
    match x0.ids().iter().find(|&&x| x >= mask) {
        Some(&bad) => Err(NelboError::MaskInClean(bad)),
        None => Ok(()),
    }
}

/// `L_T` per token: `KL(q(x_T | x_0) ‖ δ_mask)`.
pub fn prior_term(x0: &Batch, schedule: &NoiseSchedule, m: usize) -> Result<f64, NelboError> {
    let prior = {
        let mut p = vec![0.0; m + 1];
        p[m] = 1.0;
        p
    };
    let mut total = 0.0;
    for &x in x0.ids() {
        let q = forward_marginal(x, schedule, schedule.steps(), m)?;
        total += kl_categorical(q.probs(), &prior)?;
    }
    Ok(total / x0.len() as f64)
}

/// Per-token loss of step `i` for one noisy state: `L_0` when `i = 1`,
/// `L_{i−1}` otherwise.
pub fn step_loss(
    x0: &Batch,
    noisy: &NoisyState,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<f64, NelboError> {
    let m = denoiser.num_tokens();
    let i = noisy.time_index;
    let out = denoiser.denoise(&noisy.denoiser_input(schedule)).map_err(DiffusionError::from)?;
    let probs = real_token_probs(&out, m)?;
    let mut truth = vec![0.0; m];
    let mut q = vec![0.0; m + 1];
    let mut p = vec![0.0; m + 1];
    let mut total = 0.0;
    for (pos, (&clean, &xt)) in x0.ids().iter().zip(&noisy.ids).enumerate() {
        posterior_into(xt, probs.at(pos), schedule, i, i - 1, &mut p);
        if i == 1 {
            total -= p[clean as usize].ln();
            continue;
        }
        truth[clean as usize] = 1.0;
        posterior_into(xt, &truth, schedule, i, i - 1, &mut q);
        truth[clean as usize] = 0.0;
        total += kl_categorical(&q, &p)?;
    }
    Ok(total / x0.len() as f64)
}

/// Full bound with one forward sample per position per step.
pub fn nelbo_terms(
    x0: &Batch,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<NelboBreakdown, NelboError> {
    let m = denoiser.num_tokens();
    let mask = m as u32;
    check_clean(x0, mask)?;
    let l_t = prior_term(x0, schedule, m)?;
    let mut terms = Vec::with_capacity(schedule.steps());
    for i in 1..=schedule.steps() {
        let noisy = forward_sample(x0, schedule, i, mask, rng::derive(seed, Purpose::Nelbo, 0))?;
        terms.push(step_loss(x0, &noisy, denoiser, schedule)?);
    }
    let l_0 = terms[0];
    Ok(NelboBreakdown::from_terms(l_t, l_0, terms.split_off(1)))
}

/// Exact expectation of step `i`'s per-token loss over every mask pattern of
/// each row.
pub fn step_loss_exact(
    x0: &Batch,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    i: usize,
) -> Result<f64, NelboError> {
    let mask = denoiser.num_tokens() as u32;
    let cols = x0.cols();
    if cols > MAX_EXHAUSTIVE_LEN {
        return Err(NelboError::TooLongForEnumeration(cols));
    }
    let keep = schedule.alpha_bar(i);
    let mut total = 0.0;
    for r in 0..x0.rows() {
        let row = Batch::new(1, cols, x0.row(r).to_vec());
        for pattern in 0u32..(1 << cols) {
            let mut weight = 1.0;
            let mut ids = Vec::with_capacity(cols);
            for (c, &x) in row.ids().iter().enumerate() {
                if pattern & (1 << c) != 0 {
                    weight *= 1.0 - keep;
                    ids.push(mask);
                } else {
                    weight *= keep;
                    ids.push(x);
                }
            }
            if weight == 0.0 {
                continue;
            }
            let noisy = NoisyState { rows: 1, cols, ids, time_index: i };
            total += weight * step_loss(&row, &noisy, denoiser, schedule)?;
        }
    }
    Ok(total / x0.rows() as f64)
}

/// Full bound with the expectation over `x_i` computed exactly. Rows must be
/// at most [`MAX_EXHAUSTIVE_LEN`] long.
pub fn nelbo_terms_exact(
    x0: &Batch,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<NelboBreakdown, NelboError> {
    let m = denoiser.num_tokens();
    check_clean(x0, m as u32)?;
    let l_t = prior_term(x0, schedule, m)?;
    let mut terms = (1..=schedule.steps())
        .map(|i| step_loss_exact(x0, denoiser, schedule, i))
        .collect::<Result<Vec<_>, _>>()?;
    let l_0 = terms[0];
    Ok(NelboBreakdown::from_terms(l_t, l_0, terms.split_off(1)))
}

/// A uniformly drawn time index with its corrupted batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingDraw {
    pub time_index: usize,
    pub noisy: NoisyState,
}

pub fn draw_training_step(x0: &Batch, schedule: &NoiseSchedule, mask: u32, seed: u64) -> Result<TrainingDraw, NelboError> {
    let time_index = rng::stream(seed, Purpose::TimeIndex, 0).random_range(1..=schedule.steps());
    let noisy = forward_sample(x0, schedule, time_index, mask, seed)?;
    Ok(TrainingDraw { time_index, noisy })
}

/// Single-step estimator `T · L_{i−1}` (or `T · L_0` at `i = 1`) for a
/// uniformly drawn `i`. Unbiased for `total − L_T`.
pub fn training_loss(
    x0: &Batch,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(f64, usize), NelboError> {
    check_clean(x0, denoiser.num_tokens() as u32)?;
    let draw = draw_training_step(x0, schedule, denoiser.num_tokens() as u32, seed)?;
    let loss = step_loss(x0, &draw.noisy, denoiser, schedule)?;
    Ok((schedule.steps() as f64 * loss, draw.time_index))
}

/// Weight `(ᾱ_{i−1} − ᾱ_i)/(1 − ᾱ_i)` that turns a masked position's
/// `−ln x̂[x_0]` into its step loss.
pub fn unmask_weight(schedule: &NoiseSchedule, i: usize) -> f64 {
    (schedule.alpha_bar(i - 1) - schedule.alpha_bar(i)) / (1.0 - schedule.alpha_bar(i))
}
