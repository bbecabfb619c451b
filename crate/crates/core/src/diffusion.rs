//! Absorbing-state discrete diffusion.
//!
//! States are token ids `0..m` plus the mask state `m`. All matrices use the
//! row convention `[Q]_{jk} = P(next = k | current = j)`. The forward chain
//! after `i` steps keeps a token with probability `ᾱ_i` and otherwise masks it;
//! every marginal and posterior below is evaluated from `ᾱ` in closed form.
//! Explicit matrix products are kept for cross-checking only.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Batch;
use crate::denoiser::{Denoiser, DenoiserError, DenoiserInput, DenoiserOutput};
use crate::rng::{self, Purpose};

pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("step count T must be at least 1, got {0}")]
    BadT(usize),
    #[error("beta {0} is outside [0, 1]")]
    BadBeta(f64),
    #[error("mask index m must be at least 1, got {0}")]
    BadStateCount(usize),
    #[error("time index {index} outside [{lo}, {hi}]")]
    IndexOutOfRange { index: usize, lo: usize, hi: usize },
    #[error("token id {0} is the mask state, not a clean token")]
    MaskAsClean(u32),
    #[error("posterior needs j < i, got i={i}, j={j}")]
    BadTimes { i: usize, j: usize },
    #[error("state id {id} exceeds the mask index {mask}")]
    BadState { id: u32, mask: u32 },
    #[error("denoiser output puts {mass} probability on the mask state")]
    DenoiserMassOnMask { mass: f64 },
    #[error("not a probability vector: {0}")]
    InvalidDistribution(String),
    #[error("sampling steps {steps} must lie in [1, {t}]")]
    BadSteps { steps: usize, t: usize },
    #[error("denoiser output has width {got}, expected {expected}")]
    OutputWidth { got: usize, expected: usize },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// How per-step masking rates are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `β_i = 1/(T−i+1)`, giving `ᾱ_i = 1 − i/T`.
    #[default]
    AbsorbingUniform,
    /// `β_i` rising linearly from 1e-4 to 0.02, with `β_T` forced to 1.
    Linear,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::AbsorbingUniform => "absorbing-uniform",
            ScheduleKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "absorbing-uniform" => Ok(ScheduleKind::AbsorbingUniform),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(format!("unknown schedule '{other}' (expected absorbing-uniform|linear)")),
        }
    }
}

/// Masking rates over a `T`-step grid. Index `i` corresponds to time `i/T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: Option<ScheduleKind>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 1 {
        return Err(DiffusionError::BadT(steps));
    }
    let t = steps as f64;
    let (beta, alpha_bar) = match kind {
        ScheduleKind::AbsorbingUniform => {
            let beta = (1..=steps).map(|i| 1.0 / (t - i as f64 + 1.0)).collect();
            let alpha_bar = (0..=steps).map(|i| (t - i as f64) / t).collect();
            (beta, alpha_bar)
        }
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 0.02);
            let mut beta: Vec<f64> = (1..=steps)
                .map(|i| if steps == 1 { hi } else { lo + (hi - lo) * (i - 1) as f64 / (t - 1.0) })
                .collect();
            beta[steps - 1] = 1.0;
            let alpha_bar = NoiseSchedule::from_betas(beta.clone())?.alpha_bar;
            (beta, alpha_bar)
        }
    };
    Ok(NoiseSchedule { kind: Some(kind), beta, alpha_bar })
}

impl NoiseSchedule {
    /// Schedule from an explicit list `β_1..β_T`, with `ᾱ` as the running
    /// product of `1 − β`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.is_empty() {
            return Err(DiffusionError::BadT(0));
        }
        if let Some(&bad) = beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(DiffusionError::BadBeta(bad));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { kind: None, beta, alpha_bar })
    }

    /// `None` for schedules built from an explicit β list.
    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `β_i` for `i ∈ [1, T]`.
    pub fn beta(&self, i: usize) -> f64 {
        self.beta[i - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `ᾱ_i` for `i ∈ [0, T]`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bar[i]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Start of step `i`, `s(i) = (i−1)/T`.
    pub fn s(&self, i: usize) -> f64 {
        (i - 1) as f64 / self.steps() as f64
    }

    /// End of step `i`, `t(i) = i/T`.
    pub fn t(&self, i: usize) -> f64 {
        i as f64 / self.steps() as f64
    }

    fn check_index(&self, i: usize) -> Result<(), DiffusionError> {
        if i > self.steps() {
            return Err(DiffusionError::IndexOutOfRange { index: i, lo: 0, hi: self.steps() });
        }
        Ok(())
    }
}

/// Row-stochastic `(m+1) × (m+1)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for j in 0..dim {
            entries[j * dim + j] = 1.0;
        }
        Self { dim, entries }
    }

    /// Keep with probability `retain`, otherwise jump to the mask state.
    fn absorbing(retain: f64, mask: usize) -> Self {
        let dim = mask + 1;
        let mut entries = vec![0.0; dim * dim];
        for j in 0..mask {
            entries[j * dim + j] = retain;
            entries[j * dim + mask] = 1.0 - retain;
        }
        entries[mask * dim + mask] = 1.0;
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.entries[j * self.dim + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }

    pub fn matmul(&self, rhs: &TransitionMatrix) -> TransitionMatrix {
        assert_eq!(self.dim, rhs.dim);
        let n = self.dim;
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.entries[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    entries[i * n + j] += a * rhs.entries[k * n + j];
                }
            }
        }
        TransitionMatrix { dim: n, entries }
    }

    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> f64 {
        self.entries.iter().zip(&other.entries).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Largest deviation of a row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.dim).map(|j| (self.row(j).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Whether the last row is exactly `e_m`.
    pub fn mask_row_is_absorbing(&self) -> bool {
        let m = self.dim - 1;
        self.row(m).iter().enumerate().all(|(k, &v)| v == if k == m { 1.0 } else { 0.0 })
    }
}

/// `Q_i = (1 − β) I + β 𝟏 e_mᵀ` over states `0..=m`.
pub fn step_matrix(beta: f64, m: usize) -> Result<TransitionMatrix, DiffusionError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(DiffusionError::BadBeta(beta));
    }
    if m < 1 {
        return Err(DiffusionError::BadStateCount(m));
    }
    Ok(TransitionMatrix::absorbing(1.0 - beta, m))
}

/// `Q̄_i = Q_1 ⋯ Q_i = ᾱ_i I + (1 − ᾱ_i) 𝟏 e_mᵀ`.
pub fn cumulative_matrix(schedule: &NoiseSchedule, i: usize, m: usize) -> Result<TransitionMatrix, DiffusionError> {
    schedule.check_index(i)?;
    if m < 1 {
        return Err(DiffusionError::BadStateCount(m));
    }
    Ok(TransitionMatrix::absorbing(schedule.alpha_bar(i), m))
}

/// `Q_1 ⋯ Q_i` multiplied out step by step. Only meant for cross-checking
/// [`cumulative_matrix`].
pub fn cumulative_matrix_product(schedule: &NoiseSchedule, i: usize, m: usize) -> Result<TransitionMatrix, DiffusionError> {
    schedule.check_index(i)?;
    let mut acc = TransitionMatrix::identity(m + 1);
    for step in 1..=i {
        acc = acc.matmul(&step_matrix(schedule.beta(step), m)?);
    }
    Ok(acc)
}

/// Kernel from index `j` to index `i > j`: retention `ᾱ_i / ᾱ_j`.
pub fn transition_between(schedule: &NoiseSchedule, j: usize, i: usize, m: usize) -> Result<TransitionMatrix, DiffusionError> {
    schedule.check_index(i)?;
    if j >= i {
        return Err(DiffusionError::BadTimes { i, j });
    }
    let from = schedule.alpha_bar(j);
    let retain = if from > 0.0 { schedule.alpha_bar(i) / from } else { 0.0 };
    Ok(TransitionMatrix::absorbing(retain, m))
}

/// Probability vector over states `0..=m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, DiffusionError> {
        Self::with_tolerance(probs, SIMPLEX_TOL)
    }

    pub fn with_tolerance(probs: Vec<f64>, tol: f64) -> Result<Self, DiffusionError> {
        if probs.is_empty() {
            return Err(DiffusionError::InvalidDistribution("empty".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(DiffusionError::InvalidDistribution(format!("entry {bad}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(DiffusionError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(k: usize, len: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[k] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total_variation(&self, other: &CategoricalDist) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
            .0
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// `q(x_i | x_0)`: `ᾱ_i` on `x0`, `1 − ᾱ_i` on the mask state.
pub fn forward_marginal(x0: u32, schedule: &NoiseSchedule, i: usize, m: usize) -> Result<CategoricalDist, DiffusionError> {
    schedule.check_index(i)?;
    if x0 as usize >= m {
        return Err(DiffusionError::MaskAsClean(x0));
    }
    let keep = schedule.alpha_bar(i);
    let mut probs = vec![0.0; m + 1];
    probs[x0 as usize] = keep;
    probs[m] += 1.0 - keep;
    Ok(CategoricalDist { probs })
}

/// A corrupted batch at time index `time_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisyState {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
    pub time_index: usize,
}

impl NoisyState {
    pub fn all_masked(rows: usize, cols: usize, mask: u32, time_index: usize) -> Self {
        Self { rows, cols, ids: vec![mask; rows * cols], time_index }
    }

    pub fn masked_fraction(&self, mask: u32) -> f64 {
        self.ids.iter().filter(|&&x| x == mask).count() as f64 / self.ids.len() as f64
    }

    pub fn denoiser_input(&self, schedule: &NoiseSchedule) -> DenoiserInput {
        DenoiserInput::new(self.rows, self.cols, self.ids.clone(), schedule.t(self.time_index))
    }
}

/// Mask each position independently with probability `1 − ᾱ_i`.
pub fn forward_sample(batch: &Batch, schedule: &NoiseSchedule, i: usize, mask: u32, seed: u64) -> Result<NoisyState, DiffusionError> {
    if i < 1 || i > schedule.steps() {
        return Err(DiffusionError::IndexOutOfRange { index: i, lo: 1, hi: schedule.steps() });
    }
    let keep = schedule.alpha_bar(i);
    let mut rng = rng::stream(seed, Purpose::Forward, i as u64);
    let ids = batch
        .ids()
        .iter()
        .map(|&x| {
            let u: f64 = rng.random();
            if u < keep {
                x
            } else {
                mask
            }
        })
        .collect();
    Ok(NoisyState { rows: batch.rows(), cols: batch.cols(), ids, time_index: i })
}

/// `q(x_j | x_i, x_0)` with `x_0` given as a distribution over real tokens,
/// written into `out` (length `m + 1`). `x0` has length `m` and is
/// renormalized.
pub(crate) fn posterior_into(xt: u32, x0: &[f64], schedule: &NoiseSchedule, i: usize, j: usize, out: &mut [f64]) {
    let m = x0.len();
    out.iter_mut().for_each(|p| *p = 0.0);
    if (xt as usize) < m {
        out[xt as usize] = 1.0;
        return;
    }
    let (a_i, a_j) = (schedule.alpha_bar(i), schedule.alpha_bar(j));
    let denom = 1.0 - a_i;
    let mass: f64 = x0.iter().sum();
    let scale = (a_j - a_i) / denom / mass;
    for (o, &p) in out.iter_mut().zip(x0) {
        *o = scale * p;
    }
    out[m] = (1.0 - a_j) / denom;
}

/// Time-reversal posterior `q(x_{s(j)} | x_{t(i)}, x_0)` for `j < i`.
///
/// An unmasked `x_t` was never masked, so the posterior is a point mass on it.
/// A masked `x_t` unmasks to `x_0` with probability `(ᾱ_j − ᾱ_i)/(1 − ᾱ_i)`
/// and stays masked otherwise.
pub fn posterior(
    xt: u32,
    x0: &CategoricalDist,
    schedule: &NoiseSchedule,
    i: usize,
    j: usize,
) -> Result<CategoricalDist, DiffusionError> {
    schedule.check_index(i)?;
    if j >= i {
        return Err(DiffusionError::BadTimes { i, j });
    }
    let m = x0.len() - 1;
    if xt as usize > m {
        return Err(DiffusionError::BadState { id: xt, mask: m as u32 });
    }
    let mask_mass = x0.probs()[m];
    if mask_mass != 0.0 {
        return Err(DiffusionError::DenoiserMassOnMask { mass: mask_mass });
    }
    let mut out = vec![0.0; m + 1];
    posterior_into(xt, &x0.probs()[..m], schedule, i, j, &mut out);
    Ok(CategoricalDist { probs: out })
}

/// Evenly spaced time indices `0 = g_0 < … < g_steps = T`.
pub fn sampling_grid(total: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps < 1 || steps > total {
        return Err(DiffusionError::BadSteps { steps, t: total });
    }
    Ok((0..=steps).map(|k| k * total / steps).collect())
}

/// Throughput of one sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleStats {
    pub wall_seconds: f64,
    pub tokens_per_sec: f64,
    pub batches_per_sec: f64,
}

/// Real-token distribution at each position, checked against the mask
/// contract. Accepts width `m`, or width `m + 1` with an all-zero mask column.
pub(crate) fn real_token_probs<'a>(out: &'a DenoiserOutput, m: usize) -> Result<RealProbs<'a>, DiffusionError> {
    if out.width() == m {
        return Ok(RealProbs { out, width: m, m });
    }
    if out.width() == m + 1 {
        let mass = (0..out.rows() * out.cols())
            .map(|p| out.position(p)[m])
            .fold(0.0, f64::max);
        if mass != 0.0 {
            return Err(DiffusionError::DenoiserMassOnMask { mass });
        }
        return Ok(RealProbs { out, width: m + 1, m });
    }
    Err(DiffusionError::OutputWidth { got: out.width(), expected: m })
}

pub(crate) struct RealProbs<'a> {
    out: &'a DenoiserOutput,
    width: usize,
    m: usize,
}

impl RealProbs<'_> {
    pub(crate) fn at(&self, pos: usize) -> &[f64] {
        let start = pos * self.width;
        &self.out.probs()[start..start + self.m]
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if target < acc {
            return k;
        }
    }
    // rounding: fall back to the last state with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Generate a `rows × cols` batch by running the plug-in reverse chain from the
/// all-mask state at `T` down to `0` over `steps` evenly spaced indices.
pub fn ancestral_sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rows: usize,
    cols: usize,
    steps: usize,
    seed: u64,
) -> Result<(Batch, SampleStats), DiffusionError> {
    let mask = denoiser.num_tokens() as u32;
    let start = NoisyState::all_masked(rows, cols, mask, schedule.steps());
    reverse_chain(denoiser, schedule, start, steps, seed)
}

/// Run the reverse chain from `start` (at `start.time_index`) down to index 0
/// over `steps` evenly spaced indices. Unmasked positions are never changed.
pub fn reverse_chain(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    start: NoisyState,
    steps: usize,
    seed: u64,
) -> Result<(Batch, SampleStats), DiffusionError> {
    schedule.check_index(start.time_index)?;
    let grid = sampling_grid(start.time_index, steps)?;
    let m = denoiser.num_tokens();
    let mask = m as u32;
    if let Some(&bad) = start.ids.iter().find(|&&x| x > mask) {
        return Err(DiffusionError::BadState { id: bad, mask });
    }
    let (rows, cols) = (start.rows, start.cols);
    let clock = Instant::now();
    let mut state = start;
    let mut buf = vec![0.0; m + 1];
    for k in (1..=steps).rev() {
        let (i, j) = (grid[k], grid[k - 1]);
        let input = DenoiserInput::new(rows, cols, state.ids.clone(), schedule.t(i));
        let out = denoiser.denoise(&input)?;
        let probs = real_token_probs(&out, m)?;
        let mut rng = rng::stream(seed, Purpose::Sampling, k as u64);
        for (pos, id) in state.ids.iter_mut().enumerate() {
            if *id != mask {
                continue;
            }
            posterior_into(mask, probs.at(pos), schedule, i, j, &mut buf);
            *id = sample_index(&buf, rng.random()) as u32;
        }
        state.time_index = j;
    }
    let wall = clock.elapsed().as_secs_f64().max(1e-9);
    let stats = SampleStats {
        wall_seconds: wall,
        tokens_per_sec: (rows * cols) as f64 / wall,
        batches_per_sec: 1.0 / wall,
    };
    Ok((Batch::new(rows, cols, state.ids), stats))
}
