//! Denoisers `x_θ(x_t, t)`: per-position distributions over the `m` real
//! tokens given a noisy grid and the time `t ∈ [0, 1]`.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, CorpusSplit, WindowPool};
use crate::diffusion::NoiseSchedule;
use crate::nelbo::{draw_training_step, training_loss, unmask_weight, NelboError};
use crate::nn::{softmax_rows, Mixing, NetConfig, NetError, Network};
use crate::rng::{self, Purpose};
use crate::tokenizer::Tokenizer;
use crate::train::{init_seed, run_steps, StepResult, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("time {0} is outside [0, 1]")]
    BadTime(f64),
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    BadEpsilon(f64),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Noisy `rows × cols` grid over `[0, m]` with its time coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    rows: usize,
    cols: usize,
    noisy_ids: Vec<u32>,
    time: f64,
}

impl DenoiserInput {
    pub fn new(rows: usize, cols: usize, noisy_ids: Vec<u32>, time: f64) -> Self {
        Self { rows, cols, noisy_ids, time }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ids(&self) -> &[u32] {
        &self.noisy_ids
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Checks the time range, the grid size and that every id is at most `mask`.
    pub fn validate(&self, mask: u32) -> Result<(), DenoiserError> {
        if !(0.0..=1.0).contains(&self.time) {
            return Err(DenoiserError::BadTime(self.time));
        }
        if self.noisy_ids.len() != self.rows * self.cols {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{} ids for a {}x{} grid",
                self.noisy_ids.len(),
                self.rows,
                self.cols
            )));
        }
        if let Some(&bad) = self.noisy_ids.iter().find(|&&x| x > mask) {
            return Err(DenoiserError::ShapeMismatch(format!("id {bad} exceeds mask id {mask}")));
        }
        Ok(())
    }
}

/// `rows × cols × width` probabilities, position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    rows: usize,
    cols: usize,
    width: usize,
    probs: Vec<f64>,
}

impl DenoiserOutput {
    pub fn new(rows: usize, cols: usize, width: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), rows * cols * width, "output size");
        Self { rows, cols, width, probs }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Distribution at flat position `p = row · cols + col`.
    pub fn position(&self, p: usize) -> &[f64] {
        &self.probs[p * self.width..(p + 1) * self.width]
    }
}

pub trait Denoiser: Send + Sync {
    /// Number of real tokens `m`; the mask id is `m`.
    fn num_tokens(&self) -> usize;
    fn denoise(&self, input: &DenoiserInput) -> Result<DenoiserOutput, DenoiserError>;
}

fn check_shape(input: &DenoiserInput, m: usize) -> Result<(), DenoiserError> {
    input.validate(m as u32)
}

/// Knows the clean batch and returns it as one-hot rows.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    clean: Batch,
    m: usize,
}

impl OracleDenoiser {
    pub fn new(clean: Batch, m: usize) -> Self {
        Self { clean, m }
    }
}

impl Denoiser for OracleDenoiser {
    fn num_tokens(&self) -> usize {
        self.m
    }

    fn denoise(&self, input: &DenoiserInput) -> Result<DenoiserOutput, DenoiserError> {
        check_shape(input, self.m)?;
        if input.rows() != self.clean.rows() || input.cols() != self.clean.cols() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "oracle holds {}x{}, got {}x{}",
                self.clean.rows(),
                self.clean.cols(),
                input.rows(),
                input.cols()
            )));
        }
        let mut probs = vec![0.0; self.clean.len() * self.m];
        for (p, &x) in self.clean.ids().iter().enumerate() {
            probs[p * self.m + x as usize] = 1.0;
        }
        Ok(DenoiserOutput::new(input.rows(), input.cols(), self.m, probs))
    }
}

/// `1/m` everywhere.
#[derive(Debug, Clone, Copy)]
pub struct UniformDenoiser {
    m: usize,
}

impl UniformDenoiser {
    pub fn new(m: usize) -> Self {
        Self { m }
    }
}

impl Denoiser for UniformDenoiser {
    fn num_tokens(&self) -> usize {
        self.m
    }

    fn denoise(&self, input: &DenoiserInput) -> Result<DenoiserOutput, DenoiserError> {
        check_shape(input, self.m)?;
        let n = input.rows() * input.cols();
        Ok(DenoiserOutput::new(input.rows(), input.cols(), self.m, vec![1.0 / self.m as f64; n * self.m]))
    }
}

/// Arbitrary lookup table keyed by the whole noisy row and the time index
/// `round(t · T)`. Each row of the input is looked up independently.
#[derive(Debug, Clone)]
pub struct TableDenoiser {
    m: usize,
    steps: usize,
    cols: usize,
    table: HashMap<(Vec<u32>, usize), Vec<f64>>,
}

impl TableDenoiser {
    /// `table[(row, i)]` holds `cols · m` probabilities.
    pub fn new(
        m: usize,
        steps: usize,
        cols: usize,
        table: HashMap<(Vec<u32>, usize), Vec<f64>>,
    ) -> Result<Self, DenoiserError> {
        for ((row, _), probs) in &table {
            if row.len() != cols || probs.len() != cols * m {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "table entry with {} ids and {} probabilities",
                    row.len(),
                    probs.len()
                )));
            }
        }
        Ok(Self { m, steps, cols, table })
    }

    /// Every row over `[0, m]^cols` at every time index, with strictly
    /// positive random probabilities.
    pub fn seeded(m: usize, steps: usize, cols: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Eval, 0);
        let mut table = HashMap::new();
        let states = (m + 1).pow(cols as u32);
        for i in 0..=steps {
            for code in 0..states {
                let mut c = code;
                let row: Vec<u32> = (0..cols)
                    .map(|_| {
                        let x = (c % (m + 1)) as u32;
                        c /= m + 1;
                        x
                    })
                    .collect();
                let mut probs = Vec::with_capacity(cols * m);
                for _ in 0..cols {
                    let raw: Vec<f64> = (0..m).map(|_| 0.05 + rng.random::<f64>()).collect();
                    let total: f64 = raw.iter().sum();
                    probs.extend(raw.iter().map(|x| x / total));
                }
                table.insert((row, i), probs);
            }
        }
        Self { m, steps, cols, table }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Probabilities for one row at time index `i`.
    pub fn lookup(&self, row: &[u32], i: usize) -> Option<&[f64]> {
        self.table.get(&(row.to_vec(), i)).map(Vec::as_slice)
    }
}

impl Denoiser for TableDenoiser {
    fn num_tokens(&self) -> usize {
        self.m
    }

    fn denoise(&self, input: &DenoiserInput) -> Result<DenoiserOutput, DenoiserError> {
        check_shape(input, self.m)?;
        if input.cols() != self.cols {
            return Err(DenoiserError::ShapeMismatch(format!("table rows have {} tokens", self.cols)));
        }
        let i = (input.time() * self.steps as f64).round() as usize;
        let mut probs = Vec::with_capacity(input.rows() * self.cols * self.m);
        for row in input.ids().chunks_exact(self.cols) {
            let entry = self
                .lookup(row, i)
                .ok_or_else(|| DenoiserError::ShapeMismatch(format!("no table entry for {row:?} at step {i}")))?;
            probs.extend_from_slice(entry);
        }
        Ok(DenoiserOutput::new(input.rows(), input.cols(), self.m, probs))
    }
}

/// Size knobs of the neural denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Each position reads tokens within this distance.
    pub radius: usize,
    pub time_features: usize,
    pub attention: bool,
    pub attn_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { embed_dim: 32, hidden: 64, radius: 2, time_features: 8, attention: false, attn_dim: 16 }
    }
}

/// Position-wise network over token, position and time features with an
/// `m`-way softmax head, so no mass can land on the mask state.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralDenoiser {
    net: Network,
}

impl NeuralDenoiser {
    pub fn new(num_tokens: usize, length: usize, arch: &DenoiserArch, seed: u64) -> Self {
        Self { net: Network::new(Self::net_config(num_tokens, length, arch), seed) }
    }

    pub fn net_config(num_tokens: usize, length: usize, arch: &DenoiserArch) -> NetConfig {
        NetConfig {
            input_vocab: num_tokens + 1,
            output_vocab: num_tokens,
            embed_dim: arch.embed_dim,
            hidden: arch.hidden,
            max_len: length,
            mixing: Mixing::Bidirectional { radius: arch.radius },
            time_features: arch.time_features,
            attention: arch.attention,
            attn_dim: arch.attn_dim,
        }
    }

    pub fn from_network(net: Network) -> Result<Self, DenoiserError> {
        let c = net.config();
        if c.input_vocab != c.output_vocab + 1 || !matches!(c.mixing, Mixing::Bidirectional { .. }) {
            return Err(DenoiserError::ShapeMismatch("network is not a denoiser".into()));
        }
        Ok(Self { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn length(&self) -> usize {
        self.net.config().max_len
    }

    /// Training loss `T · L_{i−1}` at the draw selected by `seed` together
    /// with its gradient and the drawn time index.
    pub fn loss_and_grad(&self, x0: &Batch, schedule: &NoiseSchedule, seed: u64) -> Result<(f64, Vec<f64>, usize), TrainError> {
        loss_and_grad(&self.net, x0, schedule, seed)
    }
}

/// A masked position contributes `w_i · (−ln x̂[x_0])` per token, with
/// `w_i = (ᾱ_{i−1} − ᾱ_i)/(1 − ᾱ_i)`; unmasked positions contribute 0.
fn loss_and_grad(net: &Network, x0: &Batch, schedule: &NoiseSchedule, seed: u64) -> Result<(f64, Vec<f64>, usize), TrainError> {
    let m = net.config().output_vocab;
    let mask = m as u32;
    let draw = draw_training_step(x0, schedule, mask, seed)?;
    let i = draw.time_index;
    let fwd = net.forward(&draw.noisy.ids, x0.rows(), x0.cols(), Some(schedule.t(i)))?;
    let weight = if schedule.alpha_bar(i) < 1.0 { unmask_weight(schedule, i) } else { 0.0 };
    let scale = schedule.steps() as f64 * weight / x0.len() as f64;
    let logits = fwd.logits();
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (p, (&xt, &clean)) in draw.noisy.ids.iter().zip(x0.ids()).enumerate() {
        if xt != mask || scale == 0.0 {
            continue;
        }
        let row = &logits[p * m..(p + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + total.ln();
        // through the probability, so a token that underflows gives an infinite loss as in evaluation
        loss -= scale * (row[clean as usize] - lse).exp().ln();
        let d = &mut dlogits[p * m..(p + 1) * m];
        for (k, dk) in d.iter_mut().enumerate() {
            *dk = scale * (row[k] - lse).exp();
        }
        d[clean as usize] -= scale;
    }
    Ok((loss, net.backward(&fwd, &dlogits), i))
}

impl Denoiser for NeuralDenoiser {
    fn num_tokens(&self) -> usize {
        self.net.config().output_vocab
    }

    fn denoise(&self, input: &DenoiserInput) -> Result<DenoiserOutput, DenoiserError> {
        let m = self.num_tokens();
        check_shape(input, m)?;
        if input.cols() > self.length() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "rows of {} tokens exceed the model length {}",
                input.cols(),
                self.length()
            )));
        }
        let fwd = self.net.forward(input.ids(), input.rows(), input.cols(), Some(input.time()))?;
        Ok(DenoiserOutput::new(input.rows(), input.cols(), m, softmax_rows(fwd.logits(), m)))
    }
}

/// Train a fresh denoiser on `split`. The vocabulary size comes from `tok`.
pub fn train_denoiser(
    split: &CorpusSplit,
    tok: &Tokenizer,
    schedule: &NoiseSchedule,
    arch: &DenoiserArch,
    config: &TrainConfig,
) -> Result<(NeuralDenoiser, TrainLog), TrainError> {
    config.validate()?;
    let pool = WindowPool::new(split, tok, config.length)?;
    let seed = init_seed(config.seed);
    let mut model = NeuralDenoiser::new(tok.vocab_size(), config.length, arch, seed);
    let mut log = TrainLog::default();
    continue_denoiser(&mut model, &pool, schedule, config, 0, &mut log)?;
    Ok((model, log))
}

/// Run the remaining updates `start+1..=config.steps` on `model`.
pub fn continue_denoiser(
    model: &mut NeuralDenoiser,
    pool: &WindowPool,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    start: usize,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    let mask = model.num_tokens() as u32;
    if let Some(bad) = pool.max_id().filter(|&x| x >= mask) {
        return Err(TrainError::Nelbo(NelboError::MaskInClean(bad)));
    }
    run_steps(&mut model.net, pool, config, start, log, |net, batch, seed| {
        let (loss, grad, i) = loss_and_grad(net, batch, schedule, seed)?;
        Ok(StepResult { loss, grad, time_index: Some(i) })
    })
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradEntry {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradEntry>,
}

/// Largest number of parameters a check visits.
pub const GRAD_CHECK_LIMIT: usize = 200;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Up to [`GRAD_CHECK_LIMIT`] parameter indices. Every tensor gets an equal
/// share first; the rest of the budget is drawn from all parameters.
pub fn sample_parameters(net: &Network, seed: u64) -> Vec<usize> {
    let specs = net.tensor_specs();
    let total = net.num_params();
    if total <= GRAD_CHECK_LIMIT {
        return (0..total).collect();
    }
    let share = GRAD_CHECK_LIMIT / specs.len().max(1);
    let mut rng = rng::stream(seed, Purpose::GradCheck, 0);
    let mut chosen = std::collections::BTreeSet::new();
    let mut at = 0;
    for spec in &specs {
        let n = spec.numel();
        chosen.extend(index::sample(&mut rng, n, share.min(n)).into_iter().map(|k| at + k));
        at += n;
    }
    while chosen.len() < GRAD_CHECK_LIMIT {
        chosen.insert(rng.random_range(0..total));
    }
    chosen.into_iter().collect()
}

/// Central differences of `f` at the listed parameters of `net`. The step
/// actually taken is the difference of the perturbed `f32` values.
pub fn finite_differences<F, E>(net: &mut Network, indices: &[usize], epsilon: f64, mut f: F) -> Result<Vec<f64>, E>
where
    F: FnMut(&Network) -> Result<f64, E>,
    E: From<DenoiserError>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(DenoiserError::BadEpsilon(epsilon).into());
    }
    let mut out = Vec::with_capacity(indices.len());
    for &k in indices {
        let orig = net.params()[k];
        net.params_mut()[k] = (f64::from(orig) + epsilon) as f32;
        let hi = f64::from(net.params()[k]);
        let up = f(net)?;
        net.params_mut()[k] = (f64::from(orig) - epsilon) as f32;
        let lo = f64::from(net.params()[k]);
        let down = f(net)?;
        net.params_mut()[k] = orig;
        out.push((up - down) / (hi - lo));
    }
    Ok(out)
}

/// Compare the analytic gradient of the training loss with central
/// differences of the same loss evaluated through [`training_loss`].
pub fn grad_check(
    model: &NeuralDenoiser,
    x0: &Batch,
    schedule: &NoiseSchedule,
    seed: u64,
    epsilon: f64,
) -> Result<GradCheckReport, GradCheckError> {
    let indices = sample_parameters(model.network(), seed);
    grad_check_at(model, x0, schedule, seed, epsilon, &indices)
}

/// [`grad_check`] at caller-chosen parameters.
pub fn grad_check_at(
    model: &NeuralDenoiser,
    x0: &Batch,
    schedule: &NoiseSchedule,
    seed: u64,
    epsilon: f64,
    indices: &[usize],
) -> Result<GradCheckReport, GradCheckError> {
    let (_, grad, _) = model.loss_and_grad(x0, schedule, seed)?;
    let mut probe = model.clone();
    let numeric = finite_differences(&mut probe.net, indices, epsilon, |net| -> Result<f64, GradCheckError> {
        let m = NeuralDenoiser { net: net.clone() };
        Ok(training_loss(x0, &m, schedule, seed)?.0)
    })?;
    Ok(report(model.network(), indices, &grad, &numeric))
}

pub(crate) fn report(net: &Network, indices: &[usize], grad: &[f64], numeric: &[f64]) -> GradCheckReport {
    let entries: Vec<GradEntry> = indices
        .iter()
        .zip(numeric)
        .map(|(&k, &n)| GradEntry {
            index: k,
            tensor: net.tensor_of(k).map(|(name, _)| name).unwrap_or_default(),
            analytic: grad[k],
            numeric: n,
            rel_error: relative_error(grad[k], n),
        })
        .collect();
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    GradCheckReport { max_rel_error, entries }
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nelbo(#[from] NelboError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};
    use crate::nelbo::training_loss;

    fn small_arch(attention: bool) -> DenoiserArch {
        DenoiserArch { embed_dim: 6, hidden: 8, radius: 1, time_features: 4, attention, attn_dim: 4 }
    }

    #[test]
    fn untrained_output_is_uniform_and_deterministic() {
        let model = NeuralDenoiser::new(10, 8, &DenoiserArch::default(), 3);
        let input = DenoiserInput::new(2, 8, vec![10; 16], 1.0);
        let out = model.denoise(&input).unwrap();
        assert_eq!(out.width(), 10);
        for p in 0..16 {
            let row = out.position(p);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x > 0.01 && x < 1.0));
        }
        assert_eq!(out, model.denoise(&input).unwrap());
    }

    #[test]
    fn input_contract_is_enforced() {
        let model = NeuralDenoiser::new(4, 3, &small_arch(false), 1);
        assert!(matches!(model.denoise(&DenoiserInput::new(1, 3, vec![0, 1, 4], 1.5)), Err(DenoiserError::BadTime(_))));
        assert!(matches!(model.denoise(&DenoiserInput::new(1, 3, vec![0, 1], 0.5)), Err(DenoiserError::ShapeMismatch(_))));
        assert!(matches!(model.denoise(&DenoiserInput::new(1, 3, vec![0, 1, 5], 0.5)), Err(DenoiserError::ShapeMismatch(_))));
        assert!(matches!(model.denoise(&DenoiserInput::new(1, 4, vec![0; 4], 0.5)), Err(DenoiserError::ShapeMismatch(_))));
    }

    #[test]
    fn closed_form_loss_equals_generic_estimator() {
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 12).unwrap();
        let mut model = NeuralDenoiser::new(5, 6, &small_arch(true), 2);
        model.network_mut().randomize(4, 0.4);
        let x0 = Batch::new(2, 6, vec![0, 1, 2, 3, 4, 0, 4, 4, 3, 2, 1, 0]);
        for seed in 0..20 {
            let (fast, _, i) = model.loss_and_grad(&x0, &s, seed).unwrap();
            let (slow, j) = training_loss(&x0, &model, &s, seed).unwrap();
            assert_eq!(i, j);
            assert!((fast - slow).abs() < 1e-10 * slow.abs().max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 10).unwrap();
        let x0 = Batch::new(2, 5, vec![0, 1, 2, 3, 0, 3, 2, 1, 0, 1]);
        for attention in [false, true] {
            let mut model = NeuralDenoiser::new(4, 5, &small_arch(attention), 7);
            model.network_mut().randomize(8, 0.3);
            for seed in [1, 2, 3] {
                let r = grad_check(&model, &x0, &s, seed, 1e-4).unwrap();
                assert!(r.max_rel_error < 1e-3, "attention={attention} seed={seed}: {}", r.max_rel_error);
                assert!(r.entries.len() <= GRAD_CHECK_LIMIT);
                assert_eq!(r, grad_check(&model, &x0, &s, seed, 1e-4).unwrap());
            }
        }
    }

    #[test]
    fn unused_embedding_row_has_zero_gradient() {
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 10).unwrap();
        let x0 = Batch::new(1, 4, vec![0, 1, 0, 1]);
        let mut model = NeuralDenoiser::new(4, 4, &small_arch(false), 7);
        model.network_mut().randomize(8, 0.3);
        // token 3 never appears in x0 and cannot appear in x_t
        let row = model.network().tensor_range("tok_emb").unwrap().start + 3 * 6;
        let indices: Vec<usize> = (row..row + 6).collect();
        let r = grad_check_at(&model, &x0, &s, 5, 1e-4, &indices).unwrap();
        for e in &r.entries {
            assert!(e.analytic.abs() < 1e-8 && e.numeric.abs() < 1e-8, "{e:?}");
        }
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 4).unwrap();
        let model = NeuralDenoiser::new(3, 2, &small_arch(false), 1);
        let x0 = Batch::new(1, 2, vec![0, 1]);
        assert!(grad_check(&model, &x0, &s, 0, 1e-2).is_err());
    }

    #[test]
    fn seeded_table_is_a_valid_denoiser() {
        let t = TableDenoiser::seeded(2, 3, 2, 9);
        let out = t.denoise(&DenoiserInput::new(2, 2, vec![2, 0, 1, 2], 2.0 / 3.0)).unwrap();
        for p in 0..4 {
            assert!((out.position(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.position(p).iter().all(|&x| x > 0.0));
        }
    }
}
