//! Autoregressive baseline: `P(x) = Π_i P(x_i | x_{<i})` with a causal
//! network reading at most the last `C` tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, CorpusSplit, WindowPool};
use crate::denoiser::{finite_differences, report, sample_parameters, DenoiserError, GradCheckReport};
use crate::diffusion::CategoricalDist;
use crate::nn::{softmax_rows, Mixing, NetConfig, NetError, Network};
use crate::rng::{self, Purpose};
use crate::tokenizer::{Specials, Tokenizer};
use crate::train::{init_seed, run_steps, StepResult, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum ArError {
    #[error("prefix is empty")]
    EmptyPrefix,
    #[error("sequence must start with the start-of-sequence id {sos}, got {got}")]
    MissingSos { sos: u32, got: u32 },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("invalid sampling request: {0}")]
    BadSampling(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Anything that yields next-token distributions over `vocab_size()` ids
/// plus a mask state that always gets zero mass.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn specials(&self) -> Specials;
    /// `P(· | prefix)` as a distribution of length `vocab_size() + 1`.
    fn next_token_dist(&self, prefix: &[u32]) -> Result<CategoricalDist, ArError>;
}

/// `Σ_{i≥1} ln P(x_i | x_{<i})` for `ids = [SOS, x_1, …]`.
pub fn sequence_logprob(model: &dyn NextTokenModel, ids: &[u32]) -> Result<f64, ArError> {
    let sos = model.specials().sos;
    match ids.first() {
        None => return Err(ArError::EmptyPrefix),
        Some(&first) if first != sos => return Err(ArError::MissingSos { sos, got: first }),
        _ => {}
    }
    let mut total = 0.0;
    for i in 1..ids.len() {
        let dist = model.next_token_dist(&ids[..i])?;
        let x = ids[i] as usize;
        if x >= model.vocab_size() {
            return Err(ArError::BadToken { id: ids[i], vocab: model.vocab_size() });
        }
        total += dist.probs()[x].ln();
    }
    Ok(total)
}

fn sample_from(probs: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u32;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

/// Draw up to `max_new` tokens after `prefix`, stopping early at EOS or
/// end-of-text. Returns only the new tokens, without the stop token.
pub fn sample_continuation(
    model: &dyn NextTokenModel,
    prefix: &[u32],
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>, ArError> {
    if prefix.is_empty() {
        return Err(ArError::EmptyPrefix);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ArError::BadSampling(format!("temperature must be positive, got {temperature}")));
    }
    let specials = model.specials();
    let mut seq = prefix.to_vec();
    let mut body = Vec::new();
    for step in 0..max_new {
        let dist = model.next_token_dist(&seq)?;
        let probs = tempered(dist.probs(), temperature);
        let u: f64 = rng::stream(seed, Purpose::Sampling, step as u64).random();
        let next = sample_from(&probs, u);
        if next == specials.eos || next == specials.endoftext {
            break;
        }
        seq.push(next);
        body.push(next);
    }
    Ok(body)
}

/// Ancestral left-to-right sample from SOS.
pub fn sample_sequence(model: &dyn NextTokenModel, max_len: usize, temperature: f64, seed: u64) -> Result<Vec<u32>, ArError> {
    if max_len == 0 {
        return Err(ArError::BadSampling("max_len must be at least 1".into()));
    }
    sample_continuation(model, &[model.specials().sos], max_len, temperature, seed)
}

/// `p^{1/τ}` renormalized, computed in log space.
fn tempered(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return probs.to_vec();
    }
    let logs: Vec<f64> = probs.iter().map(|p| if *p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY }).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Size knobs of the AR network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArArch {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Each position reads itself and the `width − 1` tokens before it.
    pub width: usize,
    /// Context window `C`.
    pub context: usize,
    pub attention: bool,
    pub attn_dim: usize,
}

impl Default for ArArch {
    fn default() -> Self {
        Self { embed_dim: 32, hidden: 64, width: 3, context: 64, attention: false, attn_dim: 16 }
    }
}

/// Causal version of the shared network. Outputs cover every vocabulary id
/// (specials included); the mask id is not an output.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    net: Network,
    specials: Specials,
}

impl ArModel {
    pub fn new(vocab_size: usize, specials: Specials, arch: &ArArch, seed: u64) -> Self {
        Self { net: Network::new(Self::net_config(vocab_size, arch), seed), specials }
    }

    pub fn net_config(vocab_size: usize, arch: &ArArch) -> NetConfig {
        NetConfig {
            input_vocab: vocab_size,
            output_vocab: vocab_size,
            embed_dim: arch.embed_dim,
            hidden: arch.hidden,
            max_len: arch.context,
            mixing: Mixing::Causal { width: arch.width },
            time_features: 0,
            attention: arch.attention,
            attn_dim: arch.attn_dim,
        }
    }

    pub fn from_network(net: Network, specials: Specials) -> Result<Self, ArError> {
        let c = net.config();
        if c.input_vocab != c.output_vocab || !matches!(c.mixing, Mixing::Causal { .. }) {
            return Err(ArError::Net(NetError::Shape("network is not an AR model".into())));
        }
        Ok(Self { net, specials })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn context(&self) -> usize {
        self.net.config().max_len
    }

    /// Mean next-token NLL (nats) of every token in `batch`, each row
    /// conditioned on SOS and its own earlier tokens.
    pub fn batch_nll(&self, batch: &Batch) -> Result<f64, ArError> {
        Ok(self.loss_and_grad_inner(batch, false)?.0)
    }

    /// Mean cross-entropy and its gradient.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>), ArError> {
        self.loss_and_grad_inner(batch, true)
    }

    fn loss_and_grad_inner(&self, batch: &Batch, want_grad: bool) -> Result<(f64, Vec<f64>), ArError> {
        loss_and_grad(&self.net, self.specials, batch, want_grad)
    }
}

fn loss_and_grad(net: &Network, specials: Specials, batch: &Batch, want_grad: bool) -> Result<(f64, Vec<f64>), ArError> {
    let v = net.config().output_vocab;
    if batch.cols() > net.config().max_len {
        return Err(ArError::Net(NetError::Shape(format!(
            "windows of {} tokens exceed the context {}",
            batch.cols(),
            net.config().max_len
        ))));
    }
    if let Some(&bad) = batch.ids().iter().find(|&&x| x as usize >= v) {
        return Err(ArError::BadToken { id: bad, vocab: v });
    }
    // teacher forcing: row r reads [SOS] + w[..L−1] and predicts w
    let mut inputs = Vec::with_capacity(batch.len());
    for r in 0..batch.rows() {
        inputs.push(specials.sos);
        inputs.extend_from_slice(&batch.row(r)[..batch.cols() - 1]);
    }
    let fwd = net.forward(&inputs, batch.rows(), batch.cols(), None)?;
    let logits = fwd.logits();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = if want_grad { vec![0.0; logits.len()] } else { Vec::new() };
    for (p, &target) in batch.ids().iter().enumerate() {
        let row = &logits[p * v..(p + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss -= (row[target as usize] - lse).exp().ln() / n;
        if want_grad {
            let d = &mut dlogits[p * v..(p + 1) * v];
            for (k, dk) in d.iter_mut().enumerate() {
                *dk = (row[k] - lse).exp() / n;
            }
            d[target as usize] -= 1.0 / n;
        }
    }
    let grad = if want_grad { net.backward(&fwd, &dlogits) } else { Vec::new() };
    Ok((loss, grad))
}

impl NextTokenModel for ArModel {
    fn vocab_size(&self) -> usize {
        self.net.config().output_vocab
    }

    fn specials(&self) -> Specials {
        self.specials
    }

    /// Reads the last `C` tokens of `prefix`, positioned from 0.
    fn next_token_dist(&self, prefix: &[u32]) -> Result<CategoricalDist, ArError> {
        if prefix.is_empty() {
            return Err(ArError::EmptyPrefix);
        }
        let window = &prefix[prefix.len().saturating_sub(self.context())..];
        let v = self.vocab_size();
        let fwd = self.net.forward(window, 1, window.len(), None)?;
        let last = &fwd.logits()[(window.len() - 1) * v..];
        let mut probs = softmax_rows(last, v);
        probs.push(0.0);
        Ok(CategoricalDist::with_tolerance(probs, 1e-9).expect("softmax is a distribution"))
    }
}

/// Train a fresh AR model on `split`.
pub fn train_ar(
    split: &CorpusSplit,
    tok: &Tokenizer,
    arch: &ArArch,
    config: &TrainConfig,
) -> Result<(ArModel, TrainLog), TrainError> {
    config.validate()?;
    if config.length > arch.context {
        return Err(TrainError::BadConfig(format!(
            "window length {} exceeds the context {}",
            config.length, arch.context
        )));
    }
    let pool = WindowPool::new(split, tok, config.length)?;
    let seed = init_seed(config.seed);
    let mut model = ArModel::new(tok.vocab_size(), tok.specials(), arch, seed);
    let mut log = TrainLog::default();
    continue_ar(&mut model, &pool, config, 0, &mut log)?;
    Ok((model, log))
}

/// Run the remaining updates `start+1..=config.steps` on `model`.
pub fn continue_ar(
    model: &mut ArModel,
    pool: &WindowPool,
    config: &TrainConfig,
    start: usize,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    let specials = model.specials;
    run_steps(&mut model.net, pool, config, start, log, |net, batch, _seed| {
        let (loss, grad) = loss_and_grad(net, specials, batch, true)?;
        Ok(StepResult { loss, grad, time_index: None })
    })
}

/// Compare the analytic cross-entropy gradient with central differences of
/// the mean NLL computed through [`sequence_logprob`].
pub fn ar_grad_check(model: &ArModel, batch: &Batch, seed: u64, epsilon: f64) -> Result<GradCheckReport, ArError> {
    let indices = sample_parameters(model.network(), seed);
    ar_grad_check_at(model, batch, epsilon, &indices)
}

pub fn ar_grad_check_at(model: &ArModel, batch: &Batch, epsilon: f64, indices: &[usize]) -> Result<GradCheckReport, ArError> {
    let (_, grad) = model.loss_and_grad(batch)?;
    let mut probe = model.net.clone();
    let specials = model.specials;
    let numeric = finite_differences(&mut probe, indices, epsilon, |net| -> Result<f64, ArError> {
        let m = ArModel { net: net.clone(), specials };
        let mut total = 0.0;
        for r in 0..batch.rows() {
            let mut ids = vec![specials.sos];
            ids.extend_from_slice(batch.row(r));
            total -= sequence_logprob(&m, &ids)?;
        }
        Ok(total / batch.len() as f64)
    })?;
    Ok(report(model.network(), indices, &grad, &numeric))
}

/// Count-based bigram model with add-`alpha` smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    vocab: usize,
    specials: Specials,
    probs: Vec<f64>,
}

impl BigramModel {
    /// Fit on sequences that each start with SOS.
    pub fn fit(sequences: &[Vec<u32>], vocab: usize, specials: Specials, alpha: f64) -> Self {
        let mut counts = vec![alpha; vocab * vocab];
        for seq in sequences {
            for w in seq.windows(2) {
                counts[w[0] as usize * vocab + w[1] as usize] += 1.0;
            }
        }
        for row in counts.chunks_exact_mut(vocab) {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|c| *c /= total);
            } else {
                row.iter_mut().for_each(|c| *c = 1.0 / vocab as f64);
            }
        }
        Self { vocab, specials, probs: counts }
    }

    pub fn prob(&self, prev: u32, next: u32) -> f64 {
        self.probs[prev as usize * self.vocab + next as usize]
    }
}

impl NextTokenModel for BigramModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn specials(&self) -> Specials {
        self.specials
    }

    fn next_token_dist(&self, prefix: &[u32]) -> Result<CategoricalDist, ArError> {
        let &last = prefix.last().ok_or(ArError::EmptyPrefix)?;
        if last as usize >= self.vocab {
            return Err(ArError::BadToken { id: last, vocab: self.vocab });
        }
        let mut probs = self.probs[last as usize * self.vocab..(last as usize + 1) * self.vocab].to_vec();
        probs.push(0.0);
        Ok(CategoricalDist::with_tolerance(probs, 1e-9).expect("rows are normalized"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SPECIALS: Specials = Specials { sos: 5, eos: 6, endoftext: 7, mask: 8 };

    fn small(attention: bool, context: usize) -> ArModel {
        let arch = ArArch { embed_dim: 6, hidden: 8, width: 3, context, attention, attn_dim: 4 };
        let mut m = ArModel::new(8, SPECIALS, &arch, 3);
        m.network_mut().randomize(11, 0.4);
        m
    }

    #[test]
    fn untrained_model_is_uniform_and_excludes_mask() {
        let m = ArModel::new(8, SPECIALS, &ArArch::default(), 1);
        let d = m.next_token_dist(&[5, 0, 1]).unwrap();
        assert_eq!(d.len(), 9);
        assert_eq!(d.probs()[8], 0.0);
        assert!(d.probs()[..8].iter().all(|&p| (p - 0.125).abs() < 1e-12));
        assert!(matches!(m.next_token_dist(&[]), Err(ArError::EmptyPrefix)));
    }

    #[test]
    fn only_last_context_tokens_matter() {
        let m = small(true, 4);
        let a = m.next_token_dist(&[5, 0, 1, 2, 3, 4, 0]).unwrap();
        let b = m.next_token_dist(&[5, 4, 4, 2, 3, 4, 0]).unwrap();
        assert_eq!(a, b);
        let c = m.next_token_dist(&[5, 4, 4, 1, 3, 4, 0]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_nll_matches_chain_rule() {
        let m = small(true, 6);
        let batch = Batch::new(2, 5, vec![0, 1, 2, 3, 4, 4, 3, 2, 1, 0]);
        let fast = m.batch_nll(&batch).unwrap();
        let mut slow = 0.0;
        for r in 0..2 {
            let mut ids = vec![5];
            ids.extend_from_slice(batch.row(r));
            slow -= sequence_logprob(&m, &ids).unwrap();
        }
        assert!((fast - slow / 10.0).abs() < 1e-12);
    }

    #[test]
    fn logprob_telescopes() {
        let m = small(false, 8);
        let a = [5, 1, 2];
        let ab = [5, 1, 2, 3, 0];
        let tail: f64 = (3..5).map(|i| m.next_token_dist(&ab[..i]).unwrap().probs()[ab[i] as usize].ln()).sum();
        let lhs = sequence_logprob(&m, &ab).unwrap();
        let rhs = sequence_logprob(&m, &a).unwrap() + tail;
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(matches!(sequence_logprob(&m, &[1, 2]), Err(ArError::MissingSos { .. })));
        assert!(matches!(sequence_logprob(&m, &[]), Err(ArError::EmptyPrefix)));
    }

    #[test]
    fn bigram_hand_product() {
        // corpus: SOS a b, SOS a a, SOS b  (a = 0, b = 1)
        let seqs = vec![vec![5, 0, 1], vec![5, 0, 0], vec![5, 1]];
        let m = BigramModel::fit(&seqs, 8, SPECIALS, 0.0);
        // P(a|SOS) = 2/3, P(b|a) = 1/2
        assert!((m.prob(5, 0) - 2.0 / 3.0).abs() < 1e-15);
        let lp = sequence_logprob(&m, &[5, 0, 1]).unwrap();
        assert!((lp - (2.0f64 / 3.0 * 0.5).ln()).abs() < 1e-12);
        let single = sequence_logprob(&m, &[5, 1]).unwrap();
        assert!((single - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn sampling_stops_and_is_deterministic() {
        // SOS → EOS with probability 1 gives an empty body
        let stop = BigramModel::fit(&[vec![5, 6]], 8, SPECIALS, 0.0);
        assert!(sample_sequence(&stop, 10, 1.0, 0).unwrap().is_empty());
        let m = small(false, 8);
        let a = sample_sequence(&m, 20, 1.0, 4).unwrap();
        assert_eq!(a, sample_sequence(&m, 20, 1.0, 4).unwrap());
        assert!(a.len() <= 20);
        assert!(a.iter().all(|&x| x != 6 && x != 7 && x != 8));
    }

    #[test]
    fn cold_sampling_is_greedy() {
        let m = small(true, 8);
        let sampled = sample_sequence(&m, 6, 1e-6, 9).unwrap();
        let mut seq = vec![5];
        let mut greedy = Vec::new();
        for _ in 0..6 {
            let next = m.next_token_dist(&seq).unwrap().argmax() as u32;
            if next == 6 || next == 7 {
                break;
            }
            seq.push(next);
            greedy.push(next);
        }
        assert_eq!(sampled, greedy);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for attention in [false, true] {
            let m = small(attention, 6);
            let batch = Batch::new(2, 5, vec![0, 1, 2, 3, 4, 4, 3, 2, 1, 0]);
            let r = ar_grad_check(&m, &batch, 3, 1e-4).unwrap();
            assert!(r.max_rel_error < 1e-3, "attention={attention}: {}", r.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn later_tokens_never_change_earlier_conditionals(tail in proptest::collection::vec(0u32..8, 1..5), cut in 1usize..4) {
            let m = small(true, 12);
            let mut ids = vec![5, 0, 1, 2];
            let base = m.next_token_dist(&ids[..cut]).unwrap();
            ids.extend(tail);
            prop_assert_eq!(base, m.next_token_dist(&ids[..cut]).unwrap());
            let fwd = m.network().forward(&ids, 1, ids.len(), None).unwrap();
            let short = m.network().forward(&ids[..cut], 1, cut, None).unwrap();
            prop_assert_eq!(&fwd.logits()[..cut * 8], short.logits());
        }
    }
}
