//! Experiment orchestration.
//!
//! An experiment trains and evaluates every `(model, seed)` cell on one corpus
//! and writes everything under `<out>/<experiment>/`:
//!
//! ```text
//! vocab.json
//! comparison.md
//! aggregate.json
//! <model>/<seed>/checkpoint.bin
//!                train_log.csv
//!                nelbo_log.csv      (d3pm only)
//!                train_config.json
//!                report.json
//!                timing.json
//!                error.txt          (failed cells only)
//! ```
//!
//! `report.json` holds only the reproducible part of an evaluation, so reruns
//! of the same config produce identical files. Wall-clock numbers go to
//! `timing.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ar::{sample_sequence, ArArch, ArError, ArModel};
use crate::checkpoint::{Checkpoint, CheckpointError, LoadedModel};
use crate::corpus::{load_corpus, Batch, Corpus, CorpusError, CorpusFormat, CorpusSplit, SplitName, WindowPool};
use crate::denoiser::{
    continue_denoiser, grad_check, DenoiserArch, GradCheckReport, NeuralDenoiser, OracleDenoiser, TableDenoiser,
    GRAD_CHECK_LIMIT,
};
use crate::diffusion::{
    ancestral_sample, build_schedule, cumulative_matrix, cumulative_matrix_product, posterior, CategoricalDist,
    DiffusionError, NoiseSchedule, ScheduleKind,
};
use crate::metrics::{
    bpc, bpt, eval_pool, identity_error, ppl, reference_aggregates, D3pmScorer, EvalReport, MetricsError, ModelKind,
    ReportSummary, ReportTiming, SeedAggregate, UniformScorer, REFERENCE_AR_MEAN_BPT, REFERENCE_AR_ROWS,
    REFERENCE_D3PM_MEAN_BPT,
};
use crate::nelbo::{nelbo_terms, nelbo_terms_exact, step_loss_exact};
use crate::nn::NetConfig;
use crate::oracle::{nelbo_by_trajectories, nll_by_trajectories, posterior_by_paths};
use crate::rng::{self, Purpose};
use crate::tokenizer::{train_bpe, Alphabet, Specials, Tokenizer, TokenizerError, TokenizerWarning};
use crate::train::{init_seed, TrainConfig, TrainError, TrainLog};

/// Environment variable that replaces `out.dir`.
pub const OUT_ENV: &str = "D3PMLAB_OUT";

pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const NELBO_LOG_FILE: &str = "nelbo_log.csv";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const ERROR_FILE: &str = "error.txt";
pub const COMPARISON_FILE: &str = "comparison.md";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ar(#[from] ArError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

/// Training overrides for a single `(model, seed)` cell.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellOverride {
    pub lr: Option<f64>,
    pub warmup: Option<usize>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub data_path: PathBuf,
    pub data_format: CorpusFormat,
    pub vocab_size: usize,
    pub alphabet: Alphabet,
    pub models: Vec<ModelKind>,
    pub steps_t: usize,
    pub schedule: ScheduleKind,
    pub sampling_steps: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub length: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub attention: bool,
    pub attn_dim: usize,
    pub radius: usize,
    pub time_features: usize,
    pub ar_context: usize,
    pub ar_width: usize,
    pub token_budget: usize,
    pub eval_split: SplitName,
    pub seeds: Vec<u64>,
    pub seeds_ar: Option<Vec<u64>>,
    pub seeds_d3pm: Option<Vec<u64>>,
    pub lr: f64,
    pub warmup: usize,
    pub train_steps: usize,
    /// Save a checkpoint every this many updates; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub cells: BTreeMap<(ModelKind, u64), CellOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DenoiserArch::default();
        let a = ArArch::default();
        let t = TrainConfig::default();
        Self {
            name: "experiment".into(),
            data_path: PathBuf::from("data"),
            data_format: CorpusFormat::Plain,
            vocab_size: 512,
            alphabet: Alphabet::Full,
            models: vec![ModelKind::Ar, ModelKind::D3pm],
            steps_t: 1000,
            schedule: ScheduleKind::AbsorbingUniform,
            sampling_steps: 1000,
            batch_size: t.batch_size,
            eval_batch_size: t.batch_size,
            length: t.length,
            embed_dim: d.embed_dim,
            hidden: d.hidden,
            attention: d.attention,
            attn_dim: d.attn_dim,
            radius: d.radius,
            time_features: d.time_features,
            ar_context: a.context,
            ar_width: a.width,
            token_budget: 100_000,
            eval_split: SplitName::Valid,
            seeds: vec![1],
            seeds_ar: None,
            seeds_d3pm: None,
            lr: t.lr,
            warmup: t.warmup,
            train_steps: t.steps,
            checkpoint_every: 0,
            out_dir: PathBuf::from("out"),
            jobs: 1,
            cells: BTreeMap::new(),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), message: e.to_string() })
}

fn flag(key: &str, raw: &str) -> Result<bool, ConfigError> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), message: format!("expected true or false, got '{raw}'") }),
    }
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| value(key, s)).collect()
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}

impl ExperimentConfig {
    /// Parse `key=value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim().trim_end_matches('\\').trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: n + 1, text: raw.into() })?;
            config.set(key.trim(), val.trim())?;
        }
        Ok(config)
    }

    /// Read `path`, apply `overrides` (each `key=value`) and validate.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut config = Self::parse(&text)?;
        config.apply_overrides(overrides)?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let (key, val) = o.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: o.clone() })?;
            self.set(key.trim(), val.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        match key {
            "experiment.name" => self.name = raw.into(),
            "data.path" => self.data_path = PathBuf::from(raw),
            "data.format" => self.data_format = value(key, raw)?,
            "tokenizer.vocab_size" => self.vocab_size = value(key, raw)?,
            "tokenizer.alphabet" => self.alphabet = value(key, raw)?,
            "models" => self.models = list(key, raw)?,
            "parameterization" => self.models = vec![value(key, raw)?],
            "T" => self.steps_t = value(key, raw)?,
            "schedule" => self.schedule = value(key, raw)?,
            "sampling.steps" => self.sampling_steps = value(key, raw)?,
            "sampling.predictor" if raw == "ddpm" => {}
            "time_conditioning" if flag(key, raw)? => {}
            "loader.batch_size" => self.batch_size = value(key, raw)?,
            "loader.eval_batch_size" => self.eval_batch_size = value(key, raw)?,
            "model.length" => self.length = value(key, raw)?,
            "model.embed_dim" => self.embed_dim = value(key, raw)?,
            "model.hidden" => self.hidden = value(key, raw)?,
            "model.attention" => self.attention = flag(key, raw)?,
            "model.attn_dim" => self.attn_dim = value(key, raw)?,
            "denoiser.radius" => self.radius = value(key, raw)?,
            "denoiser.time_features" => self.time_features = value(key, raw)?,
            "ar.context" => self.ar_context = value(key, raw)?,
            "ar.width" => self.ar_width = value(key, raw)?,
            "eval.token_budget" => self.token_budget = value(key, raw)?,
            "eval.split" => self.eval_split = value(key, raw)?,
            "seed" | "seeds" => self.seeds = list(key, raw)?,
            "seeds.ar" => self.seeds_ar = Some(list(key, raw)?),
            "seeds.d3pm" => self.seeds_d3pm = Some(list(key, raw)?),
            "optim.lr" => self.lr = value(key, raw)?,
            "optim.warmup" => self.warmup = value(key, raw)?,
            "train.steps" => self.train_steps = value(key, raw)?,
            "train.checkpoint_every" => self.checkpoint_every = value(key, raw)?,
            "out.dir" => self.out_dir = PathBuf::from(raw),
            "harness.jobs" => self.jobs = value(key, raw)?,
            "sampling.predictor" | "time_conditioning" => {
                return Err(ConfigError::BadValue { key: key.into(), message: format!("unsupported value '{raw}'") })
            }
            _ => return self.set_cell(key, raw),
        }
        Ok(())
    }

    /// `cell.<model>.<seed>.<key>` for `key` in `optim.lr`, `optim.warmup`
    /// and `train.steps`.
    fn set_cell(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let unknown = || ConfigError::UnknownKey(key.into());
        let rest = key.strip_prefix("cell.").ok_or_else(unknown)?;
        let mut parts = rest.splitn(3, '.');
        let (Some(model), Some(seed), Some(field)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(unknown());
        };
        let model: ModelKind = value(key, model)?;
        let seed: u64 = value(key, seed)?;
        let entry = self.cells.entry((model, seed)).or_default();
        match field {
            "optim.lr" => entry.lr = Some(value(key, raw)?),
            "optim.warmup" => entry.warmup = Some(value(key, raw)?),
            "train.steps" => entry.steps = Some(value(key, raw)?),
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("experiment name '{}' is not a plain directory name", self.name));
        }
        if self.models.is_empty() || has_duplicates(&self.models) {
            return bad("models must be a non-empty list without repeats".into());
        }
        for &kind in &self.models {
            let seeds = self.seeds_for(kind);
            if seeds.is_empty() || has_duplicates(seeds) {
                return bad(format!("seeds for {kind} must be non-empty and distinct"));
            }
        }
        if !(1..=self.steps_t).contains(&self.sampling_steps) {
            return bad(format!("need T ≥ sampling.steps ≥ 1, got T={} sampling.steps={}", self.steps_t, self.sampling_steps));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.length < 2 {
            return bad("batch sizes must be positive and model.length at least 2".into());
        }
        if self.token_budget < self.length {
            return bad(format!("eval.token_budget {} is below model.length {}", self.token_budget, self.length));
        }
        if self.models.contains(&ModelKind::Ar) && self.length > self.ar_context {
            return bad(format!("model.length {} exceeds ar.context {}", self.length, self.ar_context));
        }
        if self.jobs == 0 || self.train_steps == 0 {
            return bad("harness.jobs and train.steps must be positive".into());
        }
        for &(kind, seed) in self.cells.keys() {
            if !self.models.contains(&kind) || !self.seeds_for(kind).contains(&seed) {
                return bad(format!("override for cell {kind}/{seed}, which is not part of the experiment"));
            }
        }
        for (kind, seed) in self.cell_list() {
            self.train_config(kind, seed).validate().map_err(|e| ConfigError::Invalid(format!("{kind}/{seed}: {e}")))?;
        }
        Ok(())
    }

    pub fn seeds_for(&self, kind: ModelKind) -> &[u64] {
        let specific = match kind {
            ModelKind::Ar => &self.seeds_ar,
            ModelKind::D3pm => &self.seeds_d3pm,
        };
        specific.as_deref().unwrap_or(&self.seeds)
    }

    /// Every `(model, seed)` cell in table order.
    pub fn cell_list(&self) -> Vec<(ModelKind, u64)> {
        self.models.iter().flat_map(|&k| self.seeds_for(k).iter().map(move |&s| (k, s))).collect()
    }

    pub fn train_config(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        let o = self.cells.get(&(kind, seed)).copied().unwrap_or_default();
        TrainConfig {
            steps: o.steps.unwrap_or(self.train_steps),
            lr: o.lr.unwrap_or(self.lr),
            warmup: o.warmup.unwrap_or(self.warmup),
            batch_size: self.batch_size,
            length: self.length,
            seed,
        }
    }

    pub fn denoiser_arch(&self) -> DenoiserArch {
        DenoiserArch {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            radius: self.radius,
            time_features: self.time_features,
            attention: self.attention,
            attn_dim: self.attn_dim,
        }
    }

    pub fn ar_arch(&self) -> ArArch {
        ArArch {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            width: self.ar_width,
            context: self.ar_context,
            attention: self.attention,
            attn_dim: self.attn_dim,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        build_schedule(self.schedule, self.steps_t)
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn cell_dir(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.experiment_dir().join(kind.as_str()).join(seed.to_string())
    }
}

/// The corpus and the tokenizer trained on its train split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub tokenizer: Tokenizer,
    pub warning: Option<TokenizerWarning>,
}

/// Load the corpus, train the tokenizer and save it as `vocab.json`.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    let corpus = load_corpus(&config.data_path, config.data_format)?;
    let outcome = train_bpe(&corpus.train.documents, config.vocab_size, config.alphabet)?;
    let dir = config.experiment_dir();
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    outcome.tokenizer.save(dir.join(VOCAB_FILE))?;
    Ok(Prepared { corpus, tokenizer: outcome.tokenizer, warning: outcome.warning })
}

/// Everything that must match for a checkpoint to be resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSettings {
    pub model: ModelKind,
    pub train: TrainConfig,
    pub net: NetConfig,
    pub vocab_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub schedule: Option<ScheduleKind>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none", default)]
    pub steps_t: Option<usize>,
}

impl CellSettings {
    fn resumable_from(&self, saved: &CellSettings) -> bool {
        let same_run = TrainConfig { steps: self.train.steps, ..saved.train } == self.train;
        same_run && saved.model == self.model && saved.net == self.net && saved.vocab_hash == self.vocab_hash
            && saved.schedule == self.schedule && saved.steps_t == self.steps_t
    }
}

/// A trained cell ready for evaluation.
#[derive(Debug, Clone)]
pub struct TrainedCell {
    pub model: LoadedModel,
    pub log: TrainLog,
    /// Update the run resumed from; 0 for a fresh start.
    pub resumed_from: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_error(&tmp))?;
    fs::rename(&tmp, path).map_err(io_error(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

const NELBO_HEADER: &str = "step,l_t,l_0,l_mid,total";

/// Try to pick up a previous run of the same cell.
fn resume_point(dir: &Path, settings: &CellSettings) -> Option<(LoadedModel, TrainLog, usize, String)> {
    let saved: CellSettings = serde_json::from_str(&fs::read_to_string(dir.join(TRAIN_CONFIG_FILE)).ok()?).ok()?;
    if !settings.resumable_from(&saved) {
        return None;
    }
    let checkpoint = Checkpoint::load(dir.join(CHECKPOINT_FILE)).ok()?;
    let step = checkpoint.header.step;
    if step > settings.train.steps || checkpoint.header.kind != settings.model || checkpoint.header.config != settings.net {
        return None;
    }
    checkpoint.check_vocab(&settings.vocab_hash).ok()?;
    let mut log = TrainLog::from_csv(&fs::read_to_string(dir.join(TRAIN_LOG_FILE)).ok()?).ok()?;
    log.rows.retain(|r| r.step <= step);
    if log.rows.len() != step {
        return None;
    }
    let mut nelbo = String::from(NELBO_HEADER);
    nelbo.push('\n');
    if settings.model == ModelKind::D3pm {
        let text = fs::read_to_string(dir.join(NELBO_LOG_FILE)).ok()?;
        for line in text.lines().skip(1) {
            let row_step: usize = line.split(',').next()?.parse().ok()?;
            if row_step <= step {
                nelbo.push_str(line);
                nelbo.push('\n');
            }
        }
    }
    Some((checkpoint.into_model().ok()?, log, step, nelbo))
}

fn cell_settings(prep: &Prepared, config: &ExperimentConfig, kind: ModelKind, seed: u64) -> Result<CellSettings, HarnessError> {
    let vocab = prep.tokenizer.vocab_size();
    let (net, schedule, steps_t) = match kind {
        ModelKind::Ar => (ArModel::net_config(vocab, &config.ar_arch()), None, None),
        ModelKind::D3pm => {
            (NeuralDenoiser::net_config(vocab, config.length, &config.denoiser_arch()), Some(config.schedule), Some(config.steps_t))
        }
    };
    Ok(CellSettings {
        model: kind,
        train: config.train_config(kind, seed),
        net,
        vocab_hash: prep.tokenizer.fingerprint(),
        schedule,
        steps_t,
    })
}

fn fresh_model(prep: &Prepared, config: &ExperimentConfig, kind: ModelKind, seed: u64) -> Result<LoadedModel, HarnessError> {
    let tok = &prep.tokenizer;
    let init = init_seed(seed);
    Ok(match kind {
        ModelKind::Ar => LoadedModel::Ar(ArModel::new(tok.vocab_size(), tok.specials(), &config.ar_arch(), init)),
        ModelKind::D3pm => LoadedModel::D3pm {
            model: NeuralDenoiser::new(tok.vocab_size(), config.length, &config.denoiser_arch(), init),
            schedule: config.noise_schedule()?,
        },
    })
}

fn checkpoint_of(model: &LoadedModel, step: usize, tok: &Tokenizer) -> Result<Checkpoint, CheckpointError> {
    match model {
        LoadedModel::Ar(m) => Ok(Checkpoint::for_ar(m, step, &tok.fingerprint())),
        LoadedModel::D3pm { model, schedule } => Checkpoint::for_denoiser(model, schedule, step, &tok.fingerprint(), tok.specials()),
    }
}

/// First evaluation batch, used to track the bound during training.
fn probe_batch(prep: &Prepared, config: &ExperimentConfig, seed: u64) -> Result<Batch, HarnessError> {
    let pool = WindowPool::new(prep.corpus.split(config.eval_split), &prep.tokenizer, config.length)?;
    let mut epoch = pool.epoch(config.eval_batch_size, rng::derive(seed, Purpose::Shuffle, 0))?;
    Ok(epoch.next().expect("an epoch holds at least one batch"))
}

/// Train one cell, resuming from its checkpoint when the saved run is
/// compatible, and checkpointing every `train.checkpoint_every` updates.
pub fn train_cell(prep: &Prepared, config: &ExperimentConfig, kind: ModelKind, seed: u64) -> Result<TrainedCell, HarnessError> {
    let dir = config.cell_dir(kind, seed);
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let settings = cell_settings(prep, config, kind, seed)?;
    let tc = settings.train;
    tc.validate()?;
    let (mut model, mut log, start, mut nelbo_log) = match resume_point(&dir, &settings) {
        Some(found) => found,
        None => (fresh_model(prep, config, kind, seed)?, TrainLog::default(), 0, format!("{NELBO_HEADER}\n")),
    };
    write_json(&dir.join(TRAIN_CONFIG_FILE), &settings)?;
    let pool = WindowPool::new(prep.corpus.split(SplitName::Train), &prep.tokenizer, tc.length)?;
    let probe = match kind {
        ModelKind::D3pm => Some(probe_batch(prep, config, seed)?),
        ModelKind::Ar => None,
    };
    let every = if config.checkpoint_every == 0 { tc.steps } else { config.checkpoint_every };
    let mut done = start;
    while done < tc.steps {
        let end = ((done / every + 1) * every).min(tc.steps);
        let chunk = TrainConfig { steps: end, ..tc };
        let result = match &mut model {
            LoadedModel::Ar(m) => crate::ar::continue_ar(m, &pool, &chunk, done, &mut log),
            LoadedModel::D3pm { model, schedule } => continue_denoiser(model, &pool, schedule, &chunk, done, &mut log),
        };
        if let Err(e) = result {
            // keep the curve up to the failure for diagnosis
            write_atomic(&dir.join(TRAIN_LOG_FILE), log.to_csv().as_bytes())?;
            return Err(e.into());
        }
        done = end;
        write_atomic(&dir.join(CHECKPOINT_FILE), &checkpoint_of(&model, done, &prep.tokenizer)?.to_bytes()?)?;
        write_atomic(&dir.join(TRAIN_LOG_FILE), log.to_csv().as_bytes())?;
        if let (LoadedModel::D3pm { model, schedule }, Some(batch)) = (&model, &probe) {
            let b = nelbo_terms(batch, model, schedule, rng::derive(seed, Purpose::Nelbo, done as u64))
                .map_err(TrainError::from)?;
            let _ = writeln!(nelbo_log, "{done},{:?},{:?},{:?},{:?}", b.l_t, b.l_0, b.mid_sum(), b.total);
            write_atomic(&dir.join(NELBO_LOG_FILE), nelbo_log.as_bytes())?;
        }
    }
    Ok(TrainedCell { model, log, resumed_from: start })
}

/// Restore a cell's model from its checkpoint.
pub fn load_cell_model(config: &ExperimentConfig, tok: &Tokenizer, kind: ModelKind, seed: u64) -> Result<LoadedModel, HarnessError> {
    let path = config.cell_dir(kind, seed).join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(HarnessError::MissingCheckpoint(path));
    }
    let checkpoint = Checkpoint::load(&path)?;
    checkpoint.check_vocab(&tok.fingerprint())?;
    if checkpoint.header.kind != kind {
        return Err(CheckpointError::WrongKind { expected: kind, found: checkpoint.header.kind }.into());
    }
    Ok(checkpoint.into_model()?)
}

/// Score a model on the configured split and budget.
pub fn evaluate(prep: &Prepared, config: &ExperimentConfig, model: &LoadedModel, seed: u64) -> Result<EvalReport, HarnessError> {
    let pool = WindowPool::new(prep.corpus.split(config.eval_split), &prep.tokenizer, config.length)?;
    let report = match model {
        LoadedModel::Ar(m) => eval_pool(m, &pool, config.eval_batch_size, config.token_budget, seed)?,
        LoadedModel::D3pm { model, schedule } => {
            let scorer = D3pmScorer { denoiser: model, schedule };
            eval_pool(&scorer, &pool, config.eval_batch_size, config.token_budget, seed)?
        }
    };
    Ok(report)
}

/// Write `report.json` and `timing.json` for a cell.
pub fn write_report(config: &ExperimentConfig, kind: ModelKind, seed: u64, report: &EvalReport) -> Result<(), HarnessError> {
    let dir = config.cell_dir(kind, seed);
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    write_json(&dir.join(REPORT_FILE), &report.summary())?;
    write_json(&dir.join(TIMING_FILE), &report.timing())
}

/// Read back a report written by [`write_report`].
pub fn read_report(config: &ExperimentConfig, kind: ModelKind, seed: u64) -> Result<EvalReport, HarnessError> {
    let dir = config.cell_dir(kind, seed);
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(io_error(&path))
    };
    let summary: ReportSummary = serde_json::from_str(&read(REPORT_FILE)?)?;
    let timing: ReportTiming = serde_json::from_str(&read(TIMING_FILE)?)?;
    Ok(EvalReport::from_parts(summary, timing))
}

/// Train, checkpoint and evaluate one cell. On failure the cell directory
/// gets an `error.txt` and no report.
pub fn run_cell(prep: &Prepared, config: &ExperimentConfig, kind: ModelKind, seed: u64) -> Result<EvalReport, HarnessError> {
    let dir = config.cell_dir(kind, seed);
    for stale in [ERROR_FILE, REPORT_FILE, TIMING_FILE] {
        let _ = fs::remove_file(dir.join(stale));
    }
    let result = train_cell(prep, config, kind, seed).and_then(|cell| {
        let report = evaluate(prep, config, &cell.model, seed)?;
        write_report(config, kind, seed, &report)?;
        Ok(report)
    });
    if let Err(e) = &result {
        let _ = fs::create_dir_all(&dir);
        let _ = fs::write(dir.join(ERROR_FILE), format!("{e}\n"));
    }
    result
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub model: ModelKind,
    pub seed: u64,
    /// The report, or the error message of a failed cell.
    pub outcome: Result<EvalReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub cells: Vec<CellResult>,
    /// One per model with at least one successful cell.
    pub aggregates: Vec<SeedAggregate>,
}

fn model_label(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Ar => "AR",
        ModelKind::D3pm => "D3PM",
    }
}

impl ComparisonTable {
    pub fn new(cells: Vec<CellResult>) -> Self {
        let mut aggregates = Vec::new();
        let mut kinds: Vec<ModelKind> = Vec::new();
        for c in &cells {
            if !kinds.contains(&c.model) {
                kinds.push(c.model);
            }
        }
        for kind in kinds {
            let reports: Vec<EvalReport> =
                cells.iter().filter(|c| c.model == kind).filter_map(|c| c.outcome.as_ref().ok().cloned()).collect();
            if let Ok(agg) = crate::metrics::aggregate_seeds(&reports) {
                aggregates.push(agg);
            }
        }
        Self { cells, aggregates }
    }

    pub fn report(&self, kind: ModelKind, seed: u64) -> Option<&EvalReport> {
        self.cells.iter().find(|c| c.model == kind && c.seed == seed)?.outcome.as_ref().ok()
    }

    pub fn aggregate(&self, kind: ModelKind) -> Option<&SeedAggregate> {
        self.aggregates.iter().find(|a| a.model_kind == kind)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }

    /// Markdown table with one row per cell and one aggregate row per model.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Model | Seed | BPT | NLL | PPL | Speed (batch/s) | Mean BPT |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        let mut i = 0;
        while i < self.cells.len() {
            let kind = self.cells[i].model;
            for c in self.cells[i..].iter().take_while(|c| c.model == kind) {
                let label = model_label(kind);
                match &c.outcome {
                    Ok(r) => {
                        let _ = writeln!(
                            out,
                            "| {label} | {} | {:.4} | {:.4} | {:.4} | {:.2} | |",
                            c.seed, r.bpt, r.nll, r.ppl, r.batches_per_sec
                        );
                    }
                    Err(_) => {
                        let _ = writeln!(out, "| {label} | {} | FAILED | FAILED | FAILED | FAILED | |", c.seed);
                    }
                }
                i += 1;
            }
            let mean = match self.aggregate(kind) {
                Some(a) => format!("{:.4} ± {:.4}", a.mean_bpt, a.std_bpt),
                None => "FAILED".into(),
            };
            let _ = writeln!(out, "| {} | mean | | | | | {mean} |", model_label(kind));
        }
        out
    }
}

/// Run every cell of the experiment, then write `comparison.md` and
/// `aggregate.json`. Cells run on up to `harness.jobs` threads; a failing
/// cell is reported in the table and does not stop the others.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ComparisonTable, HarnessError> {
    config.validate()?;
    let prep = prepare(config)?;
    let cells = config.cell_list();
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..config.jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let k = {
                    let mut n = next.lock().expect("queue lock");
                    let k = *n;
                    *n += 1;
                    k
                };
                let Some(&(model, seed)) = cells.get(k) else { break };
                let outcome = run_cell(&prep, config, model, seed).map_err(|e| e.to_string());
                results.lock().expect("results lock")[k] = Some(CellResult { model, seed, outcome });
            });
        }
    });
    let cells: Vec<CellResult> =
        results.into_inner().expect("results lock").into_iter().map(|c| c.expect("every cell ran")).collect();
    let table = ComparisonTable::new(cells);
    let dir = config.experiment_dir();
    write_atomic(&dir.join(COMPARISON_FILE), table.to_markdown().as_bytes())?;
    write_json(&dir.join(AGGREGATE_FILE), &table.aggregates)?;
    Ok(table)
}

/// Generate `count` texts from a trained model.
pub fn sample_texts(
    model: &LoadedModel,
    tok: &Tokenizer,
    config: &ExperimentConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<String>, HarnessError> {
    match model {
        LoadedModel::Ar(m) => (0..count)
            .map(|k| {
                let ids = sample_sequence(m, config.length, 1.0, rng::derive(seed, Purpose::Sampling, k as u64))?;
                Ok(tok.decode(&ids[1..])?)
            })
            .collect(),
        LoadedModel::D3pm { model, schedule } => {
            let steps = config.sampling_steps.min(schedule.steps());
            let (batch, _) = ancestral_sample(model, schedule, count, config.length, steps, seed)?;
            (0..count).map(|r| Ok(tok.decode(batch.row(r))?)).collect()
        }
    }
}

/// Outcome of one verification suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub checks: usize,
    /// Largest error seen across the suite's checks.
    pub worst: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            let status = if s.passed { "PASS" } else { "FAIL" };
            let _ = write!(out, "{status} {:<16} {:>6} checks, worst error {:.3e}", s.name, s.checks, s.worst);
            if !s.detail.is_empty() {
                let _ = write!(out, "  {}", s.detail);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "{}", if self.passed() { "all suites passed" } else { "verification FAILED" });
        out
    }
}

/// Signature of [`posterior`], so the posterior suite can be pointed at
/// another implementation.
pub type PosteriorFn = fn(u32, &CategoricalDist, &NoiseSchedule, usize, usize) -> Result<CategoricalDist, DiffusionError>;

#[derive(Debug, Clone, Copy)]
pub struct VerifyHooks {
    pub posterior: PosteriorFn,
}

impl Default for VerifyHooks {
    fn default() -> Self {
        Self { posterior }
    }
}

/// Collects the errors of one suite.
struct Tally {
    checks: usize,
    worst: f64,
    failures: Vec<String>,
}

impl Tally {
    fn new() -> Self {
        Self { checks: 0, worst: 0.0, failures: Vec::new() }
    }

    /// Record `error` against `tol`. NaN always fails.
    fn check(&mut self, error: f64, tol: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if error.is_nan() || error > self.worst {
            self.worst = if error.is_nan() { f64::NAN } else { error };
        }
        if !(error <= tol) {
            self.failures.push(what());
        }
    }

    fn finish(self, name: &'static str, outcome: Result<(), String>) -> SuiteResult {
        let mut detail = match outcome {
            Ok(()) => String::new(),
            Err(e) => format!("error: {e}"),
        };
        let passed = detail.is_empty() && self.failures.is_empty() && self.checks > 0;
        if !self.failures.is_empty() {
            let shown: Vec<&str> = self.failures.iter().take(3).map(String::as_str).collect();
            let _ = write!(detail, "{} failed: {}", self.failures.len(), shown.join("; "));
        }
        SuiteResult { name, passed, checks: self.checks, worst: self.worst, detail }
    }
}

fn random_betas(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, Purpose::Verify, len as u64);
    (0..len).map(|_| r.random_range(0.01..0.99)).collect()
}

/// Closed-form cumulative matrices against explicit products.
pub fn suite_matrix() -> SuiteResult {
    let mut t = Tally::new();
    let outcome = (|| -> Result<(), String> {
        for m in [2, 4, 8] {
            for steps in [1, 4, 32] {
                let s = NoiseSchedule::from_betas(random_betas(steps, m as u64)).map_err(|e| e.to_string())?;
                for i in 0..=steps {
                    let closed = cumulative_matrix(&s, i, m).map_err(|e| e.to_string())?;
                    let product = cumulative_matrix_product(&s, i, m).map_err(|e| e.to_string())?;
                    t.check(closed.max_abs_diff(&product), 1e-12, || format!("m={m} T={steps} i={i}: closed form vs product"));
                    t.check(closed.row_sum_error().max(product.row_sum_error()), 1e-12, || {
                        format!("m={m} T={steps} i={i}: row sums")
                    });
                    let absorbing = closed.mask_row_is_absorbing() && product.mask_row_is_absorbing();
                    t.check(if absorbing { 0.0 } else { 1.0 }, 0.0, || format!("m={m} T={steps} i={i}: mask row"));
                }
            }
        }
        Ok(())
    })();
    t.finish("matrix", outcome)
}

/// `posterior_fn` against Bayes' rule summed over every forward path, for
/// all `m ≤ 4`, `T ≤ 4`, `i > j`, `x_t` and one-hot `x_0`.
pub fn suite_posterior(posterior_fn: PosteriorFn) -> SuiteResult {
    let mut t = Tally::new();
    let outcome = (|| -> Result<(), String> {
        for m in 1..=4usize {
            for steps in 1..=4usize {
                let schedules = [
                    NoiseSchedule::from_betas(random_betas(steps, 100 + m as u64)).map_err(|e| e.to_string())?,
                    build_schedule(ScheduleKind::AbsorbingUniform, steps).map_err(|e| e.to_string())?,
                ];
                for s in &schedules {
                    for i in 1..=steps {
                        for j in 0..i {
                            for xt in 0..=m as u32 {
                                for x0 in 0..m as u32 {
                                    let Some(want) = posterior_by_paths(s, m, x0, xt, i, j).map_err(|e| e.to_string())? else {
                                        continue;
                                    };
                                    let label = || format!("m={m} T={steps} i={i} j={j} x_t={xt} x_0={x0}");
                                    match posterior_fn(xt, &CategoricalDist::one_hot(x0 as usize, m + 1), s, i, j) {
                                        Ok(got) => {
                                            let tv = 0.5
                                                * got.probs().iter().zip(&want).map(|(a, b)| (a - b).abs()).sum::<f64>();
                                            t.check(tv, 1e-10, label);
                                        }
                                        Err(e) => t.check(f64::INFINITY, 1e-10, || format!("{}: {e}", label())),
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    })();
    t.finish("posterior", outcome)
}

/// Bound decomposition against trajectory enumeration on `m = 2`, `T = 2`,
/// `L = 1`, plus the oracle-zero and time-average properties.
pub fn suite_nelbo() -> SuiteResult {
    let mut t = Tally::new();
    let outcome = (|| -> Result<(), String> {
        let err = |e: &dyn std::fmt::Display| e.to_string();
        for kind in [ScheduleKind::AbsorbingUniform, ScheduleKind::Linear] {
            let s = build_schedule(kind, 2).map_err(|e| err(&e))?;
            for table_seed in 0..4 {
                let table = TableDenoiser::seeded(2, 2, 1, table_seed);
                for x0 in 0..2u32 {
                    let batch = Batch::new(1, 1, vec![x0]);
                    let label = |what: &str| format!("{} table {table_seed} x_0={x0}: {what}", kind.as_str());
                    let exact = nelbo_terms_exact(&batch, &table, &s).map_err(|e| err(&e))?;
                    let brute = nelbo_by_trajectories(&[x0], &table, &s).map_err(|e| err(&e))?;
                    t.check((exact.total - brute).abs(), 1e-8, || label("decomposition vs trajectories"));
                    let nll = nll_by_trajectories(&[x0], &table, &s).map_err(|e| err(&e))?;
                    t.check((nll - exact.total).max(0.0), 1e-12, || label("bound below exact NLL"));
                    let mut average = 0.0;
                    for i in 1..=s.steps() {
                        average += s.steps() as f64 * step_loss_exact(&batch, &table, &s, i).map_err(|e| err(&e))?;
                    }
                    average /= s.steps() as f64;
                    t.check((average - exact.l_0 - exact.mid_sum()).abs(), 1e-8, || label("time-averaged estimator"));
                }
            }
        }
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 10).map_err(|e| err(&e))?;
        let batch = Batch::new(2, 4, vec![0, 1, 2, 1, 2, 2, 0, 1]);
        let oracle = OracleDenoiser::new(batch.clone(), 3);
        for seed in 0..4 {
            let b = nelbo_terms(&batch, &oracle, &s, seed).map_err(|e| err(&e))?;
            t.check(b.l_0.abs() + b.mid_sum().abs() + b.l_t.abs(), 0.0, || format!("oracle seed {seed}: terms not zero"));
        }
        Ok(())
    })();
    t.finish("nelbo", outcome)
}

fn grad_entries_check(t: &mut Tally, label: &str, report: &GradCheckReport, total_params: usize) {
    let needed = GRAD_CHECK_LIMIT.min(total_params);
    t.check(if report.entries.len() >= needed { 0.0 } else { 1.0 }, 0.0, || format!("{label}: too few parameters"));
    t.check(report.max_rel_error, 1e-3, || format!("{label}: relative error {:.2e}", report.max_rel_error));
}

/// Analytic gradients of both models against central differences.
pub fn suite_gradient() -> SuiteResult {
    let mut t = Tally::new();
    let outcome = (|| -> Result<(), String> {
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 20).map_err(|e| e.to_string())?;
        let mut r = rng::stream(7, Purpose::Verify, 0);
        let ids: Vec<u32> = (0..16).map(|_| r.random_range(0..8)).collect();
        let batch = Batch::new(2, 8, ids);
        for attention in [false, true] {
            let arch = DenoiserArch { embed_dim: 16, hidden: 24, attention, attn_dim: 8, ..DenoiserArch::default() };
            let mut model = NeuralDenoiser::new(8, 8, &arch, 3);
            model.network_mut().randomize(5, 0.3);
            for seed in [1, 2] {
                let report = grad_check(&model, &batch, &s, seed, 1e-4).map_err(|e| e.to_string())?;
                grad_entries_check(&mut t, &format!("denoiser attention={attention} seed={seed}"), &report, model.network().num_params());
            }
            let specials = Specials { sos: 5, eos: 6, endoftext: 7, mask: 8 };
            let arch = ArArch { embed_dim: 16, hidden: 24, attention, attn_dim: 8, ..ArArch::default() };
            let mut ar = ArModel::new(8, specials, &arch, 3);
            ar.network_mut().randomize(5, 0.3);
            let report = crate::ar::ar_grad_check(&ar, &batch, 1, 1e-4).map_err(|e| e.to_string())?;
            grad_entries_check(&mut t, &format!("ar attention={attention}"), &report, ar.network().num_params());
        }
        Ok(())
    })();
    t.finish("gradient", outcome)
}

/// `bpt = nll / ln 2`, `ppl = e^nll`, and the uniform-scorer values.
pub fn suite_metric_identity() -> SuiteResult {
    let mut t = Tally::new();
    let outcome = (|| -> Result<(), String> {
        for nll in [0.0, 1e-6, 0.5, 16f64.ln(), 3.1833, 6.0] {
            t.check((bpt(nll) * std::f64::consts::LN_2 - nll).abs() / nll.max(1.0), 1e-9, || format!("bpt at {nll}"));
            t.check((ppl(nll) - nll.exp()).abs() / nll.exp(), 1e-9, || format!("ppl at {nll}"));
        }
        t.check((bpc(&[0.5f64.ln(), 0.25f64.ln()]).map_err(|e| e.to_string())? - 1.5).abs(), 1e-12, || "bpc".into());
        let text = "a b c d ".repeat(200);
        let split = CorpusSplit::new(SplitName::Valid, vec![text.clone()]).map_err(|e| e.to_string())?;
        let tok = train_bpe(&[text.as_str()], 12, Alphabet::Observed).map_err(|e| e.to_string())?.tokenizer;
        let pool = WindowPool::new(&split, &tok, 8).map_err(|e| e.to_string())?;
        let report = eval_pool(&UniformScorer { vocab: 16, kind: ModelKind::Ar }, &pool, 4, 256, 1).map_err(|e| e.to_string())?;
        t.check((report.bpt - 4.0).abs(), 1e-9, || format!("uniform bpt {}", report.bpt));
        t.check((report.ppl - 16.0).abs() / 16.0, 1e-9, || format!("uniform ppl {}", report.ppl));
        Ok(())
    })();
    t.finish("metric-identity", outcome)
}

/// Transcribed reference rows obey the metric identities and reproduce the
/// published seed means.
pub fn suite_reference_table() -> SuiteResult {
    let mut t = Tally::new();
    let outcome = (|| -> Result<(), String> {
        for row in &REFERENCE_AR_ROWS {
            t.check(identity_error(row), 1e-3, || format!("{} seed {}", row.model, row.seed));
        }
        let (ar, d3pm) = reference_aggregates().map_err(|e| e.to_string())?;
        t.check((ar.mean_bpt - REFERENCE_AR_MEAN_BPT).abs(), 1e-4, || format!("AR mean {}", ar.mean_bpt));
        t.check((d3pm.mean_bpt - REFERENCE_D3PM_MEAN_BPT).abs(), 1e-4, || format!("D3PM mean {}", d3pm.mean_bpt));
        Ok(())
    })();
    t.finish("reference-table", outcome)
}

pub fn verify() -> VerifyReport {
    verify_with(&VerifyHooks::default())
}

pub fn verify_with(hooks: &VerifyHooks) -> VerifyReport {
    VerifyReport {
        suites: vec![
            suite_matrix(),
            suite_posterior(hooks.posterior),
            suite_nelbo(),
            suite_gradient(),
            suite_metric_identity(),
            suite_reference_table(),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys_comments_and_cell_overrides() {
        let text = "\
# toy run
experiment.name = toy
models = ar, d3pm
T=50   # steps
sampling.steps=25
loader.batch_size=8
seeds=1,2
seeds.d3pm=1000,2000,3000
cell.d3pm.2000.optim.lr=1000
model.attention=true
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.name, "toy");
        assert_eq!(c.models, vec![ModelKind::Ar, ModelKind::D3pm]);
        assert_eq!((c.steps_t, c.sampling_steps, c.batch_size), (50, 25, 8));
        assert!(c.attention);
        assert_eq!(c.seeds_for(ModelKind::Ar), &[1, 2]);
        assert_eq!(c.seeds_for(ModelKind::D3pm), &[1000, 2000, 3000]);
        assert_eq!(c.cell_list().len(), 5);
        assert_eq!(c.train_config(ModelKind::D3pm, 2000).lr, 1000.0);
        assert_eq!(c.train_config(ModelKind::D3pm, 1000).lr, c.lr);
        c.validate().unwrap();
    }

    #[test]
    fn transliterated_invocation_is_accepted() {
        let text = "parameterization=d3pm\\\n model.length=512\\\n sampling.steps=1000 \\\n sampling.predictor=ddpm \\\n \
                    loader.batch_size=8 \\\n loader.eval_batch_size=4 \\\n time_conditioning=True \\\n seed=1000 \\\n T=1000\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.models, vec![ModelKind::D3pm]);
        assert_eq!((c.length, c.eval_batch_size, c.seeds.clone()), (512, 4, vec![1000]));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(ExperimentConfig::parse("nonsense"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(ExperimentConfig::parse("model.size=3"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::parse("T=abc"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse("sampling.predictor=analytic"), Err(ConfigError::BadValue { .. })));
        for bad in ["seeds=1,1", "T=10\nsampling.steps=20", "sampling.steps=0", "seeds=", "cell.ar.9.optim.lr=1"] {
            let c = ExperimentConfig::parse(bad).unwrap();
            assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))), "{bad}");
        }
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["optim.lr=-1".into()]).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn verification_passes_and_is_deterministic() {
        let a = verify();
        assert!(a.passed(), "{}", a.render());
        assert_eq!(a.suites.len(), 6);
        assert_eq!(a.render(), verify().render());
    }

    fn skewed_posterior(
        xt: u32,
        x0: &CategoricalDist,
        s: &NoiseSchedule,
        i: usize,
        j: usize,
    ) -> Result<CategoricalDist, DiffusionError> {
        // normalizes the unmasking mass by 1 − ᾱ_j instead of 1 − ᾱ_i
        let m = x0.len() - 1;
        let mut p = vec![0.0; m + 1];
        if xt as usize != m {
            p[xt as usize] = 1.0;
        } else {
            let (ai, aj) = (s.alpha_bar(i), s.alpha_bar(j));
            let denom = if aj < 1.0 { 1.0 - aj } else { 1.0 - ai };
            for (k, w) in x0.probs()[..m].iter().enumerate() {
                p[k] = w * (aj - ai) / denom;
            }
            p[m] = 1.0 - p[..m].iter().sum::<f64>();
        }
        CategoricalDist::with_tolerance(p, 1.0)
    }

    #[test]
    fn mutated_posterior_fails_only_its_suite() {
        let r = verify_with(&VerifyHooks { posterior: skewed_posterior });
        assert!(!r.passed());
        let failed: Vec<&str> = r.suites.iter().filter(|s| !s.passed).map(|s| s.name).collect();
        assert_eq!(failed, vec!["posterior"]);
        assert!(r.render().contains("FAIL posterior"));
    }

    #[test]
    fn table_marks_failed_cells_and_aggregates_the_rest() {
        let ok = |seed, nll| CellResult {
            model: ModelKind::Ar,
            seed,
            outcome: Ok(EvalReport::from_nll(nll, 100, 1.0, 4, seed, ModelKind::Ar)),
        };
        let table = ComparisonTable::new(vec![
            ok(1, 1.0),
            ok(2, 2.0),
            CellResult { model: ModelKind::D3pm, seed: 1, outcome: Err("diverged".into()) },
        ]);
        let md = table.to_markdown();
        assert!(md.contains("| D3PM | 1 | FAILED |"));
        assert!(md.contains("| D3PM | mean | | | | | FAILED |"));
        let agg = table.aggregate(ModelKind::Ar).unwrap();
        assert!((agg.mean_bpt - 1.5 / std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(table.failures(), 1);
        assert_eq!(md.lines().count(), 2 + 3 + 2);
    }
}
