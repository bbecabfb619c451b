//! Corpus loading and deterministic batching.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};
use crate::tokenizer::{Tokenizer, TokenizerError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing {split} split: {path}")]
    MissingSplit { split: SplitName, path: PathBuf },
    #[error("{0} is not valid UTF-8")]
    EncodingError(PathBuf),
    #[error("{0} split contains no documents")]
    EmptyCorpus(SplitName),
    #[error("split yields {windows} windows of length {length}, need at least {needed}")]
    TooShort { windows: usize, length: usize, needed: usize },
    #[error("invalid batch shape: batch size {batch_size}, length {length}")]
    BadShape { batch_size: usize, length: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// On-disk corpus layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    /// `<dir>/{train,valid,test}.txt`, documents separated by blank lines.
    #[default]
    Plain,
    /// WikiText `.tokens` files. `path` is either a directory holding
    /// `wiki.{split}.tokens` or a stem such that `<stem>.{split}.tokens` exist.
    /// A new document starts at every top-level ` = Title = ` heading.
    WikitextNonraw,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(CorpusFormat::Plain),
            "wikitext-nonraw" => Ok(CorpusFormat::WikitextNonraw),
            other => Err(format!("unknown corpus format '{other}' (expected plain|wikitext-nonraw)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub documents: Vec<String>,
}

impl CorpusSplit {
    pub fn new(name: SplitName, documents: Vec<String>) -> Result<Self, CorpusError> {
        let documents: Vec<String> = documents
            .into_iter()
            .map(|d| d.trim().to_string())
            .filter(|d| !d.is_empty())
            .collect();
        if documents.is_empty() {
            return Err(CorpusError::EmptyCorpus(name));
        }
        Ok(Self { name, documents })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: CorpusSplit,
    pub valid: CorpusSplit,
    pub test: CorpusSplit,
}

impl Corpus {
    pub fn split(&self, name: SplitName) -> &CorpusSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

fn split_path(path: &Path, format: CorpusFormat, split: SplitName) -> PathBuf {
    match format {
        CorpusFormat::Plain => path.join(format!("{split}.txt")),
        CorpusFormat::WikitextNonraw if path.is_dir() => path.join(format!("wiki.{split}.tokens")),
        CorpusFormat::WikitextNonraw => {
            let mut stem = path.as_os_str().to_owned();
            stem.push(format!(".{split}.tokens"));
            PathBuf::from(stem)
        }
    }
}

fn is_top_heading(line: &str) -> bool {
    let t = line.trim();
    t.len() > 2 && t.starts_with("= ") && t.ends_with(" =") && !t.starts_with("= =")
}

fn split_documents(text: &str, format: CorpusFormat) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut flush = |current: &mut Vec<&str>| {
        if !current.is_empty() {
            docs.push(current.join("\n"));
            current.clear();
        }
    };
    for line in text.lines() {
        match format {
            CorpusFormat::Plain if line.trim().is_empty() => flush(&mut current),
            CorpusFormat::Plain => current.push(line.trim_end()),
            CorpusFormat::WikitextNonraw => {
                if is_top_heading(line) {
                    flush(&mut current);
                }
                if !line.trim().is_empty() {
                    current.push(line.trim());
                }
            }
        }
    }
    flush(&mut current);
    docs
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let mut splits = Vec::with_capacity(3);
    for name in SplitName::ALL {
        let file = split_path(path, format, name);
        if !file.is_file() {
            return Err(CorpusError::MissingSplit { split: name, path: file });
        }
        let bytes = std::fs::read(&file).map_err(|source| CorpusError::Io { path: file.clone(), source })?;
        let text = String::from_utf8(bytes).map_err(|_| CorpusError::EncodingError(file.clone()))?;
        splits.push(CorpusSplit::new(name, split_documents(&text, format))?);
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Corpus { train, valid, test })
}

/// A `rows × cols` grid of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Batch {
    rows: usize,
    cols: usize,
    ids: Vec<u32>,
}

impl Batch {
    pub fn new(rows: usize, cols: usize, ids: Vec<u32>) -> Self {
        assert_eq!(rows * cols, ids.len(), "batch shape does not match id count");
        Self { rows, cols, ids }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// All length-`L` windows of a tokenized split, in corpus order.
///
/// Tokenization happens once; each call to [`WindowPool::epoch`] reshuffles
/// window order under its own seed.
#[derive(Debug, Clone)]
pub struct WindowPool {
    length: usize,
    windows: Vec<Vec<u32>>,
    total_tokens: usize,
}

impl WindowPool {
    pub fn new(split: &CorpusSplit, tok: &Tokenizer, length: usize) -> Result<Self, CorpusError> {
        if length < 2 {
            return Err(CorpusError::BadShape { batch_size: 1, length });
        }
        let eot = tok.specials().endoftext;
        let mut stream = Vec::new();
        for doc in &split.documents {
            stream.extend(tok.encode(doc)?);
            stream.push(eot);
        }
        let windows: Vec<Vec<u32>> = stream.chunks_exact(length).map(<[u32]>::to_vec).collect();
        if windows.is_empty() {
            return Err(CorpusError::TooShort { windows: 0, length, needed: 1 });
        }
        Ok(Self { length, windows, total_tokens: stream.len() })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    /// Largest token id in any window.
    pub fn max_id(&self) -> Option<u32> {
        self.windows.iter().flatten().copied().max()
    }

    /// Batches of `batch_size` windows in a seeded order. The trailing partial
    /// batch is dropped.
    pub fn epoch(&self, batch_size: usize, seed: u64) -> Result<BatchStream<'_>, CorpusError> {
        if batch_size == 0 {
            return Err(CorpusError::BadShape { batch_size, length: self.length });
        }
        if self.windows.len() < batch_size {
            return Err(CorpusError::TooShort {
                windows: self.windows.len(),
                length: self.length,
                needed: batch_size,
            });
        }
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, 0));
        Ok(BatchStream { pool: self, order, batch_size, next: 0 })
    }

    /// Batches per epoch at this batch size.
    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.windows.len() / batch_size.max(1)
    }
}

/// Single-consumer iterator over the batches of one epoch.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    pool: &'a WindowPool,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl BatchStream<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let start = self.next * self.batch_size;
        if start + self.batch_size > self.order.len() {
            return None;
        }
        self.next += 1;
        let ids = self.order[start..start + self.batch_size]
            .iter()
            .flat_map(|&w| self.pool.windows[w].iter().copied())
            .collect();
        Some(Batch::new(self.batch_size, self.pool.length, ids))
    }
}

/// Tokenize a split and collect its batches for one seeded epoch.
pub fn make_batches(
    split: &CorpusSplit,
    tok: &Tokenizer,
    batch_size: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<Batch>, CorpusError> {
    if batch_size == 0 || length < 2 {
        return Err(CorpusError::BadShape { batch_size, length });
    }
    let pool = WindowPool::new(split, tok, length)?;
    Ok(pool.epoch(batch_size, seed)?.collect())
}
