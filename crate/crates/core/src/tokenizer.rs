//! Byte-level byte-pair-encoding tokenizer.
//!
//! Text is first split into chunks (a word with its leading space, a run of
//! digits, a run of punctuation, or a run of whitespace), each chunk is mapped
//! to byte symbols, and merges are applied inside chunks only. Byte symbols are
//! rendered with the usual printable byte alphabet, so a leading space shows up
//! as `Ġ` in token strings.
//!
//! Id layout: base byte symbols first, then the special tokens, then merged
//! tokens in merge order. The mask state is not a token: its id is one past the
//! last token id.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SOS_TOKEN: &str = "<|sos|>";
pub const EOS_TOKEN: &str = "<|eos|>";
pub const ENDOFTEXT_TOKEN: &str = "<|endoftext|>";

const VOCAB_FILE_VERSION: u32 = 1;
const NUM_SPECIALS: usize = 3;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {target} must exceed {minimum}")]
    VocabTooSmall { target: usize, minimum: usize },
    #[error("id {0} is the mask state and cannot be decoded")]
    MaskInOutput(u32),
    #[error("id {id} is outside the vocabulary (mask id {mask})")]
    UnknownId { id: u32, mask: u32 },
    #[error("byte 0x{0:02x} is not in the tokenizer alphabet")]
    UnknownByte(u8),
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which bytes form the base alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alphabet {
    /// All 256 byte values. Encoding is total.
    #[default]
    Full,
    /// Only the byte values seen in the training text. Gives tiny vocabularies
    /// for synthetic corpora; encoding fails on unseen bytes.
    Observed,
}

impl std::str::FromStr for Alphabet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Alphabet::Full),
            "observed" => Ok(Alphabet::Observed),
            other => Err(format!("unknown alphabet '{other}' (expected full|observed)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub sos: u32,
    pub eos: u32,
    pub endoftext: u32,
    pub mask: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    specials: Specials,
}

impl Vocab {
    fn new(id_to_token: Vec<String>) -> Result<Self, TokenizerError> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(TokenizerError::Malformed(format!("duplicate token {tok:?}")));
            }
        }
        let find = |name: &str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or_else(|| TokenizerError::Malformed(format!("missing special token {name}")))
        };
        let specials = Specials {
            sos: find(SOS_TOKEN)?,
            eos: find(EOS_TOKEN)?,
            endoftext: find(ENDOFTEXT_TOKEN)?,
            mask: id_to_token.len() as u32,
        };
        Ok(Self { id_to_token, token_to_id, specials })
    }

    /// Number of real tokens (specials included, mask excluded).
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn mask_id(&self) -> u32 {
        self.specials.mask
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    fn is_special(&self, id: u32) -> bool {
        id == self.specials.sos || id == self.specials.eos || id == self.specials.endoftext
    }
}

/// Ordered merge rules. Rule `r` has rank `r`; lower ranks apply first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    rules: Vec<(String, String)>,
}

impl MergeTable {
    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerWarning {
    /// The corpus ran out of pairs before the target size was reached.
    CorpusTooSmall { requested: usize, achieved: usize },
}

#[derive(Debug, Clone)]
pub struct BpeOutcome {
    pub tokenizer: Tokenizer,
    pub warning: Option<TokenizerWarning>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    merges: MergeTable,
    byte_ids: [Option<u32>; 256],
    ranks: HashMap<(u32, u32), (u32, u32)>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
    specials: Specials,
    merges: Vec<(String, String)>,
}

fn byte_alphabet() -> &'static ([char; 256], HashMap<char, u8>) {
    static TABLE: OnceLock<([char; 256], HashMap<char, u8>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        let mut forward = ['\0'; 256];
        let mut shifted = 0u32;
        for b in 0..256u32 {
            let c = if printable(b) {
                b
            } else {
                shifted += 1;
                255 + shifted
            };
            forward[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        let inverse = forward.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (forward, inverse)
    })
}

fn byte_symbol(b: u8) -> char {
    byte_alphabet().0[b as usize]
}

#[derive(PartialEq, Eq, Clone, Copy)]
enum CharClass {
    Space,
    Letter,
    Digit,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Split text into merge domains. The chunks concatenate back to `text`.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let offset = |k: usize| if k < n { chars[k].0 } else { text.len() };
    let run_end = |from: usize, class: CharClass| {
        let mut k = from;
        while k < n && class_of(chars[k].1) == class {
            k += 1;
        }
        k
    };
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < n {
        let class = class_of(chars[i].1);
        if class != CharClass::Space {
            let j = run_end(i, class);
            chunks.push(&text[offset(i)..offset(j)]);
            i = j;
            continue;
        }
        let j = run_end(i, CharClass::Space);
        if j < n && chars[j - 1].1 == ' ' {
            // the final space joins the following word
            if j - 1 > i {
                chunks.push(&text[offset(i)..offset(j - 1)]);
            }
            let k = run_end(j, class_of(chars[j].1));
            chunks.push(&text[offset(j - 1)..offset(k)]);
            i = k;
        } else {
            chunks.push(&text[offset(i)..offset(j)]);
            i = j;
        }
    }
    chunks
}

/// Learn merges greedily by pair frequency until the vocabulary reaches
/// `target_vocab_size` tokens (specials included) or no pair is left.
pub fn train_bpe<S: AsRef<str>>(
    documents: &[S],
    target_vocab_size: usize,
    alphabet: Alphabet,
) -> Result<BpeOutcome, TokenizerError> {
    let mut words: BTreeMap<&str, u64> = BTreeMap::new();
    let mut seen = [false; 256];
    for doc in documents {
        for chunk in pretokenize(doc.as_ref()) {
            *words.entry(chunk).or_default() += 1;
            for &b in chunk.as_bytes() {
                seen[b as usize] = true;
            }
        }
    }
    let base: Vec<u8> = match alphabet {
        Alphabet::Full => (0..=255u8).collect(),
        Alphabet::Observed => (0..=255u8).filter(|&b| seen[b as usize]).collect(),
    };
    let minimum = base.len() + NUM_SPECIALS;
    if target_vocab_size <= minimum {
        return Err(TokenizerError::VocabTooSmall { target: target_vocab_size, minimum });
    }

    let mut tokens: Vec<String> = base.iter().map(|&b| byte_symbol(b).to_string()).collect();
    tokens.extend([SOS_TOKEN, EOS_TOKEN, ENDOFTEXT_TOKEN].map(String::from));
    let mut lookup: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let mut byte_ids = [None; 256];
    for (id, &b) in base.iter().enumerate() {
        byte_ids[b as usize] = Some(id as u32);
    }

    let mut corpus: Vec<(Vec<u32>, u64)> = words
        .iter()
        .map(|(w, &count)| {
            let symbols = w.bytes().map(|b| byte_ids[b as usize].expect("observed byte")).collect();
            (symbols, count)
        })
        .collect();

    let mut rules = Vec::new();
    while tokens.len() < target_vocab_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (symbols, count) in &corpus {
            for pair in symbols.windows(2) {
                *pair_counts.entry((pair[0], pair[1])).or_default() += count;
            }
        }
        // highest count, ties broken by the smaller pair of ids
        let Some((&best, _)) = pair_counts
            .iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let merged = format!("{}{}", tokens[best.0 as usize], tokens[best.1 as usize]);
        let merged_id = match lookup.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                tokens.push(merged.clone());
                lookup.insert(merged, id);
                id
            }
        };
        rules.push((tokens[best.0 as usize].clone(), tokens[best.1 as usize].clone()));
        for (symbols, _) in &mut corpus {
            apply_merge(symbols, best, merged_id);
        }
    }

    let achieved = tokens.len();
    let warning = (achieved < target_vocab_size)
        .then_some(TokenizerWarning::CorpusTooSmall { requested: target_vocab_size, achieved });
    let tokenizer = Tokenizer::from_parts(tokens, rules)?;
    Ok(BpeOutcome { tokenizer, warning })
}

fn apply_merge(symbols: &mut Vec<u32>, pair: (u32, u32), merged: u32) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

impl Tokenizer {
    fn from_parts(tokens: Vec<String>, rules: Vec<(String, String)>) -> Result<Self, TokenizerError> {
        let vocab = Vocab::new(tokens)?;
        let (_, inverse) = byte_alphabet();
        let mut byte_ids = [None; 256];
        for (id, tok) in vocab.tokens().iter().enumerate() {
            let mut chars = tok.chars();
            if let (Some(c), None) = (chars.next(), chars.next()) {
                if let Some(&b) = inverse.get(&c) {
                    byte_ids[b as usize] = Some(id as u32);
                }
            }
        }
        let mut ranks = HashMap::with_capacity(rules.len());
        for (rank, (left, right)) in rules.iter().enumerate() {
            let l = vocab.id(left);
            let r = vocab.id(right);
            let merged = vocab.id(&format!("{left}{right}"));
            match (l, r, merged) {
                (Some(l), Some(r), Some(m)) => {
                    ranks.entry((l, r)).or_insert((rank as u32, m));
                }
                _ => {
                    return Err(TokenizerError::Malformed(format!(
                        "merge rule {rank} ({left:?}, {right:?}) references unknown tokens"
                    )))
                }
            }
        }
        Ok(Self { vocab, merges: MergeTable { rules }, byte_ids, ranks })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn specials(&self) -> Specials {
        self.vocab.specials()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut ids = Vec::with_capacity(text.len() / 3);
        let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
        for chunk in pretokenize(text) {
            if let Some(hit) = cache.get(chunk) {
                ids.extend_from_slice(hit);
                continue;
            }
            let encoded = self.encode_chunk(chunk)?;
            ids.extend_from_slice(&encoded);
            cache.insert(chunk, encoded);
        }
        Ok(ids)
    }

    fn encode_chunk(&self, chunk: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut symbols = chunk
            .bytes()
            .map(|b| self.byte_ids[b as usize].ok_or(TokenizerError::UnknownByte(b)))
            .collect::<Result<Vec<_>, _>>()?;
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, merged)| (rank, (w[0], w[1]), merged)))
                .min_by_key(|&(rank, _, _)| rank);
            match best {
                Some((_, pair, merged)) => apply_merge(&mut symbols, pair, merged),
                None => return Ok(symbols),
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let (_, inverse) = byte_alphabet();
        let mask = self.vocab.mask_id();
        let mut bytes = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            if id == mask {
                return Err(TokenizerError::MaskInOutput(id));
            }
            let tok = self.vocab.token(id).ok_or(TokenizerError::UnknownId { id, mask })?;
            if self.vocab.is_special(id) {
                bytes.extend_from_slice(tok.as_bytes());
            } else {
                bytes.extend(tok.chars().map(|c| inverse[&c]));
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn to_json(&self) -> Result<String, TokenizerError> {
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            tokens: self.vocab.tokens().to_vec(),
            specials: self.vocab.specials(),
            merges: self.merges.rules.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(TokenizerError::Malformed(format!("unsupported version {}", file.version)));
        }
        let tok = Self::from_parts(file.tokens, file.merges)?;
        if tok.specials() != file.specials {
            return Err(TokenizerError::Malformed("specials block disagrees with token list".into()));
        }
        Ok(tok)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the vocab.json serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = self.to_json().expect("vocab serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
