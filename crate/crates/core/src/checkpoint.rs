//! Model checkpoints.
//!
//! Layout: the 8 bytes `D3PMCKPT`, a little-endian `u64` header length, a
//! JSON header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ar::ArModel;
use crate::denoiser::NeuralDenoiser;
use crate::diffusion::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::metrics::ModelKind;
use crate::nn::{NetConfig, Network, TensorSpec};
use crate::tokenizer::Specials;

pub const MAGIC: &[u8; 8] = b"D3PMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: ModelKind, found: ModelKind },
    #[error("only named schedules can be saved")]
    CustomSchedule,
    #[error("vocabulary fingerprint mismatch: checkpoint {checkpoint}, tokenizer {tokenizer}")]
    VocabMismatch { checkpoint: String, tokenizer: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: ModelKind,
    /// Number of completed updates.
    pub step: usize,
    pub config: NetConfig,
    pub shapes: Vec<TensorSpec>,
    pub vocab_hash: String,
    pub specials: Specials,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub schedule_kind: Option<ScheduleKind>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none", default)]
    pub steps_t: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
}

/// A checkpoint restored to a usable model.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Ar(ArModel),
    D3pm { model: NeuralDenoiser, schedule: NoiseSchedule },
}

impl Checkpoint {
    fn from_network(net: &Network, kind: ModelKind, step: usize, vocab_hash: &str, specials: Specials) -> Self {
        Self {
            header: CheckpointHeader {
                version: VERSION,
                kind,
                step,
                config: net.config().clone(),
                shapes: net.tensor_specs(),
                vocab_hash: vocab_hash.to_string(),
                specials,
                schedule_kind: None,
                steps_t: None,
            },
            params: net.params().to_vec(),
        }
    }

    pub fn for_denoiser(
        model: &NeuralDenoiser,
        schedule: &NoiseSchedule,
        step: usize,
        vocab_hash: &str,
        specials: Specials,
    ) -> Result<Self, CheckpointError> {
        let kind = schedule.kind().ok_or(CheckpointError::CustomSchedule)?;
        let mut c = Self::from_network(model.network(), ModelKind::D3pm, step, vocab_hash, specials);
        c.header.schedule_kind = Some(kind);
        c.header.steps_t = Some(schedule.steps());
        Ok(c)
    }

    pub fn for_ar(model: &ArModel, step: usize, vocab_hash: &str) -> Self {
        use crate::ar::NextTokenModel;
        Self::from_network(model.network(), ModelKind::Ar, step, vocab_hash, model.specials())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| CheckpointError::Malformed("header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.version != VERSION {
            return Err(CheckpointError::BadVersion(header.version));
        }
        let data = &bytes[16 + len..];
        let expected: usize = header.shapes.iter().map(TensorSpec::numel).sum();
        if data.len() != 4 * expected {
            return Err(CheckpointError::Malformed(format!("{} parameter bytes, expected {}", data.len(), 4 * expected)));
        }
        let params = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    fn network(&self) -> Result<Network, CheckpointError> {
        let net = Network::from_parts(self.header.config.clone(), self.params.clone())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if net.tensor_specs() != self.header.shapes {
            return Err(CheckpointError::Malformed("declared shapes disagree with the config".into()));
        }
        Ok(net)
    }

    /// Fails if the checkpoint was trained with a different vocabulary.
    pub fn check_vocab(&self, fingerprint: &str) -> Result<(), CheckpointError> {
        if self.header.vocab_hash != fingerprint {
            return Err(CheckpointError::VocabMismatch {
                checkpoint: self.header.vocab_hash.clone(),
                tokenizer: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<LoadedModel, CheckpointError> {
        let net = self.network()?;
        match self.header.kind {
            ModelKind::Ar => ArModel::from_network(net, self.header.specials)
                .map(LoadedModel::Ar)
                .map_err(|e| CheckpointError::Malformed(e.to_string())),
            ModelKind::D3pm => {
                let model = NeuralDenoiser::from_network(net).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
                let (kind, t) = self
                    .header
                    .schedule_kind
                    .zip(self.header.steps_t)
                    .ok_or_else(|| CheckpointError::Malformed("d3pm checkpoint without a schedule".into()))?;
                let schedule = build_schedule(kind, t).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
                Ok(LoadedModel::D3pm { model, schedule })
            }
        }
    }

    pub fn into_ar(self) -> Result<ArModel, CheckpointError> {
        match self.into_model()? {
            LoadedModel::Ar(m) => Ok(m),
            LoadedModel::D3pm { .. } => Err(CheckpointError::WrongKind { expected: ModelKind::Ar, found: ModelKind::D3pm }),
        }
    }

    pub fn into_denoiser(self) -> Result<(NeuralDenoiser, NoiseSchedule), CheckpointError> {
        match self.into_model()? {
            LoadedModel::D3pm { model, schedule } => Ok((model, schedule)),
            LoadedModel::Ar(_) => Err(CheckpointError::WrongKind { expected: ModelKind::D3pm, found: ModelKind::Ar }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::{ArArch, NextTokenModel};
    use crate::denoiser::{Denoiser, DenoiserArch, DenoiserInput};

    const SPECIALS: Specials = Specials { sos: 3, eos: 4, endoftext: 5, mask: 6 };

    #[test]
    fn denoiser_round_trip_is_bit_exact() {
        let mut model = NeuralDenoiser::new(6, 5, &DenoiserArch { attention: true, ..DenoiserArch::default() }, 4);
        model.network_mut().randomize(2, 0.3);
        let schedule = build_schedule(ScheduleKind::Linear, 20).unwrap();
        let bytes = Checkpoint::for_denoiser(&model, &schedule, 17, "abc", SPECIALS).unwrap().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header.step, 17);
        back.check_vocab("abc").unwrap();
        assert!(back.check_vocab("xyz").is_err());
        let (loaded, s) = back.into_denoiser().unwrap();
        assert_eq!(s, schedule);
        let input = DenoiserInput::new(1, 5, vec![6, 0, 6, 2, 6], 0.4);
        assert_eq!(model.denoise(&input).unwrap(), loaded.denoise(&input).unwrap());
        assert!(loaded.network().params().iter().zip(model.network().params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ar_round_trip_and_kind_checks() {
        let mut model = ArModel::new(6, SPECIALS, &ArArch::default(), 1);
        model.network_mut().randomize(5, 0.2);
        let c = Checkpoint::for_ar(&model, 3, "h");
        let bytes = c.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap().into_ar().unwrap();
        assert_eq!(loaded, model);
        assert_eq!(model.next_token_dist(&[3, 1]).unwrap(), loaded.next_token_dist(&[3, 1]).unwrap());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap().into_denoiser(),
            Err(CheckpointError::WrongKind { .. })
        ));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = ArModel::new(6, SPECIALS, &ArArch::default(), 1);
        let bytes = Checkpoint::for_ar(&model, 0, "h").to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT........"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(CheckpointError::Malformed(_))));
        let schedule = NoiseSchedule::from_betas(vec![0.5, 1.0]).unwrap();
        let d = NeuralDenoiser::new(6, 4, &DenoiserArch::default(), 1);
        assert!(matches!(Checkpoint::for_denoiser(&d, &schedule, 0, "h", SPECIALS), Err(CheckpointError::CustomSchedule)));
    }
}
