//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then the parameters, first moments and second moments as
//! little-endian `f64`, each in layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::io::write_atomic;
use crate::model::{ModelConfig, ParameterSet};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 8] = b"XT2TCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    pub vocab_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase: Phase,
    model: ModelConfig,
    optimizer: OptimizerConfig,
    step: u64,
    vocab_fingerprint: String,
    tensors: Vec<TensorInfo>,
}

impl Checkpoint {
    /// Fresh parameters from `seed` with zeroed optimizer moments.
    pub fn init(
        model: &ModelConfig,
        optimizer: OptimizerConfig,
        vocab: &Vocabulary,
        seed: u64,
        phase: Phase,
    ) -> Result<Self> {
        if model.vocab_size != vocab.len() {
            bail!(
                VocabMismatch,
                "model vocab_size {} but vocabulary has {} entries",
                model.vocab_size,
                vocab.len()
            );
        }
        let params = ParameterSet::init(model, seed)?;
        let optimizer = OptimizerState::new(optimizer, &params)?;
        Ok(Self {
            phase,
            params,
            optimizer,
            vocab_fingerprint: vocab.fingerprint(),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let fp = vocab.fingerprint();
        if fp != self.vocab_fingerprint {
            bail!(
                VocabMismatch,
                "checkpoint was trained with vocabulary {} but {} was supplied",
                &self.vocab_fingerprint[..12.min(self.vocab_fingerprint.len())],
                &fp[..12]
            );
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = self.params.layout();
        let header = Header {
            phase: self.phase,
            model: self.params.config().clone(),
            optimizer: self.optimizer.config.clone(),
            step: self.optimizer.step,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            tensors: layout
                .entries
                .iter()
                .map(|e| TensorInfo {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let n = self.params.len();
        let mut out = Vec::with_capacity(20 + json.len() + 24 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for set in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            for x in set.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            bail!(Format, "not a checkpoint (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body_start]).map_err(|e| Error::Format(e.to_string()))?;
        let params = ParameterSet::zeros(&header.model)?;
        for (e, t) in params.layout().entries.iter().zip(&header.tensors) {
            if e.name != t.name || e.shape != t.shape {
                bail!(Format, "tensor table mismatch at {} ({:?} vs {:?})", t.name, t.shape, e.shape);
            }
        }
        if params.layout().entries.len() != header.tensors.len() {
            bail!(Format, "tensor table has {} entries", header.tensors.len());
        }
        let n = params.len();
        let body = &bytes[body_start..];
        if body.len() != 3 * 8 * n {
            bail!(Format, "checkpoint body has {} bytes, expected {}", body.len(), 24 * n);
        }
        let read = |k: usize| -> Vec<f64> {
            body[k * 8 * n..(k + 1) * 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let params = ParameterSet::from_data(&header.model, read(0))?;
        let m = ParameterSet::from_data(&header.model, read(1))?;
        let v = ParameterSet::from_data(&header.model, read(2))?;
        Ok(Self {
            phase: header.phase,
            params,
            optimizer: OptimizerState {
                config: header.optimizer,
                m,
                v,
                step: header.step,
            },
            vocab_fingerprint: header.vocab_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::build(["a b c d"], 40, 4).unwrap();
        let cfg = ModelConfig::tiny(vocab.len());
        let mut c = Checkpoint::init(&cfg, OptimizerConfig::desk(20), &vocab, 5, Phase::Pretrain).unwrap();
        c.optimizer.step = 7;
        c.optimizer.m.as_mut_slice()[3] = -0.25;
        c.optimizer.v.as_mut_slice()[9] = 1e-300;
        c
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn vocab_check() {
        let c = sample();
        let other = Vocabulary::build(["x y"], 40, 4).unwrap();
        assert!(matches!(c.check_vocab(&other), Err(Error::VocabMismatch(_))));
        let same = Vocabulary::build(["a b c d"], 40, 4).unwrap();
        c.check_vocab(&same).unwrap();
    }
}
