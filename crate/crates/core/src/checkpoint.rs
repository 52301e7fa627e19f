//! Binary training checkpoints.
//!
//! Layout, all integers little-endian:
//! `"PVQC"`, `u32` version, `u64` length + JSON `{"model", "train"}`,
//! `u64` step, parameter table, buffer table, `u64` Adam step, first-moment
//! table, second-moment table, `u64` RNG seed, `u128` RNG word position.
//! A table is a `u64` count followed by entries of
//! `u32` name length, name bytes, `u32` rank, `u64` dims, `f64` data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PitVqaNet};
use crate::params::ParamStore;
use crate::rng::{RngState, RngStream};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"PVQC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlob {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            model: t.net.config().clone(),
            train: t.cfg.clone(),
            step: t.step,
            params: t.net.params().clone(),
            buffers: t.net.buffers().clone(),
            adam: t.adam.clone(),
            rng: t.rng.state(),
        }
    }

    /// Rebuilds the trainer; the loss log starts empty.
    pub fn into_trainer(self) -> Result<Trainer> {
        self.train.validate()?;
        let net = PitVqaNet::from_parts(self.model, self.params, self.buffers)?;
        Ok(Trainer {
            net,
            adam: self.adam,
            cfg: self.train,
            step: self.step,
            rng: RngStream::from_state(self.rng),
            log: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let blob = serde_json::to_vec(&ConfigBlob {
            model: self.model.clone(),
            train: self.train.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        out.extend_from_slice(&self.step.to_le_bytes());
        write_table(&mut out, &self.params);
        write_table(&mut out, &self.buffers);
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        write_table(&mut out, &self.adam.m);
        write_table(&mut out, &self.adam.v);
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        Ok(out)
    }

    /// Parses bytes read from `path`; the path only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let blob: ConfigBlob = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format(format!("config blob: {e}")))?;
        let step = r.u64()?;
        let params = r.table()?;
        let buffers = r.table()?;
        let t = r.u64()?;
        let m = r.table()?;
        let v = r.table()?;
        let seed = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: blob.model,
            train: blob.train,
            step,
            params,
            buffers,
            adam: AdamState { t, m, v },
            rng: RngState { seed, word_pos },
        })
    }
}

fn write_table(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::io(
                self.path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated checkpoint"),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn table(&mut self) -> Result<ParamStore> {
        let n = self.u64()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("shape overflow for {name}")))?;
            let raw = self.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Format("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Loads a checkpoint and requires its model configuration to equal
/// `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if &ckpt.model != expected {
        let a = serde_json::to_value(&ckpt.model).unwrap_or_default();
        let b = serde_json::to_value(expected).unwrap_or_default();
        let diff: Vec<String> = match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(v))
                .map(|(k, v)| format!("{k}: checkpoint {v}, requested {}", b[k]))
                .collect(),
            _ => vec![],
        };
        return Err(Error::ConfigMismatch(diff.join("; ")));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_img_layers: 1,
            n_text_layers: 1,
            n_decoder_layers: 1,
            image_size: 8,
            patch_size: 4,
            max_question_len: 4,
            vocab_size: 10,
            n_classes: 5,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let t = Trainer::new(PitVqaNet::new(tiny()).unwrap(), TrainConfig::default()).unwrap();
        let c = Checkpoint::from_trainer(&t);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Trainer::new(PitVqaNet::new(tiny()).unwrap(), TrainConfig::default()).unwrap();
        let bytes = Checkpoint::from_trainer(&t).to_bytes().unwrap();
        let p = Path::new("c.bin");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(Error::Format(_))
        ));
        let cut = &bytes[..bytes.len() - 5];
        match Checkpoint::from_bytes(cut, p) {
            Err(Error::Io { source, .. }) => {
                assert_eq!(source.kind(), std::io::ErrorKind::UnexpectedEof)
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
