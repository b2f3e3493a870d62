//! Checkpoint files and the top-k checkpoint store.
//!
//! File layout, little-endian: magic `MSCK`, `u32` version, `u64` metadata
//! length, JSON metadata, every tensor's `f64` payload (modality 1 then 2,
//! tensor order as listed in the metadata), then the SHA-256 of all
//! preceding bytes.

use std::fs;
use std::path::{Path, PathBuf};

use msc_core::model::ModelSpec;
use msc_core::nn::{ParameterSet, Tensor};
use msc_core::objectives::ObjectiveSpec;
use msc_core::trainer::{CheckpointRecord, CheckpointSink, TopK};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    /// Bit patterns keep the losses exact.
    validation_loss_bits: u64,
    train_loss_bits: u64,
    validation_loss: f64,
    model_spec: ModelSpec,
    objective: ObjectiveSpec,
    tensors: [Vec<TensorMeta>; 2],
}

pub fn encode_checkpoint(r: &CheckpointRecord) -> Vec<u8> {
    let meta = Meta {
        epoch: r.epoch,
        validation_loss_bits: r.validation_loss.to_bits(),
        train_loss_bits: r.train_loss.to_bits(),
        validation_loss: r.validation_loss,
        model_spec: r.model_spec.clone(),
        objective: r.objective.clone(),
        tensors: [0, 1].map(|m| {
            r.params[m].tensors.iter().map(|t| TensorMeta { name: t.name.clone(), shape: t.shape.clone() }).collect()
        }),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &r.params {
        for t in &p.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<CheckpointRecord> {
    let integrity = |detail: &str| Error::Integrity { path: path.to_path_buf(), detail: detail.to_string() };
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing MSCK header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(integrity("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let meta_end = 16usize.checked_add(meta_len).filter(|&e| e <= body.len()).ok_or_else(|| integrity("truncated metadata"))?;
    let meta: Meta = serde_json::from_slice(&body[16..meta_end]).map_err(|e| Error::format(path, e.to_string()))?;
    let mut values = body[meta_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params: [ParameterSet; 2] = Default::default();
    for m in 0..2 {
        for tm in &meta.tensors[m] {
            let n: usize = tm.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(integrity("truncated tensor payload"));
            }
            params[m].tensors.push(Tensor { name: tm.name.clone(), shape: tm.shape.clone(), data });
        }
    }
    if values.next().is_some() || (body.len() - meta_end) % 8 != 0 {
        return Err(integrity("trailing payload bytes"));
    }
    Ok(CheckpointRecord {
        epoch: meta.epoch,
        validation_loss: f64::from_bits(meta.validation_loss_bits),
        train_loss: f64::from_bits(meta.train_loss_bits),
        params,
        model_spec: meta.model_spec,
        objective: meta.objective,
    })
}

pub fn save_checkpoint(path: &Path, r: &CheckpointRecord) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(r)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Directory of `NNN.ckpt` files holding the `k` lowest validation losses.
pub struct CheckpointStore {
    dir: PathBuf,
    top: TopK,
}

impl CheckpointStore {
    /// Opens `dir`, creating it if needed, and indexes existing checkpoints.
    pub fn open(dir: &Path, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("checkpoint_k must be at least 1".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut store = Self { dir: dir.to_path_buf(), top: TopK::new(k) };
        for (id, path) in store.files()? {
            let r = load_checkpoint(&path)?;
            if r.epoch != id {
                return Err(Error::format(&path, format!("file id {id} holds epoch {}", r.epoch)));
            }
            store.admit(r.validation_loss, id)?;
        }
        Ok(store)
    }

    pub fn path_of(&self, id: usize) -> PathBuf {
        self.dir.join(format!("{id:03}.ckpt"))
    }

    fn files(&self) -> Result<Vec<(usize, PathBuf)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            if path.extension().is_some_and(|e| e == "ckpt") {
                if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                    out.push((id, path));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn admit(&mut self, loss: f64, id: usize) -> Result<bool> {
        let (accepted, evicted) = self.top.insert(loss, id);
        if let Some(ev) = evicted {
            let p = self.path_of(ev);
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(accepted)
    }

    /// Persists `r` if it ranks among the best `k`; returns whether it did.
    pub fn save(&mut self, r: &CheckpointRecord) -> Result<bool> {
        if !self.top.would_accept(r.validation_loss) {
            return Ok(false);
        }
        if self.top.ids().contains(&r.epoch) {
            return Err(Error::Config(format!("checkpoint {} already stored", r.epoch)));
        }
        save_checkpoint(&self.path_of(r.epoch), r)?;
        self.admit(r.validation_loss, r.epoch)
    }

    pub fn load(&self, id: usize) -> Result<CheckpointRecord> {
        if !self.top.ids().contains(&id) {
            return Err(Error::Missing { what: "checkpoint", path: self.path_of(id), producer: "pretrain" });
        }
        load_checkpoint(&self.path_of(id))
    }

    /// Stored ids, ascending by validation loss.
    pub fn ids(&self) -> Vec<usize> {
        self.top.ids()
    }

    pub fn is_empty(&self) -> bool {
        self.top.entries.is_empty()
    }
}

impl CheckpointSink for CheckpointStore {
    fn offer(&mut self, record: &CheckpointRecord) -> msc_core::Result<()> {
        self.save(record).map(|_| ()).map_err(|e| msc_core::Error::Data(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use msc_core::model::{EncoderSpec, GlobalHeadSpec, Model};
    use msc_core::objectives::ObjectiveSpec;

    fn record(epoch: usize, loss: f64) -> CheckpointRecord {
        let obj = ObjectiveSpec::parse("RR-XX").unwrap();
        let enc = EncoderSpec { input_side: 8, channels: vec![2, 3, 4], local_layer: 2, repr_dim: 4, leaky_slope: 0.2 };
        let spec = ModelSpec::for_objective(&enc, &obj, GlobalHeadSpec::Linear, 5, None);
        let params = [Model::build(&spec, epoch as u64).unwrap().params, Model::build(&spec, 99 + epoch as u64).unwrap().params];
        CheckpointRecord { epoch, validation_loss: loss, train_loss: loss * 1.5 + 1e-17, params, model_spec: spec, objective: obj }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let r = record(7, 0.1 + 0.2);
        let back = decode_checkpoint(&encode_checkpoint(&r), Path::new("x")).unwrap();
        assert_eq!(back, r);
        let bits = |r: &CheckpointRecord| -> Vec<u64> {
            r.params.iter().flat_map(|p| p.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits()))).collect()
        };
        assert_eq!(bits(&back), bits(&r));
        assert_eq!(back.validation_loss.to_bits(), r.validation_loss.to_bits());
    }

    #[test]
    fn flipped_bit_is_rejected() {
        let mut b = encode_checkpoint(&record(1, 0.5));
        for pos in [5, 40, b.len() / 2, b.len() - 40, b.len() - 1] {
            b[pos] ^= 0x10;
            let err = decode_checkpoint(&b, Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Integrity { .. } | Error::Format { .. }), "{err}");
            b[pos] ^= 0x10;
        }
        assert!(decode_checkpoint(&b, Path::new("x")).is_ok());
    }
}
