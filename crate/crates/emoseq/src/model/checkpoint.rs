//! Model checkpoints: a key=value config block followed by named tensor
//! records, plus a human-readable sidecar manifest for audit.
//!
//! Layout (integers little-endian):
//! magic `EMCP` | version `u16` | config_len `u32` | config utf-8
//! (key=value lines) | entry_count `u32` | entries. Each entry is
//! name_len `u16` | name | trainable `u8` | one `EMSQ` tensor record.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::cache::{self, CacheError, TensorRecord};

use super::{EmotionModel, HeadKind, ModelConfig};

const MAGIC: &[u8; 4] = b"EMCP";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor record error: {0}")]
    Record(#[from] CacheError),
    #[error("checkpoint does not match model: {0}")]
    Incompatible(String),
}

pub fn save_checkpoint(path: &Path, model: &EmotionModel) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let cfg_text: String = model
        .config()
        .to_kv()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    w.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    w.write_all(cfg_text.as_bytes())?;

    let store = model.store();
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, entry) in store.entries() {
        w.write_all(&(entry.name.len() as u16).to_le_bytes())?;
        w.write_all(entry.name.as_bytes())?;
        w.write_all(&[entry.trainable as u8])?;
        let record = TensorRecord::new(
            entry.shape.clone(),
            entry.values.iter().map(|&v| v as f32).collect(),
        );
        cache::write_record(&mut w, &record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EmotionModel, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Malformed(format!("unsupported version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| CheckpointError::Malformed("config block is not utf-8".into()))?;

    let mut cfg = ModelConfig::canonical(HeadKind::Lstm, 0);
    for line in cfg_text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("bad config line {line:?}")))?;
        cfg.apply_kv(key.trim(), value.trim())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    let mut model = EmotionModel::new(cfg)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let n_entries = read_u32(&mut r)? as usize;
    if n_entries != model.store().len() {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint has {n_entries} tensors, model expects {}",
            model.store().len()
        )));
    }
    for _ in 0..n_entries {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let record = cache::read_record(&mut r)?;
        let id = model
            .store()
            .find(&name)
            .ok_or_else(|| CheckpointError::Incompatible(format!("unexpected tensor {name:?}")))?;
        if model.store().shape(id) != record.dims.as_slice() {
            return Err(CheckpointError::Incompatible(format!(
                "tensor {name:?} has shape {:?}, model expects {:?}",
                record.dims,
                model.store().shape(id)
            )));
        }
        let values = model.store_mut().values_mut(id);
        for (slot, &v) in values.iter_mut().zip(&record.data) {
            *slot = v as f64;
        }
    }
    Ok(model)
}

/// Human-readable architecture echo written next to each checkpoint.
pub fn write_sidecar_manifest(path: &Path, model: &EmotionModel) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "emoseq model manifest")?;
    for (k, v) in model.config().to_kv() {
        writeln!(w, "{k} = {v}")?;
    }
    writeln!(w, "trainable_parameters = {}", model.count_parameters())?;
    writeln!(w)?;
    writeln!(w, "{:<24} {:>12} {:>10}  trainable", "tensor", "shape", "numel")?;
    for (_, entry) in model.store().entries() {
        let shape = entry.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        writeln!(w, "{:<24} {:>12} {:>10}  {}", entry.name, shape, entry.values.len(), entry.trainable)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::heads::HeadKind;

    fn small_model(head: HeadKind) -> EmotionModel {
        let mut cfg = ModelConfig::canonical(head, 5);
        cfg.backbone.filters = 4;
        cfg.backbone.embed_dim = 8;
        cfg.heads = crate::model::HeadConfig {
            recurrent_hidden: 8,
            d_model: 8,
            ffn_hidden: 8,
            attn_heads: 4,
            layers: 1,
        };
        cfg.fc1_dim = 8;
        cfg.fc2_dim = 8;
        EmotionModel::new(cfg).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_restores_config_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(HeadKind::Gru);
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.head_kind(), HeadKind::Gru);
        assert_eq!(loaded.count_parameters(), model.count_parameters());
        // Values match to f32 precision.
        for ((_, a), (_, b)) in model.store().entries().zip(loaded.store().entries()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= (x.abs() * 1e-7 + 1e-9), "{}: {x} vs {y}", a.name);
            }
        }
    }

    #[test]
    fn loaded_model_predicts_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(HeadKind::MaxpoolTime);
        save_checkpoint(&path, &model).unwrap();
        let mut a = load_checkpoint(&path).unwrap();
        let mut b = load_checkpoint(&path).unwrap();
        let mut tape_a = crate::autograd::Tape::new_inference();
        let mut tape_b = crate::autograd::Tape::new_inference();
        let audio: Vec<f64> = (0..2 * 8 * 8).map(|i| (i as f64 * 0.11).sin()).collect();
        let video: Vec<f64> = (0..3 * 8 * 8).map(|i| (i as f64 * 0.07).cos()).collect();
        let aa = tape_a.leaf(vec![2, 8, 8, 1], audio.clone()).unwrap();
        let va = tape_a.leaf(vec![3, 8, 8, 1], video.clone()).unwrap();
        let ab = tape_b.leaf(vec![2, 8, 8, 1], audio).unwrap();
        let vb = tape_b.leaf(vec![3, 8, 8, 1], video).unwrap();
        let la = a.forward(&mut tape_a, aa, va, false).unwrap();
        let lb = b.forward(&mut tape_b, ab, vb, false).unwrap();
        assert_eq!(tape_a.values(la), tape_b.values(lb));
    }

    #[test]
    fn sidecar_manifest_lists_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.manifest.txt");
        let model = small_model(HeadKind::Lstm);
        write_sidecar_manifest(&path, &model).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("head = lstm"));
        assert!(text.contains("audio.conv0.w"));
        assert!(text.contains("trainable_parameters"));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(HeadKind::Gru);
        save_checkpoint(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
