//! Checkpoints: a JSON manifest plus one flat little-endian parameter blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::Vocabulary;
use crate::error::{QrnError, Result};
use crate::model::{ModelConfig, QrnModel};
use crate::param::ParamKind;
use crate::tensor::{Precision, Scalar, Tensor};
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pinned_cols: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub precision: Precision,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of the training data.
    pub fingerprint: String,
    #[serde(default)]
    pub decoder_trained: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub model: QrnModel<F>,
    pub vocab: Vocabulary,
    pub train_config: TrainConfig,
    pub fingerprint: String,
}

/// Hex SHA-256 over the given byte strings, each length-prefixed.
pub fn fingerprint<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn save<F: Scalar>(dir: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| QrnError::io(dir, e))?;
    let mut blob = Vec::with_capacity(ckpt.model.store.numel() * F::PRECISION.byte_width());
    let mut tensors = Vec::with_capacity(ckpt.model.store.len());
    let mut offset = 0;
    for p in ckpt.model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.value.shape().to_vec(),
            offset,
            pinned_cols: p.pinned_cols.clone(),
        });
        offset += p.value.len();
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        precision: F::PRECISION,
        model_config: ckpt.model.config.clone(),
        train_config: ckpt.train_config.clone(),
        vocab: ckpt.vocab.clone(),
        tensors,
        fingerprint: ckpt.fingerprint.clone(),
        decoder_trained: ckpt.model.decoder.as_ref().is_some_and(|d| d.trained),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| QrnError::Format(format!("cannot serialize manifest: {e}")))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| QrnError::io(mpath, e))?;
    let bpath = dir.join(PARAMS_FILE);
    fs::write(&bpath, blob).map_err(|e| QrnError::io(bpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| QrnError::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| QrnError::Format(format!("{}: {e}", path.display())))?;
    if m.version != FORMAT_VERSION {
        return Err(QrnError::Format(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

/// Loads a checkpoint saved at precision `F`.
pub fn load<F: Scalar>(dir: &Path) -> Result<Checkpoint<F>> {
    let manifest = read_manifest(dir)?;
    if manifest.precision != F::PRECISION {
        return Err(QrnError::Format(format!(
            "checkpoint holds {:?} parameters, {:?} requested",
            manifest.precision,
            F::PRECISION
        )));
    }
    if manifest.model_config.vocab_size != manifest.vocab.len() {
        return Err(QrnError::Format("vocabulary size disagrees with the model config".into()));
    }
    let bpath = dir.join(PARAMS_FILE);
    let blob = fs::read(&bpath).map_err(|e| QrnError::io(&bpath, e))?;
    let width = F::PRECISION.byte_width();
    if blob.len() % width != 0 {
        return Err(QrnError::Format(format!("{} is not a whole number of values", bpath.display())));
    }

    let mut model = QrnModel::<F>::new(manifest.model_config.clone(), 0)?;
    if model.store.len() != manifest.tensors.len() {
        return Err(QrnError::Format(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let mut expected_offset = 0;
    for (p, entry) in model.store.iter_mut().zip(&manifest.tensors) {
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() || p.kind != entry.kind {
            return Err(QrnError::Format(format!(
                "tensor `{}` {:?} does not match model tensor `{}` {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        if entry.offset != expected_offset {
            return Err(QrnError::Format(format!("tensor `{}` has offset {}", entry.name, entry.offset)));
        }
        let n: usize = entry.shape.iter().product();
        let bytes = blob
            .get(entry.offset * width..(entry.offset + n) * width)
            .ok_or_else(|| QrnError::Format(format!("tensor `{}` runs past the blob", entry.name)))?;
        let data = bytes.chunks_exact(width).map(F::read_le).collect();
        p.value = Tensor::new(entry.shape.clone(), data)?;
        p.pinned_cols = entry.pinned_cols.clone();
        expected_offset += n;
    }
    if expected_offset * width != blob.len() {
        return Err(QrnError::Format("parameter blob has trailing bytes".into()));
    }
    if let Some(dec) = &mut model.decoder {
        dec.trained = manifest.decoder_trained;
    }
    Ok(Checkpoint {
        model,
        vocab: manifest.vocab,
        train_config: manifest.train_config,
        fingerprint: manifest.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::QrnConfig;

    #[test]
    fn fingerprint_is_length_prefixed() {
        assert_ne!(fingerprint([b"ab".as_slice(), b"c"]), fingerprint([b"a".as_slice(), b"bc"]));
        assert_eq!(fingerprint([b"x".as_slice()]).len(), 64);
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let words = ["<pad>", "<unk>", "<nil>", "a", "b"].map(String::from).to_vec();
        let vocab = Vocabulary::from_words(words).unwrap();
        let qrn = QrnConfig {
            hidden_size: 4,
            ..QrnConfig::default()
        };
        let model = QrnModel::<f32>::new(ModelConfig::qa(qrn, vocab.len()), 3).unwrap();
        let ckpt = Checkpoint {
            model,
            vocab,
            train_config: TrainConfig::default(),
            fingerprint: fingerprint([b"data".as_slice()]),
        };
        save(dir.path(), &ckpt).unwrap();
        assert!(matches!(load::<f64>(dir.path()), Err(QrnError::Format(_))));
        let back = load::<f32>(dir.path()).unwrap();
        for (a, b) in back.model.store.iter().zip(ckpt.model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
