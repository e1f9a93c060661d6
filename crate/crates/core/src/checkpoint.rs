//! Checkpoint directories:
//!
//! ```text
//! manifest.json   config, config hash, epoch, validation loss, tensor table
//! params.bin      every tensor as little-endian f64, row-major, in table order
//! vocab.txt       word vocabulary
//! entities.txt    entity vocabulary
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::config::ModelConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const VOCAB: &str = "vocab.txt";
pub const ENTITIES: &str = "entities.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// byte offset into the blob
    pub offset: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub valid_loss: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_bytes(m: &Mat) -> Vec<u8> {
    m.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Writes `model` to `dir`, creating it if needed.
pub fn save_checkpoint(model: &Model, dir: &Path, epoch: usize, valid_loss: Option<f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.store.num_elements() * 8);
    let mut tensors = Vec::with_capacity(model.store.len());
    for id in model.store.ids() {
        let m = model.store.get(id);
        let bytes = tensor_bytes(m);
        tensors.push(TensorEntry {
            name: model.store.name(id).to_string(),
            shape: [m.nrows(), m.ncols()],
            offset: blob.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        config: model.config.clone(),
        config_hash: model.config.hash(),
        epoch,
        valid_loss,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let write = |name: &str, data: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, data).map_err(|e| Error::io(&path, e))
    };
    write(MANIFEST, json.as_bytes())?;
    write(PARAMS, &blob)?;
    model.vocab.save(&dir.join(VOCAB))?;
    model.entities.save(&dir.join(ENTITIES))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint, checking the config hash, the tensor layout, and
/// every tensor's digest.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: manifest records {}, config hashes to {}",
            manifest.config_hash,
            manifest.config.hash()
        )));
    }
    let vocab = Vocabulary::load(&dir.join(VOCAB))?;
    let entities = Vocabulary::load(&dir.join(ENTITIES))?;
    let mut model = Model::new(manifest.config.clone(), vocab, entities, 0)?;
    let path = dir.join(PARAMS);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;

    if manifest.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (entry, id) in manifest.tensors.iter().zip(ids) {
        let name = model.store.name(id).to_string();
        if entry.name != name {
            return Err(Error::Checkpoint(format!("tensor {}: expected {name} at this position", entry.name)));
        }
        let want = model.store.get(id).dim();
        if (entry.shape[0], entry.shape[1]) != want {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: manifest shape {:?} does not match model shape {want:?}",
                entry.shape
            )));
        }
        let len = want.0 * want.1 * 8;
        let bytes = blob
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: blob is truncated")))?;
        if hex::encode(Sha256::digest(bytes)) != entry.sha256 {
            return Err(Error::Checkpoint(format!("tensor {name}: checksum mismatch")));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *model.store.get_mut(id) = Mat::from_shape_vec(want, values).expect("length checked");
    }
    Ok((model, manifest))
}

/// Like [`load_checkpoint`], additionally requiring a given config.
pub fn load_checkpoint_for(dir: &Path, config: &ModelConfig) -> Result<Model> {
    let (model, manifest) = load_checkpoint(dir)?;
    if manifest.config_hash != config.hash() {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {}, requested {}",
            manifest.config_hash,
            config.hash()
        )));
    }
    Ok(model)
}
