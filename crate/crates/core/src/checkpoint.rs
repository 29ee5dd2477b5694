//! Checkpoint directories: `checkpoint.json` plus one "CMPT" file per
//! parameter and per optimizer moment.
//!
//! ```text
//! checkpoint.json
//! tensors/param/<name>.cmpt
//! tensors/adam_m/<name>.cmpt
//! tensors/adam_v/<name>.cmpt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::CmpModel;
use crate::numerics::{read_tensor, write_tensor, DType, Scalar};
use crate::objectives::{AdamW, EpochLoss, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub corpus_hash: String,
    pub dtype: String,
    pub epoch: usize,
    pub step: usize,
    pub optimizer_step: u64,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
    pub curve: Vec<EpochLoss>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub model: CmpModel<T>,
    pub state: TrainState<T>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn tensor_path(dir: &Path, kind: &str, name: &str) -> PathBuf {
    dir.join("tensors").join(kind).join(format!("{name}.cmpt"))
}

/// Writes a checkpoint, replacing any previous one at `dir`. The new contents
/// are assembled next to `dir` and renamed into place, so an interrupted write
/// leaves the old checkpoint intact.
pub fn save_checkpoint<T: Scalar>(dir: &Path, config: &RunConfig, model: &CmpModel<T>, state: &TrainState<T>) -> Result<()> {
    let mut tmp = dir.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    for kind in ["param", "adam_m", "adam_v"] {
        let p = tmp.join("tensors").join(kind);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut tensors = Vec::new();
    for (id, name, t) in model.params.iter() {
        write_tensor(&tensor_path(&tmp, "param", name), t)?;
        write_tensor(&tensor_path(&tmp, "adam_m", name), &state.optimizer.m[id.index()])?;
        write_tensor(&tensor_path(&tmp, "adam_v", name), &state.optimizer.v[id.index()])?;
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec() });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config_hash: config.config_hash(),
        corpus_hash: config.corpus_hash(),
        dtype: dtype_name(T::DTYPE).into(),
        epoch: state.epoch,
        step: state.step,
        optimizer_step: state.optimizer.step,
        config: config.clone(),
        tensors,
        curve: state.curve.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = tmp.join("checkpoint.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format { path, msg: format!("unsupported checkpoint version {}", m.format_version) });
    }
    let found = m.config.config_hash();
    if found != m.config_hash {
        return Err(Error::HashMismatch { what: "checkpoint config", expected: m.config_hash, found });
    }
    Ok(m)
}

/// Hex SHA-256 over the manifest and every parameter file, in manifest order.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let m = read_manifest(dir)?;
    let mut h = Sha256::new();
    let path = dir.join("checkpoint.json");
    h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    for entry in &m.tensors {
        let path = tensor_path(dir, "param", &entry.name);
        h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let m = read_manifest(dir)?;
    if m.dtype != dtype_name(T::DTYPE) {
        return Err(Error::Format {
            path: dir.join("checkpoint.json"),
            msg: format!("stored as {}, requested {}", m.dtype, dtype_name(T::DTYPE)),
        });
    }
    let mut model = CmpModel::<T>::new(m.config.model_config())?;
    let mut optimizer = AdamW::new(&model.params, &m.config.train);
    optimizer.step = m.optimizer_step;
    if m.tensors.len() != model.params.len() {
        return Err(Error::Format {
            path: dir.join("checkpoint.json"),
            msg: format!("{} tensors listed, model has {}", m.tensors.len(), model.params.len()),
        });
    }
    for entry in &m.tensors {
        let id = model.params.id(&entry.name).ok_or_else(|| Error::Format {
            path: dir.join("checkpoint.json"),
            msg: format!("unknown parameter `{}`", entry.name),
        })?;
        model.params.set(id, read_tensor(&tensor_path(dir, "param", &entry.name))?)?;
        let k = id.index();
        for (kind, slot) in [("adam_m", &mut optimizer.m[k]), ("adam_v", &mut optimizer.v[k])] {
            let t = read_tensor(&tensor_path(dir, kind, &entry.name))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("load_checkpoint", slot.shape(), t.shape()));
            }
            *slot = t;
        }
    }
    let state = TrainState { epoch: m.epoch, step: m.step, optimizer, curve: m.curve };
    Ok(Checkpoint { config: m.config, model, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSection;
    use crate::corpus::CorpusConfig;

    fn small_config() -> RunConfig {
        RunConfig {
            corpus: CorpusConfig { image_size: 8, vocab_size: 72, ..CorpusConfig::default() },
            model: ModelSection {
                patch_size: 4,
                dim: 8,
                heads: 2,
                ca_heads: 2,
                image_blocks: 1,
                text_blocks: 1,
                cross_blocks: 1,
                ffn_dim: 16,
                proj_dim: 6,
                ..ModelSection::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_weights_and_optimizer() {
        let cfg = small_config();
        let model = CmpModel::<f32>::new(cfg.model_config()).unwrap();
        let mut state = TrainState::new(&model, &cfg.train);
        state.epoch = 3;
        state.step = 17;
        state.optimizer.step = 17;
        state.optimizer.m[2].data_mut()[0] = 0.5;
        state.optimizer.v[4].data_mut()[1] = 0.25;
        state.curve.push(EpochLoss { epoch: 1, l_cl: 1.0, l_itm: 0.5, l_mlm: 3.0, l_total: 4.5, lr: 1e-4 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &cfg, &model, &state).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.state, state);
        for ((_, n1, a), (_, n2, b)) in model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.data(), b.data());
        }
        let digest = checkpoint_digest(&path).unwrap();
        save_checkpoint(&path, &cfg, &model, &state).unwrap();
        assert!(!dir.path().join("ckpt.partial").exists());
        assert_eq!(checkpoint_digest(&path).unwrap(), digest);
    }

    #[test]
    fn tampered_config_is_a_hash_mismatch() {
        let cfg = small_config();
        let model = CmpModel::<f32>::new(cfg.model_config()).unwrap();
        let state = TrainState::new(&model, &cfg.train);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &model, &state).unwrap();
        let path = dir.path().join("checkpoint.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"batch_size\": 22", "\"batch_size\": 23");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn precision_must_match() {
        let cfg = small_config();
        let model = CmpModel::<f32>::new(cfg.model_config()).unwrap();
        let state = TrainState::new(&model, &cfg.train);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &model, &state).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Format { .. })));
    }
}
