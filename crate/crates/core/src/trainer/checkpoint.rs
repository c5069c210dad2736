//! On-disk checkpoints.
//!
//! Layout of a checkpoint directory:
//!
//! ```text
//! manifest.json          version, configs, iteration, epoch, EMA phase, seed, hashes, array list
//! student/<name>.bin     one blob per parameter array
//! teacher/<name>.bin
//! ```
//!
//! Blobs hold the array's values in row-major order as little-endian `f32`,
//! with no header; shapes live in the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet, Role, UNet};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to predict with, or inspect, a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub iteration: usize,
    pub epoch: usize,
    pub config_hash: String,
    /// Hash of the dataset manifest the run was trained on, if known.
    pub data_hash: Option<String>,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaPhase {
    Rampup,
    Main,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    iteration: usize,
    epoch: usize,
    ema_phase: EmaPhase,
    seed: u64,
    config_hash: String,
    data_hash: Option<String>,
    dtype: String,
    byte_order: String,
    arrays: Vec<ArrayEntry>,
}

/// SHA-256 of the canonical JSON form of both configurations.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    hex::encode(Sha256::digest(&json))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn blob_path(dir: &Path, role: &str, name: &str) -> PathBuf {
    dir.join(role).join(format!("{name}.bin"))
}

fn write_blob(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let len: usize = shape.iter().product();
    if bytes.len() != 4 * len {
        return Err(ckpt_err(
            path,
            format!(
                "expected {} bytes for shape {shape:?}, found {}",
                4 * len,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

impl Checkpoint {
    pub fn ema_phase(&self) -> EmaPhase {
        if self.epoch <= self.train.ramp_up_length {
            EmaPhase::Rampup
        } else {
            EmaPhase::Main
        }
    }

    /// Writes the checkpoint into a temporary sibling directory and renames it
    /// into place, so readers never observe a partial checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| ckpt_err(dir, "checkpoint path has no file name"))?
            .to_string_lossy()
            .into_owned();
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = parent.join(format!(".{name}.tmp"));
        let old = parent.join(format!(".{name}.old"));
        for p in [&tmp, &old] {
            if p.exists() {
                fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
        }
        for role in ["student", "teacher"] {
            let d = tmp.join(role);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut arrays = Vec::new();
        for ((name, s), (_, t)) in self.student.iter().zip(self.teacher.iter()) {
            write_blob(&blob_path(&tmp, "student", name), s)?;
            write_blob(&blob_path(&tmp, "teacher", name), t)?;
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: s.shape.clone(),
            });
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            epoch: self.epoch,
            ema_phase: self.ema_phase(),
            seed: self.train.seed,
            config_hash: self.config_hash.clone(),
            data_hash: self.data_hash.clone(),
            dtype: "f32".into(),
            byte_order: "little".into(),
            arrays,
        };
        let mpath = tmp.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")
            .map_err(|e| Error::io(&mpath, e))?;
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| ckpt_err(&mpath, e.to_string()))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(ckpt_err(
                &mpath,
                format!("unsupported version {}", m.version),
            ));
        }
        if m.dtype != "f32" || m.byte_order != "little" {
            return Err(ckpt_err(
                &mpath,
                format!("unsupported encoding {} {}", m.dtype, m.byte_order),
            ));
        }
        m.model.validate()?;
        let mut student = ParamSet::new(Role::Student);
        let mut teacher = ParamSet::new(Role::Teacher);
        for a in &m.arrays {
            student.insert(
                a.name.clone(),
                read_blob(&blob_path(dir, "student", &a.name), &a.shape)?,
            );
            teacher.insert(
                a.name.clone(),
                read_blob(&blob_path(dir, "teacher", &a.name), &a.shape)?,
            );
        }
        let expected = UNet::new(&m.model).layout();
        let found: Vec<(String, Vec<usize>)> = student
            .iter()
            .map(|(n, t)| (n.clone(), t.shape.clone()))
            .collect();
        let mut expected_sorted = expected;
        expected_sorted.sort();
        if found != expected_sorted {
            return Err(ckpt_err(
                dir,
                "parameter arrays do not match the model configuration",
            ));
        }
        Ok(Checkpoint {
            model: m.model,
            train: m.train,
            iteration: m.iteration,
            epoch: m.epoch,
            config_hash: m.config_hash,
            data_hash: m.data_hash,
            student,
            teacher,
        })
    }
}
