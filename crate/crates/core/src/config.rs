//! TOML configuration files and data sources.
//!
//! Every key is optional; missing keys take the defaults of the
//! corresponding struct. Unknown keys are an error, and all of them are
//! listed at once.
//!
//! ```toml
//! [model]
//! depth = 4
//! base_channels = 16
//!
//! [train]
//! mode = "semi"
//! label_budget = 25
//!
//! [data.synthetic]
//! seed = 0
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::io::{read_dataset, read_external, LabelSource};
use crate::data::{generate_synthetic, split_by_patient, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{bytes_hash, TrainConfig};

/// Parses TOML into `T`, rejecting unknown keys.
pub fn from_toml_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut unknown = Vec::new();
    let value: T = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| Error::Config(e.to_string()))?;
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown keys: {}",
            unknown.join(", ")
        )));
    }
    Ok(value)
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_toml_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn to_toml_string<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

/// Generated frames: the last `val_patients` patients form the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSource {
    pub seed: u64,
    pub train_patients: usize,
    pub val_patients: usize,
    pub images_per_patient: usize,
    /// Validation patients keep only their first this-many frames.
    pub val_images_per_patient: usize,
    pub side: usize,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource {
            seed: 0,
            train_patients: 5,
            val_patients: 2,
            images_per_patient: 40,
            val_images_per_patient: 20,
            side: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    /// Directory written by `generate-data`.
    pub dir: PathBuf,
}

/// Externally supplied PNG frames. Patient ids come from the file names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalSource {
    pub images: PathBuf,
    pub masks: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    #[serde(default)]
    pub val_patients: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Dataset(DatasetSource),
    External(ExternalSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSource::default())
    }
}

/// A resolved split plus a fingerprint of where it came from.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub split: DatasetSplit,
    pub data_hash: Option<String>,
}

impl DataSource {
    pub fn load(&self) -> Result<LoadedData> {
        match self {
            DataSource::Synthetic(s) => {
                let n = s.train_patients + s.val_patients;
                let all = generate_synthetic(s.seed, n, s.images_per_patient, s.side)?;
                let val: BTreeSet<String> =
                    (s.train_patients..n).map(|p| format!("p{p}")).collect();
                let mut split = split_by_patient(all, &val)?;
                let mut kept = std::collections::BTreeMap::<String, usize>::new();
                split.val.retain(|x| {
                    let k = kept.entry(x.patient_id.clone()).or_default();
                    *k += 1;
                    *k <= s.val_images_per_patient
                });
                let json = serde_json::to_vec(s)?;
                Ok(LoadedData {
                    split,
                    data_hash: Some(bytes_hash(&json)),
                })
            }
            DataSource::Dataset(d) => {
                let (manifest, samples) = read_dataset(&d.dir)?;
                let mpath = d.dir.join("manifest.json");
                let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
                Ok(LoadedData {
                    split: split_by_patient(samples, &manifest.val_set())?,
                    data_hash: Some(bytes_hash(&bytes)),
                })
            }
            DataSource::External(x) => {
                let labels = match (&x.masks, &x.annotations) {
                    (Some(m), None) => LabelSource::Masks(m.clone()),
                    (None, Some(a)) => LabelSource::Annotations(a.clone()),
                    _ => {
                        return Err(Error::Config(
                            "external data needs exactly one of masks or annotations".into(),
                        ))
                    }
                };
                for dir in [
                    &x.images,
                    match &labels {
                        LabelSource::Masks(d) | LabelSource::Annotations(d) => d,
                    },
                ] {
                    if !dir.is_dir() {
                        return Err(Error::InvalidArgument(format!(
                            "directory not found: {}",
                            dir.display()
                        )));
                    }
                }
                let samples = read_external(&x.images, &labels)?;
                let val = x.val_patients.iter().cloned().collect();
                Ok(LoadedData {
                    split: split_by_patient(samples, &val)?,
                    data_hash: None,
                })
            }
        }
    }
}

/// Everything one training run needs; also the resolved snapshot it writes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelBudget, Mode};

    #[test]
    fn empty_config_is_all_defaults() {
        let c: RunConfig = from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.total_iterations, 3000);
        assert_eq!(c.train.batch_size, 16);
    }

    #[test]
    fn partial_config_overrides() {
        let c: RunConfig = from_toml_str(
            "[model]\ndepth = 3\n[train]\nmode = \"fully\"\nlabel_budget = 25\n[train.noise]\nsigma = 0.05\n",
        )
        .unwrap();
        assert_eq!(c.model.depth, 3);
        assert_eq!(c.model.base_channels, 16);
        assert_eq!(c.train.mode, Mode::Fully);
        assert_eq!(c.train.label_budget, LabelBudget::Count(25));
        assert_eq!(c.train.noise.sigma, 0.05);
        let all: RunConfig = from_toml_str("[train]\nlabel_budget = \"all\"\n").unwrap();
        assert_eq!(all.train.label_budget, LabelBudget::All);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = from_toml_str::<RunConfig>("bogus = 1\n[train]\nlr = 0.1\n[model]\ndepth = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains("train.lr"), "{err}");
    }

    #[test]
    fn data_sources_parse() {
        let c: RunConfig = from_toml_str("[data.dataset]\ndir = \"d\"\n").unwrap();
        assert_eq!(
            c.data,
            DataSource::Dataset(DatasetSource { dir: "d".into() })
        );
        let c: RunConfig = from_toml_str(
            "[data.external]\nimages = \"i\"\nmasks = \"m\"\nval_patients = [\"a\"]\n",
        )
        .unwrap();
        assert!(matches!(c.data, DataSource::External(_)));
        assert!(from_toml_str::<RunConfig>("[data.synthetic]\nsides = 3\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.train.label_budget = LabelBudget::Count(7);
        c.model.attention_enabled = false;
        let text = to_toml_string(&c).unwrap();
        assert_eq!(from_toml_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn synthetic_source_split_counts() {
        let s = SyntheticSource {
            images_per_patient: 4,
            val_images_per_patient: 2,
            side: 32,
            ..Default::default()
        };
        let d = DataSource::Synthetic(s).load().unwrap();
        assert_eq!(d.split.train.len(), 20);
        assert_eq!(d.split.val.len(), 4);
        assert_eq!(DatasetSplit::patients(&d.split.train).len(), 5);
    }

    #[test]
    fn missing_external_dir_is_named() {
        let src = DataSource::External(ExternalSource {
            images: "/nonexistent/images".into(),
            masks: Some("/nonexistent/masks".into()),
            annotations: None,
            val_patients: vec![],
        });
        let err = src.load().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/images"), "{err}");
    }
}
