//! Frames, masks and everything that turns them into training batches.

mod augment;
mod batch;
pub mod io;
mod raster;
mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::FeatureMap;

pub use augment::{augment, GeometricTransform};
pub use batch::{make_batch, Batch, BatchSampler, Mode, PoolSampler};
pub use raster::{load_annotation, rasterize_polygons, PolygonAnnotation, Shape};
pub use synthetic::{generate_synthetic, SyntheticParams};

/// Per-pixel {0,1} segmentation labels, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| **v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask values must be 0 or 1, found {bad}"
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = u8::from(on);
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().map(|v| *v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|v| *v == 0)
    }

    pub fn transpose(&self) -> Self {
        let mut values = vec![0; self.values.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                values[c * self.height + r] = self.get(r, c);
            }
        }
        BinaryMask {
            height: self.width,
            width: self.height,
            values,
        }
    }
}

/// One frame. `pixels` is stored channel-major (`3 x H x W`) with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub patient_id: String,
    pub pixels: FeatureMap<f32>,
    pub mask: Option<BinaryMask>,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        patient_id: impl Into<String>,
        pixels: FeatureMap<f32>,
        mask: Option<BinaryMask>,
    ) -> Result<Self> {
        let id = id.into();
        if pixels.channels != 3 {
            return Err(Error::shape(format!(
                "{id}: expected 3 colour channels, got {}",
                pixels.channels
            )));
        }
        if let Some(v) = pixels.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "{id}: pixel value {v} outside [0, 1]"
            )));
        }
        if let Some(m) = &mask {
            if (m.height, m.width) != (pixels.height, pixels.width) {
                return Err(Error::shape(format!(
                    "{id}: mask {}x{} does not match image {}x{}",
                    m.height, m.width, pixels.height, pixels.width
                )));
            }
        }
        Ok(ImageSample {
            id,
            patient_id: patient_id.into(),
            pixels,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
}

impl DatasetSplit {
    pub fn patients(samples: &[ImageSample]) -> BTreeSet<&str> {
        samples.iter().map(|s| s.patient_id.as_str()).collect()
    }
}

/// Validation patients that never occur in `samples`.
pub fn missing_patients(samples: &[ImageSample], val_patients: &BTreeSet<String>) -> Vec<String> {
    let present: HashSet<&str> = samples.iter().map(|s| s.patient_id.as_str()).collect();
    val_patients
        .iter()
        .filter(|p| !present.contains(p.as_str()))
        .cloned()
        .collect()
}

/// Sends every frame of a validation patient to `val`, the rest to `train`,
/// keeping the input order on both sides.
pub fn split_by_patient(
    samples: Vec<ImageSample>,
    val_patients: &BTreeSet<String>,
) -> Result<DatasetSplit> {
    if let Some(s) = samples.iter().find(|s| s.patient_id.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "sample {} has an empty patient id",
            s.id
        )));
    }
    for p in missing_patients(&samples, val_patients) {
        log::warn!("validation patient {p} has no samples");
    }
    let (val, train) = samples
        .into_iter()
        .partition(|s| val_patients.contains(&s.patient_id));
    Ok(DatasetSplit { train, val })
}

/// How many training frames keep their annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabelBudget {
    All,
    Count(usize),
}

impl LabelBudget {
    pub fn resolve(self, available: usize) -> usize {
        match self {
            LabelBudget::All => available,
            LabelBudget::Count(k) => k,
        }
    }
}

impl fmt::Display for LabelBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelBudget::All => f.write_str("all"),
            LabelBudget::Count(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for LabelBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(LabelBudget::All);
        }
        s.parse().map(LabelBudget::Count).map_err(|_| {
            Error::InvalidArgument(format!(
                "label budget must be \"all\" or an integer, got {s:?}"
            ))
        })
    }
}

impl Serialize for LabelBudget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LabelBudget::All => s.serialize_str("all"),
            LabelBudget::Count(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for LabelBudget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(LabelBudget::Count(k as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Picks `k` frames uniformly at random (per seed) to keep their masks.
///
/// Both halves keep the input order; the unlabeled half has its masks removed.
pub fn select_label_budget(
    train: &[ImageSample],
    k: usize,
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    if k > train.len() {
        return Err(Error::InvalidArgument(format!(
            "label budget {k} exceeds {} training samples",
            train.len()
        )));
    }
    if let Some(s) = train.iter().find(|s| s.mask.is_none()) {
        return Err(Error::InvalidArgument(format!(
            "training sample {} has no mask",
            s.id
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("label-budget")]));
    let chosen: HashSet<usize> = order[..k].iter().copied().collect();
    let mut labeled = Vec::with_capacity(k);
    let mut unlabeled = Vec::with_capacity(train.len() - k);
    for (i, s) in train.iter().enumerate() {
        if chosen.contains(&i) {
            labeled.push(s.clone());
        } else {
            unlabeled.push(ImageSample {
                mask: None,
                ..s.clone()
            });
        }
    }
    Ok((labeled, unlabeled))
}
