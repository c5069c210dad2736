use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{augment, BinaryMask, ImageSample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Supervised only: every batch slot is annotated.
    Fully,
    /// Mean Teacher: half the batch annotated, half unannotated.
    Semi,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fully => "fully",
            Mode::Semi => "semi",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fully" => Ok(Mode::Fully),
            "semi" => Ok(Mode::Semi),
            _ => Err(Error::InvalidArgument(format!(
                "mode must be \"fully\" or \"semi\", got {s:?}"
            ))),
        }
    }
}

/// Augmented training inputs for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labeled: Vec<(FeatureMap<f32>, BinaryMask)>,
    pub unlabeled: Vec<FeatureMap<f32>>,
}

/// Cycles through a pool without replacement, reshuffling at every pass.
#[derive(Clone, Debug)]
pub struct PoolSampler {
    seed: u64,
    stream: u64,
    order: Vec<usize>,
    cursor: usize,
    pass: u64,
}

impl PoolSampler {
    pub fn new(len: usize, seed: u64, stream: &str) -> Self {
        let mut s = PoolSampler {
            seed,
            stream: rng::tag(stream),
            order: (0..len).collect(),
            cursor: 0,
            pass: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order
            .shuffle(&mut rng::stream(self.seed, &[self.stream, self.pass]));
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn next_index(&mut self) -> usize {
        assert!(!self.order.is_empty(), "sampling from an empty pool");
        if self.cursor == self.order.len() {
            self.pass += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Sampler state for [`make_batch`]: one stream per pool plus augmentation seeds.
///
/// The annotated stream does not depend on the mode, so a fully-supervised
/// run and a semi-supervised run with the same seed see the same labeled frames.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    mode: Mode,
    batch_size: usize,
    seed: u64,
    augment: bool,
    labeled: PoolSampler,
    unlabeled: Option<PoolSampler>,
    step: u64,
}

impl BatchSampler {
    pub fn new(
        mode: Mode,
        batch_size: usize,
        labeled_len: usize,
        unlabeled_len: usize,
        seed: u64,
        augment: bool,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if labeled_len == 0 {
            return Err(Error::InvalidArgument("labeled pool is empty".into()));
        }
        if mode == Mode::Semi {
            if !batch_size.is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "semi-supervised batches split evenly; batch size {batch_size} is odd"
                )));
            }
            if unlabeled_len == 0 {
                return Err(Error::InvalidArgument("unlabeled pool is empty".into()));
            }
        }
        Ok(BatchSampler {
            mode,
            batch_size,
            seed,
            augment,
            labeled: PoolSampler::new(labeled_len, seed, "labeled"),
            unlabeled: (mode == Mode::Semi)
                .then(|| PoolSampler::new(unlabeled_len, seed, "unlabeled")),
            step: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn labeled_per_batch(&self) -> usize {
        match self.mode {
            Mode::Fully => self.batch_size,
            Mode::Semi => self.batch_size / 2,
        }
    }

    fn prepare(&self, sample: &ImageSample, pool: &str, slot: usize) -> ImageSample {
        if !self.augment {
            return sample.clone();
        }
        let mut r = rng::stream(
            self.seed,
            &[rng::tag("augment"), rng::tag(pool), self.step, slot as u64],
        );
        augment(sample, &mut r)
    }

    /// Draws the next batch and advances the sampler.
    pub fn next_batch(
        &mut self,
        labeled: &[ImageSample],
        unlabeled: &[ImageSample],
    ) -> Result<Batch> {
        if labeled.len() != self.labeled.len() {
            return Err(Error::InvalidArgument(format!(
                "labeled pool changed size: {} vs {}",
                labeled.len(),
                self.labeled.len()
            )));
        }
        let n = self.labeled_per_batch();
        let mut batch = Batch {
            labeled: Vec::with_capacity(n),
            unlabeled: Vec::new(),
        };
        for slot in 0..n {
            let s = &labeled[self.labeled.next_index()];
            let s = self.prepare(s, "labeled", slot);
            let mask = s.mask.ok_or_else(|| {
                Error::InvalidArgument(format!("labeled sample {} has no mask", s.id))
            })?;
            batch.labeled.push((s.pixels, mask));
        }
        if let Some(mut sampler) = self.unlabeled.take() {
            if unlabeled.len() != sampler.len() {
                return Err(Error::InvalidArgument(format!(
                    "unlabeled pool changed size: {} vs {}",
                    unlabeled.len(),
                    sampler.len()
                )));
            }
            for slot in 0..self.batch_size / 2 {
                let s = &unlabeled[sampler.next_index()];
                batch
                    .unlabeled
                    .push(self.prepare(s, "unlabeled", slot).pixels);
            }
            self.unlabeled = Some(sampler);
        }
        self.step += 1;
        Ok(batch)
    }
}

/// Draws one batch: `batch_size / 2` frames from each pool in semi mode,
/// `batch_size` annotated frames in fully-supervised mode.
pub fn make_batch(
    sampler: &mut BatchSampler,
    labeled: &[ImageSample],
    unlabeled: &[ImageSample],
) -> Result<Batch> {
    sampler.next_batch(labeled, unlabeled)
}
