//! Mean Teacher semi-supervised binary segmentation.
//!
//! A student U-Net with concurrent spatial and channel squeeze-and-excitation
//! (scSE) attention is trained on a mix of annotated and unannotated frames.
//! A teacher network with the same architecture tracks the exponential moving
//! average of the student weights and supplies consistency targets on the
//! unannotated frames; the teacher is what gets used for prediction.
//!
//! Modules:
//! - [`data`]: synthetic frames, polygon annotations, augmentation, splits, batches
//! - [`model`]: the scSE U-Net, its parameters and hand-written backward pass
//! - [`losses`]: cross-entropy, soft Dice, consistency MSE and their weighted total
//! - [`trainer`]: schedules, SGD, EMA teacher, training loop, checkpoints
//! - [`metrics`]: Dice, IoU, sensitivity, precision and Hausdorff distance
//! - [`experiment`]: config-driven label-budget experiment matrix
//! - [`cli`]: the `mtseg` command-line front end

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
