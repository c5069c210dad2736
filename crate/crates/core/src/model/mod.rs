//! The scSE-attention U-Net shared by student and teacher.

pub mod attention;
mod grad;
pub(crate) mod layers;
mod unet;

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{FeatureMap, Scalar, Tensor};

pub use attention::{cse_forward, cse_hidden, scse_forward, sse_forward, CseParams, SseParams};
pub use grad::{grad_total_loss, total_loss_value, LossInputs};
pub use unet::UNet;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of 2x down-sampling stages.
    pub depth: usize,
    /// Channels of the first stage; each deeper stage doubles it.
    pub base_channels: usize,
    pub attention_enabled: bool,
    pub cse_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            depth: 4,
            base_channels: 16,
            attention_enabled: true,
            cse_reduction: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "model needs in_channels >= 1 and num_classes >= 2, got {} and {}",
                self.in_channels, self.num_classes
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "model depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 || self.cse_reduction == 0 {
            return Err(Error::Config(
                "base_channels and cse_reduction must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial sides must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::shape(format!(
                "input {height}x{width} must have sides divisible by {d} (2^depth, depth {})",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
    Gradient,
}

/// Named parameter arrays of one network copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub role: Role,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(role: Role) -> Self {
        ParamSet {
            role,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self, role: Role) -> Self {
        ParamSet {
            role,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape == tb.shape)
    }

    pub fn check_layout(&self, other: &ParamSet<T>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "parameter layouts differ ({} vs {} arrays)",
                self.len(),
                other.len()
            )))
        }
    }

    /// Adds `other` element-wise.
    pub fn add_assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.check_layout(other)?;
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            role: self.role,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

/// Names and shapes of every parameter array of a configuration.
///
/// scSE weights are only listed when attention is enabled.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    UNet::new(config).layout()
}

/// Deterministic initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero.
///
/// Each array draws from its own stream keyed by its name, so toggling
/// attention leaves the convolution weights unchanged for a given seed.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut set = ParamSet::new(Role::Student);
    for (name, shape) in param_layout(config) {
        let mut tensor = Tensor::zeros(&shape);
        if shape.len() >= 2 {
            let fan_in: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = rng::stream(seed, &[rng::tag("init"), rng::tag(&name)]);
            for v in &mut tensor.data {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
        set.insert(name, tensor);
    }
    Ok(set)
}

/// Deep copy of the student, tagged as the teacher.
pub fn clone_params<T: Scalar>(student: &ParamSet<T>) -> ParamSet<T> {
    student.clone().with_role(Role::Teacher)
}

/// Per-pixel softmax over the class axis.
pub fn softmax_probs<T: Scalar>(logits: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = logits.shape();
    let hw = h * w;
    let mut out = FeatureMap::zeros(c, h, w);
    let mut scratch = vec![T::zero(); c];
    for i in 0..hw {
        let mut max = T::neg_infinity();
        for k in 0..c {
            max = max.max(logits.data[k * hw + i]);
        }
        let mut sum = T::zero();
        for (k, s) in scratch.iter_mut().enumerate() {
            *s = (logits.data[k * hw + i] - max).exp();
            sum += *s;
        }
        for (k, s) in scratch.iter().enumerate() {
            out.data[k * hw + i] = *s / sum;
        }
    }
    out
}

/// Gaussian input perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub enabled: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: 0.1,
            enabled: true,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig {
            sigma: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma >= 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "noise sigma must be >= 0, got {}",
                self.sigma
            )))
        }
    }
}

/// `clamp(image + sigma * g, 0, 1)` with `g` i.i.d. standard normal.
pub fn inject_noise<T: Scalar>(
    image: &FeatureMap<T>,
    noise: &NoiseConfig,
    rng: &mut Rng,
) -> FeatureMap<T> {
    if !noise.enabled || noise.sigma == 0.0 {
        return image.clone();
    }
    let mut out = image.clone();
    for v in &mut out.data {
        let g: f64 = StandardNormal.sample(rng);
        *v = T::lit((v.as_f64() + noise.sigma * g).clamp(0.0, 1.0));
    }
    out
}

/// Per-pixel argmax of the logits; exact ties go to class 0.
pub fn argmax_classes<T: Scalar>(logits: &FeatureMap<T>) -> Vec<u8> {
    let (c, h, w) = logits.shape();
    let hw = h * w;
    (0..hw)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if logits.data[k * hw + i] > logits.data[best * hw + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params::<f32>(&small(), 3).unwrap();
        let b = init_params::<f32>(&small(), 3).unwrap();
        let c = init_params::<f32>(&small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.iter() {
            if name.ends_with("bias") {
                assert!(t.data.iter().all(|v| *v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_variance_follows_fan_in() {
        let cfg = ModelConfig::default();
        let p = init_params::<f64>(&cfg, 11).unwrap();
        for (name, t) in p.iter() {
            if t.shape.len() < 2 || t.len() < 2000 {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let n = t.len() as f64;
            let mean = t.data.iter().sum::<f64>() / n;
            let var = t.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let want = 1.0 / (3.0 * fan_in as f64);
            assert!((var / want - 1.0).abs() < 0.2, "{name}: {var} vs {want}");
        }
    }

    #[test]
    fn attention_toggle_keeps_conv_weights() {
        let on = init_params::<f32>(&small(), 9).unwrap();
        let off = init_params::<f32>(
            &ModelConfig {
                attention_enabled: false,
                ..small()
            },
            9,
        )
        .unwrap();
        assert!(off.len() < on.len());
        for (name, t) in off.iter() {
            assert_eq!(on.get(name).unwrap(), t);
        }
    }

    #[test]
    fn clone_is_independent_copy() {
        let mut student = init_params::<f32>(&small(), 1).unwrap();
        let teacher = clone_params(&student);
        assert_eq!(teacher.role, Role::Teacher);
        assert!(teacher.same_layout(&student));
        assert_eq!(clone_params(&teacher).with_role(Role::Student), student);
        student.get_mut("head.bias").unwrap().data[0] = 5.0;
        assert_eq!(teacher.get("head.bias").unwrap().data[0], 0.0);
    }

    #[test]
    fn softmax_examples() {
        let l = FeatureMap::from_vec(2, 1, 2, vec![0.0f64, 3f64.ln(), 0.0, 0.0]).unwrap();
        let p = softmax_probs(&l);
        assert!((p.data[0] - 0.5).abs() < 1e-15 && (p.data[2] - 0.5).abs() < 1e-15);
        assert!((p.data[1] - 0.75).abs() < 1e-12 && (p.data[3] - 0.25).abs() < 1e-12);
        let shifted =
            FeatureMap::from_vec(2, 1, 2, vec![7.0f64, 3f64.ln() + 7.0, 7.0, 7.0]).unwrap();
        let q = softmax_probs(&shifted);
        for (a, b) in p.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_off_or_zero_is_identity() {
        let img = FeatureMap::filled(3, 4, 4, 0.4f32);
        let mut r = rng::stream(0, &[]);
        assert_eq!(inject_noise(&img, &NoiseConfig::off(), &mut r), img);
        let zero = NoiseConfig {
            sigma: 0.0,
            enabled: true,
        };
        assert_eq!(inject_noise(&img, &zero, &mut r), img);
    }

    #[test]
    fn noise_std_matches_sigma() {
        // 10^5 draws on pixels in [0.3, 0.7]; clamping needs a 3-sigma excursion.
        let n = 100_000;
        let img = FeatureMap::from_vec(
            1,
            1,
            n,
            (0..n)
                .map(|i| 0.3 + 0.4 * (i as f64 / n as f64))
                .collect::<Vec<f64>>(),
        )
        .unwrap();
        let mut r = rng::stream(42, &[]);
        let out = inject_noise(&img, &NoiseConfig::default(), &mut r);
        let d: Vec<f64> = out.data.iter().zip(&img.data).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((sd - 0.1).abs() < 0.01, "sd {sd}");
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn argmax_breaks_ties_to_background() {
        let l = FeatureMap::from_vec(2, 1, 3, vec![1.0f32, 0.0, 2.0, 1.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes(&l), vec![0, 1, 0]);
    }
}
