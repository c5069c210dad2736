//! Supervised (cross-entropy + soft Dice), consistency (MSE) and total loss.
//!
//! Each loss comes with the gradient with respect to the class probabilities;
//! [`softmax_backward`] carries those back to the logits.

use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar};

/// Floor applied to the target-class probability before the log.
pub const CE_CLAMP: f64 = 1e-12;
/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl LossWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w1) || !(w2 >= 0.0 && w2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights need w1 in [0,1] and w2 >= 0, got {w1} and {w2}"
            )));
        }
        Ok(LossWeights { w1, w2 })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub consistency: f64,
    pub total: f64,
}

fn check_mask<T: Scalar>(probs: &FeatureMap<T>, mask: &BinaryMask) -> Result<()> {
    if probs.channels < 2 || probs.height != mask.height() || probs.width != mask.width() {
        return Err(Error::shape(format!(
            "probabilities {:?} do not match mask {}x{}",
            probs.shape(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Mean over pixels of `-ln(max(p[target], 1e-12))`.
pub fn ce_loss<T: Scalar>(probs: &FeatureMap<T>, mask: &BinaryMask) -> Result<f64> {
    check_mask(probs, mask)?;
    let hw = probs.plane();
    let sum: f64 = mask
        .values()
        .iter()
        .enumerate()
        .map(|(i, &g)| -probs.data[g as usize * hw + i].as_f64().max(CE_CLAMP).ln())
        .sum();
    Ok(sum / hw as f64)
}

/// `scale * d ce_loss / d probs`.
pub fn ce_grad<T: Scalar>(
    probs: &FeatureMap<T>,
    mask: &BinaryMask,
    scale: f64,
) -> Result<FeatureMap<T>> {
    check_mask(probs, mask)?;
    let hw = probs.plane();
    let mut out = FeatureMap::zeros(probs.channels, probs.height, probs.width);
    let k = scale / hw as f64;
    for (i, &g) in mask.values().iter().enumerate() {
        let idx = g as usize * hw + i;
        let p = probs.data[idx].as_f64();
        if p > CE_CLAMP {
            out.data[idx] = T::lit(-k / p);
        }
    }
    Ok(out)
}

fn dice_terms<T: Scalar>(probs: &FeatureMap<T>, mask: &BinaryMask) -> (f64, f64) {
    let fg = probs.channel(1);
    let mut inter = 0.0;
    let mut total = 0.0;
    for (p, &g) in fg.iter().zip(mask.values()) {
        let p = p.as_f64();
        inter += p * g as f64;
        total += p + g as f64;
    }
    (inter, total)
}

/// Soft Dice loss on the foreground channel:
/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss<T: Scalar>(probs: &FeatureMap<T>, mask: &BinaryMask) -> Result<f64> {
    check_mask(probs, mask)?;
    let (inter, total) = dice_terms(probs, mask);
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (total + DICE_EPS))
}

/// `scale * d dice_loss / d probs` (non-zero on channel 1 only).
pub fn dice_grad<T: Scalar>(
    probs: &FeatureMap<T>,
    mask: &BinaryMask,
    scale: f64,
) -> Result<FeatureMap<T>> {
    check_mask(probs, mask)?;
    let (inter, total) = dice_terms(probs, mask);
    let den = total + DICE_EPS;
    let num = 2.0 * inter + DICE_EPS;
    let mut out = FeatureMap::zeros(probs.channels, probs.height, probs.width);
    for (o, &g) in out.channel_mut(1).iter_mut().zip(mask.values()) {
        *o = T::lit(-scale * (2.0 * g as f64 * den - num) / (den * den));
    }
    Ok(out)
}

fn check_pair<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "consistency inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// Mean over all class-pixel entries of `(student - teacher)^2`.
pub fn consistency_loss<T: Scalar>(
    student: &FeatureMap<T>,
    teacher: &FeatureMap<T>,
) -> Result<f64> {
    check_pair(student, teacher)?;
    let sum: f64 = student
        .data
        .iter()
        .zip(&teacher.data)
        .map(|(s, t)| (s.as_f64() - t.as_f64()).powi(2))
        .sum();
    Ok(sum / student.data.len() as f64)
}

/// `scale * d consistency_loss / d student`; the teacher is a constant target.
pub fn consistency_grad<T: Scalar>(
    student: &FeatureMap<T>,
    teacher: &FeatureMap<T>,
    scale: f64,
) -> Result<FeatureMap<T>> {
    check_pair(student, teacher)?;
    let k = T::lit(2.0 * scale / student.data.len() as f64);
    let data = student
        .data
        .iter()
        .zip(&teacher.data)
        .map(|(s, t)| k * (*s - *t))
        .collect();
    FeatureMap::from_vec(student.channels, student.height, student.width, data)
}

/// Back-propagates a probability gradient through the per-pixel softmax.
pub fn softmax_backward<T: Scalar>(probs: &FeatureMap<T>, dprobs: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = probs.shape();
    let hw = h * w;
    let mut out = FeatureMap::zeros(c, h, w);
    for i in 0..hw {
        let mut dot = T::zero();
        for k in 0..c {
            dot += probs.data[k * hw + i] * dprobs.data[k * hw + i];
        }
        for k in 0..c {
            out.data[k * hw + i] = probs.data[k * hw + i] * (dprobs.data[k * hw + i] - dot);
        }
    }
    out
}

/// `total = w1 * (ce + dice) + w2 * consistency`.
pub fn total_loss(
    ce: f64,
    dice: f64,
    consistency: f64,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("ce", ce),
        ("dice", dice),
        ("consistency", consistency),
        ("w1", weights.w1),
        ("w2", weights.w2),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        ce,
        dice,
        consistency,
        total: weights.w1 * (ce + dice) + weights.w2 * consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_class(fg: &[f64], h: usize, w: usize) -> FeatureMap<f64> {
        let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
        data.extend_from_slice(fg);
        FeatureMap::from_vec(2, h, w, data).unwrap()
    }

    fn mask(v: &[u8], h: usize, w: usize) -> BinaryMask {
        BinaryMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn ce_examples() {
        let g = mask(&[1, 0, 1, 0], 2, 2);
        let exact = two_class(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        assert!(ce_loss(&exact, &g).unwrap() <= 1e-11);
        let uniform = two_class(&[0.5; 4], 2, 2);
        assert!((ce_loss(&uniform, &g).unwrap() - 2f64.ln()).abs() < 1e-12);
        let wrong = two_class(&[0.0, 1.0, 0.0, 1.0], 2, 2);
        let want = -(1e-12f64).ln();
        assert!((ce_loss(&wrong, &g).unwrap() - want).abs() < 1e-9);
        assert!((want - 27.631).abs() < 1e-3);
    }

    #[test]
    fn dice_examples() {
        let g = mask(&[1, 1, 0, 0], 2, 2);
        let same = two_class(&[1.0, 1.0, 0.0, 0.0], 2, 2);
        assert!(dice_loss(&same, &g).unwrap() <= 1e-5);

        let p = two_class(&[1.0, 0.0], 1, 2);
        let loss = dice_loss(&p, &mask(&[0, 1], 1, 2)).unwrap();
        assert!((loss - (1.0 - DICE_EPS / (2.0 + DICE_EPS))).abs() < 1e-12);

        let half = two_class(&[0.5, 0.5], 1, 2);
        let want = 1.0 - (1.0 + DICE_EPS) / (2.0 + DICE_EPS);
        let got = dice_loss(&half, &mask(&[1, 0], 1, 2)).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.5).abs() < 1e-5);
    }

    #[test]
    fn consistency_examples() {
        let a = FeatureMap::from_vec(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let b = FeatureMap::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(consistency_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(consistency_loss(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::new(0.5, 1.0).unwrap();
        let t = total_loss(0.4, 0.6, 0.2, w).unwrap();
        assert!((t.total - 0.7).abs() < 1e-12);
        let t0 = total_loss(0.4, 0.6, 0.2, LossWeights::new(0.5, 0.0).unwrap()).unwrap();
        assert!((t0.total - 0.5).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, w).unwrap().total, 0.0);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, w),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = two_class(&[0.5; 4], 2, 2);
        let g = mask(&[0; 6], 2, 3);
        assert!(ce_loss(&p, &g).is_err());
        assert!(dice_loss(&p, &g).is_err());
        let q = two_class(&[0.5; 6], 2, 3);
        assert!(consistency_loss(&p, &q).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = mask(&[1, 0, 1, 1, 0, 0], 2, 3);
        let fg = [0.3, 0.6, 0.9, 0.2, 0.4, 0.7];
        let p = two_class(&fg, 2, 3);
        let t = two_class(&[0.1, 0.5, 0.5, 0.8, 0.3, 0.2], 2, 3);
        let eps = 1e-7;
        let checks: [(&dyn Fn(&FeatureMap<f64>) -> f64, FeatureMap<f64>); 3] = [
            (&|q| ce_loss(q, &g).unwrap(), ce_grad(&p, &g, 1.0).unwrap()),
            (
                &|q| dice_loss(q, &g).unwrap(),
                dice_grad(&p, &g, 1.0).unwrap(),
            ),
            (
                &|q| consistency_loss(q, &t).unwrap(),
                consistency_grad(&p, &t, 1.0).unwrap(),
            ),
        ];
        for (f, grad) in checks {
            for i in 0..p.data.len() {
                let mut up = p.clone();
                up.data[i] += eps;
                let mut dn = p.clone();
                dn.data[i] -= eps;
                let fd = (f(&up) - f(&dn)) / (2.0 * eps);
                assert!(
                    (fd - grad.data[i]).abs() < 1e-6,
                    "{i}: {fd} vs {}",
                    grad.data[i]
                );
            }
        }
    }

    /// Direct transcription of the soft Dice formula.
    fn dice_oracle(p: &[f64], g: &[u8]) -> f64 {
        let mut num = DICE_EPS;
        let mut den = DICE_EPS;
        for i in 0..p.len() {
            num += 2.0 * p[i] * g[i] as f64;
            den += p[i] + g[i] as f64;
        }
        1.0 - num / den
    }

    proptest! {
        #[test]
        fn loss_ranges(fg in prop::collection::vec(0.0f64..=1.0, 16),
                       g in prop::collection::vec(0u8..=1, 16),
                       other in prop::collection::vec(0.0f64..=1.0, 16)) {
            let p = two_class(&fg, 4, 4);
            let m = mask(&g, 4, 4);
            prop_assert!(ce_loss(&p, &m).unwrap() >= 0.0);
            let d = dice_loss(&p, &m).unwrap();
            prop_assert!((-DICE_EPS..=1.0).contains(&d));
            prop_assert!((d - dice_oracle(&fg, &g)).abs() < 1e-9);
            let q = two_class(&other, 4, 4);
            prop_assert!(consistency_loss(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(consistency_loss(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn total_is_linear(ce in 0.0f64..10.0, dice in 0.0f64..1.0, cons in 0.0f64..1.0,
                           w1 in 0.0f64..=1.0, w2 in 0.0f64..5.0) {
            let t = total_loss(ce, dice, cons, LossWeights::new(w1, w2).unwrap()).unwrap();
            prop_assert!((t.total - (w1 * (ce + dice) + w2 * cons)).abs() < 1e-9);
            let t2 = total_loss(2.0 * ce, 2.0 * dice, 2.0 * cons, LossWeights::new(w1, w2).unwrap()).unwrap();
            prop_assert!((t2.total - 2.0 * t.total).abs() < 1e-9);
        }
    }
}
