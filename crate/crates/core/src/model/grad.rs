//! Total-loss evaluation and its gradient with respect to the student.

use rayon::prelude::*;

use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::losses::{
    ce_grad, ce_loss, consistency_grad, consistency_loss, dice_grad, dice_loss, softmax_backward,
    total_loss, LossBreakdown, LossWeights,
};
use crate::tensor::{FeatureMap, Scalar};

use super::{softmax_probs, ParamSet, Role, UNet};

/// One step's worth of prepared student inputs.
///
/// Noise has already been applied; teacher probabilities are constants.
#[derive(Clone, Debug)]
pub struct LossInputs<T> {
    pub labeled: Vec<(FeatureMap<T>, BinaryMask)>,
    /// `(student input, teacher probabilities)` pairs.
    pub unlabeled: Vec<(FeatureMap<T>, FeatureMap<T>)>,
    pub weights: LossWeights,
}

enum Item<'a, T> {
    Labeled(&'a FeatureMap<T>, &'a BinaryMask),
    Unlabeled(&'a FeatureMap<T>, &'a FeatureMap<T>),
}

/// Per-sample loss terms: (ce, dice, consistency).
type Terms = (f64, f64, f64);

impl<T: Scalar> LossInputs<T> {
    fn items(&self) -> Vec<Item<'_, T>> {
        self.labeled
            .iter()
            .map(|(x, m)| Item::Labeled(x, m))
            .chain(self.unlabeled.iter().map(|(x, t)| Item::Unlabeled(x, t)))
            .collect()
    }

    fn combine(&self, terms: &[Terms]) -> Result<LossBreakdown> {
        let nl = self.labeled.len().max(1) as f64;
        let nu = self.unlabeled.len().max(1) as f64;
        let ce = terms.iter().map(|t| t.0).sum::<f64>() / nl;
        let dice = terms.iter().map(|t| t.1).sum::<f64>() / nl;
        let cons = terms.iter().map(|t| t.2).sum::<f64>() / nu;
        let b = total_loss(ce, dice, cons, self.weights)?;
        if !b.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss {}", b.total)));
        }
        Ok(b)
    }
}

fn sample_terms<T: Scalar>(item: &Item<'_, T>, probs: &FeatureMap<T>) -> Result<Terms> {
    Ok(match item {
        Item::Labeled(_, m) => (ce_loss(probs, m)?, dice_loss(probs, m)?, 0.0),
        Item::Unlabeled(_, t) => (0.0, 0.0, consistency_loss(probs, t)?),
    })
}

/// Loss value only; used by finite-difference checks.
pub fn total_loss_value<T: Scalar>(
    net: &UNet,
    params: &ParamSet<T>,
    inputs: &LossInputs<T>,
) -> Result<LossBreakdown> {
    let terms = inputs
        .items()
        .par_iter()
        .map(|item| {
            let x = match item {
                Item::Labeled(x, _) | Item::Unlabeled(x, _) => *x,
            };
            let probs = softmax_probs(&net.forward(params, x)?);
            sample_terms(item, &probs)
        })
        .collect::<Result<Vec<_>>>()?;
    inputs.combine(&terms)
}

/// `d L_total / d params` for every parameter array, plus the loss breakdown.
///
/// Samples are processed independently and their gradients summed in input
/// order, so the result is bit-identical for any thread count.
pub fn grad_total_loss<T: Scalar>(
    net: &UNet,
    params: &ParamSet<T>,
    inputs: &LossInputs<T>,
) -> Result<(LossBreakdown, ParamSet<T>)> {
    let nl = inputs.labeled.len().max(1) as f64;
    let nu = inputs.unlabeled.len().max(1) as f64;
    let w = inputs.weights;
    let per_sample = inputs
        .items()
        .par_iter()
        .map(|item| -> Result<(Terms, Option<ParamSet<T>>)> {
            let (x, scale) = match item {
                Item::Labeled(x, _) => (*x, w.w1 / nl),
                Item::Unlabeled(x, _) => (*x, w.w2 / nu),
            };
            let (logits, cache) = net.forward_cached(params, x)?;
            let probs = softmax_probs(&logits);
            let terms = sample_terms(item, &probs)?;
            if scale == 0.0 {
                return Ok((terms, None));
            }
            let dprobs = match item {
                Item::Labeled(_, m) => {
                    let mut d = ce_grad(&probs, m, scale)?;
                    let dd = dice_grad(&probs, m, scale)?;
                    d.data.iter_mut().zip(&dd.data).for_each(|(a, b)| *a += *b);
                    d
                }
                Item::Unlabeled(_, t) => consistency_grad(&probs, t, scale)?,
            };
            let dlogits = softmax_backward(&probs, &dprobs);
            let mut grads = params.zeros_like(Role::Gradient);
            net.backward(params, &cache, dlogits, &mut grads)?;
            Ok((terms, Some(grads)))
        })
        .collect::<Result<Vec<_>>>()?;

    let terms: Vec<Terms> = per_sample.iter().map(|(t, _)| *t).collect();
    let breakdown = inputs.combine(&terms)?;
    let mut total = params.zeros_like(Role::Gradient);
    for g in per_sample.iter().filter_map(|(_, g)| g.as_ref()) {
        total.add_assign(g)?;
    }
    Ok((breakdown, total))
}
