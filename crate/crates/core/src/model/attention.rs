//! Concurrent spatial and channel squeeze-and-excitation.
//!
//! The channel branch (cSE) pools each channel to a scalar, runs the channel
//! descriptor through a bottleneck MLP and gates every channel by a sigmoid
//! weight. The spatial branch (sSE) projects the channels at each pixel to a
//! single sigmoid gate with a 1x1 convolution. scSE returns the element-wise
//! sum of both recalibrated maps.

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar, Tensor};

/// Weights of the channel gate. `fc1` is `[hidden, C]`, `fc2` is `[C, hidden]`.
#[derive(Clone, Copy)]
pub struct CseParams<'a, T> {
    pub fc1_weight: &'a Tensor<T>,
    pub fc1_bias: &'a Tensor<T>,
    pub fc2_weight: &'a Tensor<T>,
    pub fc2_bias: &'a Tensor<T>,
}

/// Weights of the spatial gate: a `[1, C, 1, 1]` kernel and a `[1]` bias.
#[derive(Clone, Copy)]
pub struct SseParams<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

/// Hidden width of the channel-gate bottleneck, clamped to at least one unit.
pub fn cse_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> CseParams<'_, T> {
    fn check(&self, channels: usize) -> Result<usize> {
        let hidden = self.fc1_weight.shape.first().copied().unwrap_or(0);
        let ok = self.fc1_weight.shape == [hidden, channels]
            && self.fc1_bias.shape == [hidden]
            && self.fc2_weight.shape == [channels, hidden]
            && self.fc2_bias.shape == [channels]
            && hidden > 0;
        if ok {
            Ok(hidden)
        } else {
            Err(Error::shape(format!(
                "cSE weights {:?}/{:?} do not fit {channels} channels",
                self.fc1_weight.shape, self.fc2_weight.shape
            )))
        }
    }
}

impl<T: Scalar> SseParams<'_, T> {
    fn check(&self, channels: usize) -> Result<()> {
        if self.weight.shape == [1, channels, 1, 1] && self.bias.shape == [1] {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "sSE kernel {:?} does not map {channels} channels to 1",
                self.weight.shape
            )))
        }
    }
}

pub(crate) struct CseCache<T> {
    pooled: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    gate: Vec<T>,
}

pub(crate) struct SseCache<T> {
    gate: Vec<T>,
}

fn cse_gate<T: Scalar>(x: &FeatureMap<T>, p: &CseParams<T>, hidden: usize) -> CseCache<T> {
    let c = x.channels;
    let inv = T::one() / T::lit(x.plane() as f64);
    let pooled: Vec<T> = (0..c)
        .map(|ci| x.channel(ci).iter().copied().sum::<T>() * inv)
        .collect();
    let hidden_pre: Vec<T> = (0..hidden)
        .map(|j| {
            let row = &p.fc1_weight.data[j * c..(j + 1) * c];
            p.fc1_bias.data[j] + row.iter().zip(&pooled).map(|(w, z)| *w * *z).sum::<T>()
        })
        .collect();
    let hidden_act: Vec<T> = hidden_pre.iter().map(|v| v.max(T::zero())).collect();
    let gate: Vec<T> = (0..c)
        .map(|ci| {
            let row = &p.fc2_weight.data[ci * hidden..(ci + 1) * hidden];
            sigmoid(
                p.fc2_bias.data[ci] + row.iter().zip(&hidden_act).map(|(w, h)| *w * *h).sum::<T>(),
            )
        })
        .collect();
    CseCache {
        pooled,
        hidden_pre,
        hidden: hidden_act,
        gate,
    }
}

fn sse_gate<T: Scalar>(x: &FeatureMap<T>, p: &SseParams<T>) -> SseCache<T> {
    let hw = x.plane();
    let mut pre = vec![p.bias.data[0]; hw];
    for ci in 0..x.channels {
        let w = p.weight.data[ci];
        for (acc, v) in pre.iter_mut().zip(x.channel(ci)) {
            *acc += w * *v;
        }
    }
    SseCache {
        gate: pre.into_iter().map(sigmoid).collect(),
    }
}

fn apply_channel_gate<T: Scalar>(x: &FeatureMap<T>, gate: &[T], out: &mut FeatureMap<T>) {
    for (ci, g) in gate.iter().enumerate() {
        for (o, v) in out.channel_mut(ci).iter_mut().zip(x.channel(ci)) {
            *o += *g * *v;
        }
    }
}

fn apply_spatial_gate<T: Scalar>(x: &FeatureMap<T>, gate: &[T], out: &mut FeatureMap<T>) {
    for ci in 0..x.channels {
        for ((o, v), g) in out.channel_mut(ci).iter_mut().zip(x.channel(ci)).zip(gate) {
            *o += *g * *v;
        }
    }
}

/// Channel squeeze-and-excitation: `out[c] = sigmoid(W2 relu(W1 mean(x) + b1) + b2)[c] * x[c]`.
pub fn cse_forward<T: Scalar>(x: &FeatureMap<T>, params: &CseParams<T>) -> Result<FeatureMap<T>> {
    let hidden = params.check(x.channels)?;
    let cache = cse_gate(x, params, hidden);
    let mut out = FeatureMap::zeros(x.channels, x.height, x.width);
    apply_channel_gate(x, &cache.gate, &mut out);
    Ok(out)
}

/// Spatial squeeze-and-excitation: `out[c,i,j] = sigmoid(conv1x1(x))[i,j] * x[c,i,j]`.
pub fn sse_forward<T: Scalar>(x: &FeatureMap<T>, params: &SseParams<T>) -> Result<FeatureMap<T>> {
    params.check(x.channels)?;
    let cache = sse_gate(x, params);
    let mut out = FeatureMap::zeros(x.channels, x.height, x.width);
    apply_spatial_gate(x, &cache.gate, &mut out);
    Ok(out)
}

/// Sum of the channel-gated and spatially-gated maps.
pub fn scse_forward<T: Scalar>(
    x: &FeatureMap<T>,
    cse: &CseParams<T>,
    sse: &SseParams<T>,
) -> Result<FeatureMap<T>> {
    Ok(scse_forward_cached(x, cse, sse)?.0)
}

pub(crate) struct ScseCache<T> {
    cse: CseCache<T>,
    sse: SseCache<T>,
}

pub(crate) fn scse_forward_cached<T: Scalar>(
    x: &FeatureMap<T>,
    cse: &CseParams<T>,
    sse: &SseParams<T>,
) -> Result<(FeatureMap<T>, ScseCache<T>)> {
    let hidden = cse.check(x.channels)?;
    sse.check(x.channels)?;
    let cse_cache = cse_gate(x, cse, hidden);
    let sse_cache = sse_gate(x, sse);
    let mut out = FeatureMap::zeros(x.channels, x.height, x.width);
    apply_channel_gate(x, &cse_cache.gate, &mut out);
    apply_spatial_gate(x, &sse_cache.gate, &mut out);
    Ok((
        out,
        ScseCache {
            cse: cse_cache,
            sse: sse_cache,
        },
    ))
}

/// Gradient slots for one scSE block, in the same order as [`CseParams`] then [`SseParams`].
pub(crate) struct ScseGrads<'a, T> {
    pub fc1_weight: &'a mut [T],
    pub fc1_bias: &'a mut [T],
    pub fc2_weight: &'a mut [T],
    pub fc2_bias: &'a mut [T],
    pub sse_weight: &'a mut [T],
    pub sse_bias: &'a mut [T],
}

pub(crate) fn scse_backward<T: Scalar>(
    dout: &FeatureMap<T>,
    x: &FeatureMap<T>,
    cache: &ScseCache<T>,
    cse: &CseParams<T>,
    sse: &SseParams<T>,
    grads: ScseGrads<T>,
) -> FeatureMap<T> {
    let (c, _, _) = x.shape();
    let hw = x.plane();
    let hidden = cache.cse.hidden.len();
    let mut dx = FeatureMap::zeros(c, x.height, x.width);

    // Channel branch.
    let s = &cache.cse.gate;
    let mut dpre2 = vec![T::zero(); c];
    for ci in 0..c {
        let g = s[ci];
        let mut ds = T::zero();
        for ((d, o), v) in dx
            .channel_mut(ci)
            .iter_mut()
            .zip(dout.channel(ci))
            .zip(x.channel(ci))
        {
            *d += g * *o;
            ds += *o * *v;
        }
        dpre2[ci] = ds * g * (T::one() - g);
    }
    let mut dhidden = vec![T::zero(); hidden];
    for ci in 0..c {
        grads.fc2_bias[ci] += dpre2[ci];
        for j in 0..hidden {
            grads.fc2_weight[ci * hidden + j] += dpre2[ci] * cache.cse.hidden[j];
            dhidden[j] += cse.fc2_weight.data[ci * hidden + j] * dpre2[ci];
        }
    }
    let mut dpooled = vec![T::zero(); c];
    for j in 0..hidden {
        if cache.cse.hidden_pre[j] <= T::zero() {
            continue;
        }
        let dpre1 = dhidden[j];
        grads.fc1_bias[j] += dpre1;
        for ci in 0..c {
            grads.fc1_weight[j * c + ci] += dpre1 * cache.cse.pooled[ci];
            dpooled[ci] += cse.fc1_weight.data[j * c + ci] * dpre1;
        }
    }
    let inv = T::one() / T::lit(hw as f64);
    for (ci, dz) in dpooled.iter().enumerate() {
        let add = *dz * inv;
        dx.channel_mut(ci).iter_mut().for_each(|d| *d += add);
    }

    // Spatial branch.
    let q = &cache.sse.gate;
    let mut dpre = vec![T::zero(); hw];
    for ci in 0..c {
        for ((acc, o), v) in dpre.iter_mut().zip(dout.channel(ci)).zip(x.channel(ci)) {
            *acc += *o * *v;
        }
    }
    for (d, g) in dpre.iter_mut().zip(q) {
        *d = *d * *g * (T::one() - *g);
    }
    grads.sse_bias[0] += dpre.iter().copied().sum::<T>();
    for ci in 0..c {
        let w = sse.weight.data[ci];
        let mut dw = T::zero();
        for (((d, o), v), (g, dp)) in dx
            .channel_mut(ci)
            .iter_mut()
            .zip(dout.channel(ci))
            .zip(x.channel(ci))
            .zip(q.iter().zip(&dpre))
        {
            *d += *g * *o + *dp * w;
            dw += *dp * *v;
        }
        grads.sse_weight[ci] += dw;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Owned {
        fc1w: Tensor<f64>,
        fc1b: Tensor<f64>,
        fc2w: Tensor<f64>,
        fc2b: Tensor<f64>,
        sw: Tensor<f64>,
        sb: Tensor<f64>,
    }

    impl Owned {
        fn zeros(c: usize, r: usize) -> Self {
            let h = cse_hidden(c, r);
            Owned {
                fc1w: Tensor::zeros(&[h, c]),
                fc1b: Tensor::zeros(&[h]),
                fc2w: Tensor::zeros(&[c, h]),
                fc2b: Tensor::zeros(&[c]),
                sw: Tensor::zeros(&[1, c, 1, 1]),
                sb: Tensor::zeros(&[1]),
            }
        }

        fn random(c: usize, r: usize, seed: u64) -> Self {
            let mut o = Owned::zeros(c, r);
            let mut k = seed as f64;
            for t in [
                &mut o.fc1w,
                &mut o.fc1b,
                &mut o.fc2w,
                &mut o.fc2b,
                &mut o.sw,
                &mut o.sb,
            ] {
                for v in &mut t.data {
                    k += 1.0;
                    *v = (k * 1.618).sin();
                }
            }
            o
        }

        fn group(&mut self, k: usize) -> &mut Tensor<f64> {
            match k {
                0 => &mut self.fc1w,
                1 => &mut self.fc1b,
                2 => &mut self.fc2w,
                3 => &mut self.fc2b,
                4 => &mut self.sw,
                _ => &mut self.sb,
            }
        }

        fn cse(&self) -> CseParams<'_, f64> {
            CseParams {
                fc1_weight: &self.fc1w,
                fc1_bias: &self.fc1b,
                fc2_weight: &self.fc2w,
                fc2_bias: &self.fc2b,
            }
        }

        fn sse(&self) -> SseParams<'_, f64> {
            SseParams {
                weight: &self.sw,
                bias: &self.sb,
            }
        }
    }

    fn wave(c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(
            c,
            h,
            w,
            (0..c * h * w)
                .map(|i| (i as f64 * 0.7).cos() * 2.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = Owned::random(4, 2, 1);
        let x = FeatureMap::zeros(4, 3, 3);
        assert!(cse_forward(&x, &p.cse())
            .unwrap()
            .data
            .iter()
            .all(|v| *v == 0.0));
        assert!(sse_forward(&x, &p.sse())
            .unwrap()
            .data
            .iter()
            .all(|v| *v == 0.0));
        assert!(scse_forward(&x, &p.cse(), &p.sse())
            .unwrap()
            .data
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn zero_weights_gate_at_one_half() {
        let p = Owned::zeros(1, 1);
        let x = FeatureMap::filled(1, 4, 4, 1.0);
        let c = cse_forward(&x, &p.cse()).unwrap();
        assert!(c.data.iter().all(|v| (*v - 0.5).abs() < 1e-15));
        let y = wave(1, 4, 4);
        let s = sse_forward(&y, &p.sse()).unwrap();
        for (a, b) in s.data.iter().zip(&y.data) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        let both = scse_forward(&y, &p.cse(), &p.sse()).unwrap();
        for (a, b) in both.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scse_is_sum_of_branches_and_bounded() {
        let p = Owned::random(6, 2, 3);
        let x = wave(6, 5, 4);
        let a = cse_forward(&x, &p.cse()).unwrap();
        let b = sse_forward(&x, &p.sse()).unwrap();
        let s = scse_forward(&x, &p.cse(), &p.sse()).unwrap();
        let bound = 2.0 * x.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..s.data.len() {
            assert!((s.data[i] - a.data[i] - b.data[i]).abs() < 1e-12);
            assert!(s.data[i].abs() <= bound);
        }
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let p = Owned::random(4, 2, 1);
        let x = wave(3, 2, 2);
        assert!(matches!(cse_forward(&x, &p.cse()), Err(Error::Shape(_))));
        assert!(matches!(sse_forward(&x, &p.sse()), Err(Error::Shape(_))));
    }

    #[test]
    fn hidden_width_clamps_to_one() {
        assert_eq!(cse_hidden(1, 2), 1);
        assert_eq!(cse_hidden(16, 2), 8);
        assert_eq!(cse_hidden(3, 16), 1);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = 3;
        let mut p = Owned::random(c, 1, 5);
        let x = wave(c, 3, 4);
        let proj = wave(c, 3, 4)
            .data
            .iter()
            .map(|v| v * 0.3 + 0.1)
            .collect::<Vec<_>>();
        let loss = |p: &Owned, x: &FeatureMap<f64>| -> f64 {
            let y = scse_forward(x, &p.cse(), &p.sse()).unwrap();
            y.data.iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = scse_forward_cached(&x, &p.cse(), &p.sse()).unwrap();
        let dout = FeatureMap::from_vec(c, 3, 4, proj.clone()).unwrap();
        let h = cse_hidden(c, 1);
        let mut g = Owned::zeros(c, 1);
        assert_eq!(g.fc1w.shape, [h, c]);
        let dx = scse_backward(
            &dout,
            &x,
            &cache,
            &p.cse(),
            &p.sse(),
            ScseGrads {
                fc1_weight: &mut g.fc1w.data,
                fc1_bias: &mut g.fc1b.data,
                fc2_weight: &mut g.fc2w.data,
                fc2_bias: &mut g.fc2b.data,
                sse_weight: &mut g.sw.data,
                sse_bias: &mut g.sb.data,
            },
        );
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6, "dx[{i}]");
        }
        let analytic: Vec<Vec<f64>> = vec![
            g.fc1w.data.clone(),
            g.fc1b.data.clone(),
            g.fc2w.data.clone(),
            g.fc2b.data.clone(),
            g.sw.data.clone(),
            g.sb.data.clone(),
        ];
        for (k, grad) in analytic.iter().enumerate() {
            for i in 0..grad.len() {
                let orig = p.group(k).data[i];
                p.group(k).data[i] = orig + eps;
                let up = loss(&p, &x);
                p.group(k).data[i] = orig - eps;
                let down = loss(&p, &x);
                p.group(k).data[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!((fd - grad[i]).abs() < 1e-6, "param group {k} index {i}");
            }
        }
    }
}
