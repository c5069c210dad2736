//! Convolution, pooling and resampling primitives with their backward passes.
//!
//! All activations are single images in `C x H x W` layout. Convolutions are
//! lowered to a GEMM over an im2col buffer, which is kept for the backward pass.

use crate::tensor::{FeatureMap, Scalar, Tensor};

/// Expands a `C x H x W` map into a `(C*9) x (H*W)` patch matrix for a
/// 3x3 kernel with one pixel of zero padding. Rows are ordered `(c, ky, kx)`.
pub(crate) fn im2col3<T: Scalar>(x: &FeatureMap<T>) -> Vec<T> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let src_plane = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ((ci * 3 + ky) * 3 + kx) * hw;
                let dst_plane = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut dst_plane[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatters a patch-matrix gradient back onto the map.
pub(crate) fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> FeatureMap<T> {
    let hw = h * w;
    let mut out = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        let dst_plane = out.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ((ci * 3 + ky) * 3 + kx) * hw;
                let src_plane = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &src_plane[y * w..(y + 1) * w];
                    let dst = &mut dst_plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
    out
}

/// Saved state of a convolution: its lowered input.
pub(crate) struct ConvCache<T> {
    pub cols: Vec<T>,
    pub in_shape: (usize, usize, usize),
    pub kernel: usize,
}

/// Same-padding convolution with kernel size 1 or 3. `weight` is
/// `[cout, cin, k, k]`, `bias` is `[cout]`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> (FeatureMap<T>, ConvCache<T>) {
    let cout = weight.shape[0];
    let kernel = weight.shape[2];
    let (cin, h, w) = x.shape();
    debug_assert_eq!(weight.shape[1], cin);
    let hw = h * w;
    let cols = if kernel == 3 {
        im2col3(x)
    } else {
        x.data.clone()
    };
    let kdim = cin * kernel * kernel;
    let mut out = FeatureMap::zeros(cout, h, w);
    for (o, b) in bias.data.iter().enumerate() {
        out.channel_mut(o).fill(*b);
    }
    T::gemm(
        cout,
        kdim,
        hw,
        T::one(),
        &weight.data,
        (kdim as isize, 1),
        &cols,
        (hw as isize, 1),
        T::one(),
        &mut out.data,
        (hw as isize, 1),
    );
    (
        out,
        ConvCache {
            cols,
            in_shape: (cin, h, w),
            kernel,
        },
    )
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub(crate) fn conv_backward<T: Scalar>(
    dout: &FeatureMap<T>,
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
    need_input_grad: bool,
) -> Option<FeatureMap<T>> {
    let (cin, h, w) = cache.in_shape;
    let hw = h * w;
    let cout = dout.channels;
    let kdim = cin * cache.kernel * cache.kernel;
    for (o, db) in dbias.data.iter_mut().enumerate() {
        *db += dout.channel(o).iter().copied().sum::<T>();
    }
    // dW += dout * cols^T
    T::gemm(
        cout,
        hw,
        kdim,
        T::one(),
        &dout.data,
        (hw as isize, 1),
        &cache.cols,
        (1, hw as isize),
        T::one(),
        &mut dweight.data,
        (kdim as isize, 1),
    );
    if !need_input_grad {
        return None;
    }
    // dcols = W^T * dout
    let mut dcols = vec![T::zero(); kdim * hw];
    T::gemm(
        kdim,
        cout,
        hw,
        T::one(),
        &weight.data,
        (1, kdim as isize),
        &dout.data,
        (hw as isize, 1),
        T::zero(),
        &mut dcols,
        (hw as isize, 1),
    );
    Some(if cache.kernel == 3 {
        col2im3(&dcols, cin, h, w)
    } else {
        FeatureMap {
            channels: cin,
            height: h,
            width: w,
            data: dcols,
        }
    })
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut FeatureMap<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by the positive region of the ReLU output.
pub(crate) fn relu_backward_inplace<T: Scalar>(grad: &mut FeatureMap<T>, out: &FeatureMap<T>) {
    for (g, o) in grad.data.iter_mut().zip(&out.data) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max-pool with stride 2. Returns the winning input index per output.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureMap::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = (ci * oh + oy) * ow + ox;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Scalar>(
    dout: &FeatureMap<T>,
    arg: &[u32],
    in_shape: (usize, usize, usize),
) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(in_shape.0, in_shape.1, in_shape.2);
    for (g, &i) in dout.data.iter().zip(arg) {
        dx.data[i as usize] += *g;
    }
    dx
}

/// Nearest-neighbour 2x up-sampling.
pub(crate) fn upsample2_forward<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = FeatureMap::zeros(c, oh, ow);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for oy in 0..oh {
            let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dout: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, oh, ow) = dout.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        let src = dout.channel(ci);
        let dst = dx.channel_mut(ci);
        for oy in 0..oh {
            let srow = &src[oy * ow..(oy + 1) * ow];
            let drow = &mut dst[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, g) in srow.iter().enumerate() {
                drow[ox / 2] += *g;
            }
        }
    }
    dx
}

/// Stacks `a` then `b` along the channel axis.
pub(crate) fn concat<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

pub(crate) fn split<T: Scalar>(
    x: FeatureMap<T>,
    first_channels: usize,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let mut data = x.data;
    let cut = first_channels * x.height * x.width;
    let rest = data.split_off(cut);
    (
        FeatureMap {
            channels: first_channels,
            height: x.height,
            width: x.width,
            data,
        },
        FeatureMap {
            channels: x.channels - first_channels,
            height: x.height,
            width: x.width,
            data: rest,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        let data = (0..c * h * w)
            .map(|i| ((i * 7919) % 23) as f64 - 11.0)
            .collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    /// Direct-loop 3x3 same convolution.
    fn naive_conv3(x: &FeatureMap<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> FeatureMap<f64> {
        let (cin, h, wd) = x.shape();
        let cout = w.shape[0];
        let mut out = FeatureMap::zeros(cout, h, wd);
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data[o];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data[((o * cin + ci) * 3 + ky) * 3 + kx]
                                    * x.at(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.data[(o * h + y) * wd + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_direct_loops() {
        let x = ramp(2, 5, 4);
        let w = Tensor::from_vec(
            &[3, 2, 3, 3],
            (0..54).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let (y, _) = conv_forward(&x, &w, &b);
        let want = naive_conv3(&x, &w, &b);
        for (a, e) in y.data.iter().zip(&want.data) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)>
        let x = ramp(3, 4, 6);
        let cols = im2col3(&x);
        let g: Vec<f64> = (0..cols.len())
            .map(|i| ((i * 31) % 17) as f64 - 8.0)
            .collect();
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = col2im3(&g, 3, 4, 6);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pool_and_upsample_shapes_and_routing() {
        let x = ramp(2, 4, 4);
        let (p, arg) = maxpool2_forward(&x);
        assert_eq!(p.shape(), (2, 2, 2));
        for (o, &i) in p.data.iter().zip(&arg) {
            assert_eq!(*o, x.data[i as usize]);
        }
        let up = upsample2_forward(&p);
        assert_eq!(up.shape(), (2, 4, 4));
        assert_eq!(up.at(1, 3, 2), p.at(1, 1, 1));
        let back = upsample2_backward(&FeatureMap::filled(2, 4, 4, 1.0));
        assert!(back.data.iter().all(|v| *v == 4.0));
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = ramp(2, 3, 3);
        let b = ramp(1, 3, 3);
        let (a2, b2) = split(concat(&a, &b), 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
