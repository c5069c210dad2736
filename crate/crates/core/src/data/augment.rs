use rand::Rng as _;

use super::{BinaryMask, ImageSample};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, Scalar};

/// Horizontal flip, then vertical flip, then `rot90` quarter turns clockwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GeometricTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: u8,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Each flip with probability 1/2, rotation uniform over {0, 90, 180, 270}.
    pub fn sample(rng: &mut Rng) -> Self {
        GeometricTransform {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            rot90: rng.random_range(0..4u8),
        }
    }

    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize) {
        if self.rot90 % 2 == 1 {
            (width, height)
        } else {
            (height, width)
        }
    }

    /// Source pixel `(row, col)` in the input for output pixel `(r, c)`.
    pub fn source(&self, r: usize, c: usize, height: usize, width: usize) -> (usize, usize) {
        // Undo the rotation first, then the flips.
        let (mut r, mut c) = (r, c);
        let (mut h, mut w) = self.output_shape(height, width);
        for _ in 0..self.rot90 % 4 {
            // A clockwise quarter turn sends (r, c) of an h' x w' map to
            // (c, h' - 1 - r); the current map is w' x h', so h' == w here.
            let (pr, pc) = (w - 1 - c, r);
            r = pr;
            c = pc;
            std::mem::swap(&mut h, &mut w);
        }
        if self.vflip {
            r = height - 1 - r;
        }
        if self.hflip {
            c = width - 1 - c;
        }
        (r, c)
    }

    fn remap(&self, height: usize, width: usize) -> (usize, usize, Vec<usize>) {
        let (oh, ow) = self.output_shape(height, width);
        let mut idx = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(r, c, height, width);
                idx.push(sr * width + sc);
            }
        }
        (oh, ow, idx)
    }

    pub fn apply_map<T: Scalar>(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        if *self == Self::identity() {
            return x.clone();
        }
        let (oh, ow, idx) = self.remap(x.height, x.width);
        let mut out = FeatureMap::zeros(x.channels, oh, ow);
        for ch in 0..x.channels {
            let src = x.channel(ch);
            for (d, &i) in out.channel_mut(ch).iter_mut().zip(&idx) {
                *d = src[i];
            }
        }
        out
    }

    pub fn apply_mask(&self, m: &BinaryMask) -> BinaryMask {
        let (oh, ow, idx) = self.remap(m.height(), m.width());
        let values = idx.iter().map(|&i| m.values()[i]).collect();
        BinaryMask::new(oh, ow, values).expect("permutation of a valid mask")
    }
}

/// Random flips and quarter-turn rotation applied identically to pixels and mask.
pub fn augment(sample: &ImageSample, rng: &mut Rng) -> ImageSample {
    let t = GeometricTransform::sample(rng);
    ImageSample {
        id: sample.id.clone(),
        patient_id: sample.patient_id.clone(),
        pixels: t.apply_map(&sample.pixels),
        mask: sample.mask.as_ref().map(|m| t.apply_mask(m)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn sample(h: usize, w: usize) -> ImageSample {
        let px: Vec<f32> = (0..3 * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        let m: Vec<u8> = (0..h * w).map(|i| u8::from((i * 7) % 5 < 2)).collect();
        ImageSample::new(
            "s",
            "p",
            FeatureMap::from_vec(3, h, w, px).unwrap(),
            Some(BinaryMask::new(h, w, m).unwrap()),
        )
        .unwrap()
    }

    /// Where input pixel (r, c) lands, computed by rotating the pixel centre
    /// about the image centre in real coordinates.
    fn forward_oracle(
        t: &GeometricTransform,
        r: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> (usize, usize) {
        let mut x = c as f64 + 0.5 - w as f64 / 2.0;
        let mut y = r as f64 + 0.5 - h as f64 / 2.0;
        if t.hflip {
            x = -x;
        }
        if t.vflip {
            y = -y;
        }
        let (mut ch, mut cw) = (h as f64, w as f64);
        for _ in 0..t.rot90 {
            // Clockwise on screen (y down): (x, y) -> (-y, x).
            let nx = -y;
            let ny = x;
            x = nx;
            y = ny;
            std::mem::swap(&mut ch, &mut cw);
        }
        (
            (y + ch / 2.0 - 0.5).round() as usize,
            (x + cw / 2.0 - 0.5).round() as usize,
        )
    }

    #[test]
    fn identity_leaves_sample_unchanged() {
        let s = sample(4, 6);
        let t = GeometricTransform::identity();
        assert_eq!(t.apply_map(&s.pixels), s.pixels);
        assert_eq!(
            &t.apply_mask(s.mask.as_ref().unwrap()),
            s.mask.as_ref().unwrap()
        );
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = sample(5, 5);
        let t = GeometricTransform {
            hflip: true,
            ..Default::default()
        };
        assert_eq!(t.apply_map(&t.apply_map(&s.pixels)), s.pixels);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let s = sample(4, 6);
        let q = GeometricTransform {
            rot90: 1,
            ..Default::default()
        };
        let mut x = s.pixels.clone();
        for _ in 0..4 {
            x = q.apply_map(&x);
        }
        assert_eq!(x, s.pixels);
    }

    proptest! {
        #[test]
        fn transform_matches_coordinate_oracle(h in 1usize..7, w in 1usize..7, hf: bool, vf: bool, rot in 0u8..4) {
            let t = GeometricTransform { hflip: hf, vflip: vf, rot90: rot };
            let s = sample(h, w);
            let px = t.apply_map(&s.pixels);
            let m = t.apply_mask(s.mask.as_ref().unwrap());
            for r in 0..h {
                for c in 0..w {
                    let (orow, ocol) = forward_oracle(&t, r, c, h, w);
                    prop_assert_eq!(m.get(orow, ocol), s.mask.as_ref().unwrap().get(r, c));
                    for ch in 0..3 {
                        prop_assert_eq!(px.at(ch, orow, ocol), s.pixels.at(ch, r, c));
                    }
                }
            }
        }

        #[test]
        fn augment_keeps_mask_aligned(seed in any::<u64>()) {
            let s = sample(6, 6);
            let mut a = rng::stream(seed, &[]);
            let mut b = rng::stream(seed, &[]);
            let out = augment(&s, &mut a);
            let t = GeometricTransform::sample(&mut b);
            prop_assert_eq!(out.mask.unwrap(), t.apply_mask(s.mask.as_ref().unwrap()));
            let mut before: Vec<u32> = s.pixels.data.iter().map(|v| v.to_bits()).collect();
            let mut after: Vec<u32> = out.pixels.data.iter().map(|v| v.to_bits()).collect();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
        }
    }
}
