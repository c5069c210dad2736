//! Synthetic capsule-endoscopy-like frames with bleeding masks.
//!
//! Each patient gets a persistent style: mucosa colour, fold texture,
//! vignetting, lesion colour and opacity, and how much debris shows up. A
//! frame composites 0-3 perturbed-ellipse lesions over the textured
//! background, then adds distractors (bubbles, debris, specular glints) that
//! are not part of the mask. Pixel values are quantized to 8 bits so that a
//! dataset written to PNG and read back is identical to the in-memory one.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinaryMask, ImageSample};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub seed: u64,
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub side: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            seed: 0,
            n_patients: 7,
            images_per_patient: 40,
            side: 64,
        }
    }
}

impl SyntheticParams {
    pub fn generate(&self) -> Result<Vec<ImageSample>> {
        generate_synthetic(
            self.seed,
            self.n_patients,
            self.images_per_patient,
            self.side,
        )
    }
}

type Rgb = [f64; 3];

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

struct PatientStyle {
    mucosa: Rgb,
    waves: Vec<Wave>,
    fold_freq: f64,
    fold_angle: f64,
    fold_depth: f64,
    vignette: f64,
    lesion: Rgb,
    lesion_alpha: (f64, f64),
    debris_rate: f64,
    debris: Rgb,
}

fn uniform(r: &mut Rng, lo: f64, hi: f64) -> f64 {
    r.random_range(lo..hi)
}

impl PatientStyle {
    fn draw(r: &mut Rng) -> Self {
        let mucosa = [
            uniform(r, 0.62, 0.86),
            uniform(r, 0.36, 0.56),
            uniform(r, 0.20, 0.40),
        ];
        let waves = (0..r.random_range(3..6))
            .map(|_| Wave {
                fx: uniform(r, -5.0, 5.0),
                fy: uniform(r, -5.0, 5.0),
                phase: uniform(r, 0.0, TAU),
                amp: uniform(r, 0.02, 0.06),
            })
            .collect();
        let lesion = [
            uniform(r, 0.42, 0.72),
            uniform(r, 0.03, 0.16),
            uniform(r, 0.03, 0.14),
        ];
        let alpha_lo = uniform(r, 0.55, 0.85);
        PatientStyle {
            mucosa,
            waves,
            fold_freq: uniform(r, 1.5, 4.0),
            fold_angle: uniform(r, 0.0, TAU),
            fold_depth: uniform(r, 0.05, 0.20),
            vignette: uniform(r, 0.25, 0.55),
            lesion,
            lesion_alpha: (alpha_lo, (alpha_lo + 0.2).min(1.0)),
            debris_rate: uniform(r, 0.2, 1.2),
            debris: [
                uniform(r, 0.45, 0.70),
                uniform(r, 0.40, 0.60),
                uniform(r, 0.10, 0.25),
            ],
        }
    }
}

/// Perturbed ellipse: `rho < 1 + sum_k a_k cos(k phi + psi_k)` in the blob frame.
struct Blob {
    cx: f64,
    cy: f64,
    ra: f64,
    rb: f64,
    cos: f64,
    sin: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn draw(r: &mut Rng, side: f64, min_r: f64, max_r: f64) -> Self {
        let angle = uniform(r, 0.0, TAU);
        Blob {
            cx: uniform(r, 0.12 * side, 0.88 * side),
            cy: uniform(r, 0.12 * side, 0.88 * side),
            ra: uniform(r, min_r, max_r),
            rb: uniform(r, min_r, max_r),
            cos: angle.cos(),
            sin: angle.sin(),
            harmonics: (2..=4)
                .map(|k| (k as f64, uniform(r, -0.18, 0.18), uniform(r, 0.0, TAU)))
                .collect(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.ra;
        let v = (-dx * self.sin + dy * self.cos) / self.rb;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let edge = 1.0
            + self
                .harmonics
                .iter()
                .map(|(k, a, p)| a * (k * phi + p).cos())
                .sum::<f64>();
        rho < edge
    }
}

fn render(style: &PatientStyle, r: &mut Rng, side: usize) -> (Vec<Rgb>, BinaryMask) {
    let s = side as f64;
    let scale = s / 64.0;
    let brightness = uniform(r, 0.85, 1.12);
    let tint = [
        uniform(r, -0.03, 0.03),
        uniform(r, -0.03, 0.03),
        uniform(r, -0.03, 0.03),
    ];
    let phase_shift = uniform(r, 0.0, TAU);
    let fold_phase = uniform(r, 0.0, TAU);
    let (fc, fs) = (style.fold_angle.cos(), style.fold_angle.sin());
    let pixel_noise = Normal::new(0.0, 0.012).expect("valid sigma");

    let shade = |x: f64, y: f64| -> f64 {
        let (u, v) = (x / s, y / s);
        let tex: f64 = style
            .waves
            .iter()
            .map(|w| w.amp * (TAU * (w.fx * u + w.fy * v) + w.phase + phase_shift).sin())
            .sum();
        let t = (TAU * style.fold_freq * (u * fc + v * fs) + fold_phase).sin();
        let fold = style.fold_depth * (-(t * t) / 0.08).exp();
        let (du, dv) = (u - 0.5, v - 0.5);
        let vig = 1.0 - style.vignette * (du * du + dv * dv) * 2.0;
        (1.0 + tex - fold) * vig * brightness
    };

    let mut img: Vec<Rgb> = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let k = shade(x as f64 + 0.5, y as f64 + 0.5);
            img.push([
                style.mucosa[0] * k + tint[0],
                style.mucosa[1] * k + tint[1],
                style.mucosa[2] * k + tint[2],
            ]);
        }
    }

    // Lesions: 0-3, capped so the foreground stays below 45% of the frame.
    let count = match r.random_range(0..20) {
        0..=2 => 0,
        3..=10 => 1,
        11..=16 => 2,
        _ => 3,
    };
    let mut mask = BinaryMask::zeros(side, side);
    for _ in 0..count {
        let blob = Blob::draw(r, s, 3.0 * scale, 11.0 * scale);
        let alpha = uniform(r, style.lesion_alpha.0, style.lesion_alpha.1);
        let shade_var = uniform(r, 0.85, 1.1);
        let covered: Vec<usize> = (0..side * side)
            .filter(|&i| blob.contains((i % side) as f64 + 0.5, (i / side) as f64 + 0.5))
            .collect();
        let new_fg = covered.iter().filter(|&&i| mask.values()[i] == 0).count();
        if (mask.foreground() + new_fg) as f64 > 0.45 * (side * side) as f64 {
            continue;
        }
        for i in covered {
            let (x, y) = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
            let k = shade(x, y) * shade_var;
            for (ch, px) in img[i].iter_mut().enumerate() {
                *px = (1.0 - alpha) * *px + alpha * style.lesion[ch] * k;
            }
            mask.set(i / side, i % side, true);
        }
    }

    // Distractors outside the mask semantics: debris, bubbles, glints.
    let n_debris = (style.debris_rate * uniform(r, 0.0, 2.5)) as usize;
    for _ in 0..n_debris {
        let blob = Blob::draw(r, s, 1.5 * scale, 4.0 * scale);
        let alpha = uniform(r, 0.4, 0.8);
        for (i, px) in img.iter_mut().enumerate() {
            if blob.contains((i % side) as f64 + 0.5, (i / side) as f64 + 0.5) {
                for ch in 0..3 {
                    px[ch] = (1.0 - alpha) * px[ch] + alpha * style.debris[ch];
                }
            }
        }
    }
    for _ in 0..r.random_range(0..3) {
        let (cx, cy) = (uniform(r, 0.0, s), uniform(r, 0.0, s));
        let rad = uniform(r, 2.0, 5.0) * scale;
        for (i, px) in img.iter_mut().enumerate() {
            let d = (((i % side) as f64 + 0.5 - cx).powi(2)
                + ((i / side) as f64 + 0.5 - cy).powi(2))
            .sqrt();
            let ring = (-((d - rad) / (0.6 * scale)).powi(2)).exp() * 0.35;
            for v in px.iter_mut() {
                *v += ring * (1.0 - *v);
            }
        }
    }
    for _ in 0..r.random_range(0..4) {
        let (cx, cy) = (uniform(r, 0.0, s), uniform(r, 0.0, s));
        let rad = uniform(r, 0.8, 2.0) * scale;
        for (i, px) in img.iter_mut().enumerate() {
            let d2 =
                ((i % side) as f64 + 0.5 - cx).powi(2) + ((i / side) as f64 + 0.5 - cy).powi(2);
            let glint = (-d2 / (rad * rad)).exp() * 0.8;
            for v in px.iter_mut() {
                *v += glint * (1.0 - *v);
            }
        }
    }

    for px in &mut img {
        for v in px.iter_mut() {
            *v += pixel_noise.sample(r);
        }
    }
    (img, mask)
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Deterministic synthetic dataset: `n_patients * images_per_patient` frames
/// of `side x side` pixels. Ids are `p{patient}_{index:04}`, patients `p{patient}`.
pub fn generate_synthetic(
    seed: u64,
    n_patients: usize,
    images_per_patient: usize,
    side: usize,
) -> Result<Vec<ImageSample>> {
    if side < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic frames need side >= 32, got {side}"
        )));
    }
    let mut out = Vec::with_capacity(n_patients * images_per_patient);
    for p in 0..n_patients {
        let style = PatientStyle::draw(&mut rng::stream(seed, &[rng::tag("patient"), p as u64]));
        for i in 0..images_per_patient {
            let mut r = rng::stream(seed, &[rng::tag("frame"), p as u64, i as u64]);
            let (img, mask) = render(&style, &mut r, side);
            let plane = side * side;
            let mut data = vec![0.0f32; 3 * plane];
            for (k, px) in img.iter().enumerate() {
                for ch in 0..3 {
                    data[ch * plane + k] = quantize(px[ch]);
                }
            }
            out.push(ImageSample::new(
                format!("p{p}_{i:04}"),
                format!("p{p}"),
                FeatureMap::from_vec(3, side, side, data)?,
                Some(mask),
            )?);
        }
    }
    Ok(out)
}
