//! Overlap and distance metrics on binary masks.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{BinaryMask, ImageSample};
use crate::error::{Error, Result};
use crate::trainer::{predict, Checkpoint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height() == b.height() && a.width() == b.width() {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "masks are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )))
    }
}

/// Pixel counts with foreground as the positive class.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    check_shapes(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2 tp / (2 tp + fp + fn)`; 1 when both masks are empty.
pub fn dice_score(c: &Confusion) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn iou_fg(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

pub fn iou_bg(c: &Confusion) -> f64 {
    ratio(c.tn, c.tn + c.fp + c.fn_)
}

/// Mean of foreground and background IoU.
pub fn miou(c: &Confusion) -> f64 {
    0.5 * (iou_fg(c) + iou_bg(c))
}

pub fn sensitivity(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn precision(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

const FAR: f64 = 1e20;

/// Squared distance transform of a sampled function along one line.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `mask` (separable lower-envelope algorithm).
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut grid: Vec<f64> = mask
        .values()
        .iter()
        .map(|&m| if m == 1 { 0.0 } else { FAR })
        .collect();
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn directed(a: &BinaryMask, dt_b: &[f64]) -> f64 {
    a.values()
        .iter()
        .zip(dt_b)
        .filter(|(m, _)| **m == 1)
        .map(|(_, d)| *d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance in pixels.
///
/// `None` when exactly one mask is empty; 0 when both are.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    check_shapes(a, b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let ab = directed(a, &squared_distance_transform(b));
    let ba = directed(b, &squared_distance_transform(a));
    Ok(Some(ab.max(ba)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub miou: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub hd: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        let c = confusion(pred, gt)?;
        Ok(ImageMetrics {
            id: id.into(),
            dice: dice_score(&c),
            iou_fg: iou_fg(&c),
            iou_bg: iou_bg(&c),
            miou: miou(&c),
            sensitivity: sensitivity(&c),
            precision: precision(&c),
            hd: hausdorff(pred, gt)?,
        })
    }
}

/// Column means over images; `hd` averages only the images where it is defined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub dice: f64,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub miou: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub hd: Option<f64>,
    /// Images left out of the `hd` mean.
    pub hd_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
}

pub const REPORT_HEADER: &str = "id,dice,iou_fg,iou_bg,miou,sensitivity,precision,hd";

pub(crate) fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

pub(crate) fn fmt_hd(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_value)
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let hds: Vec<f64> = per_image.iter().filter_map(|m| m.hd).collect();
        let hd_excluded = per_image.len() - hds.len();
        if hd_excluded > 0 {
            log::info!("hausdorff undefined for {hd_excluded} image(s); excluded from the mean");
        }
        let aggregate = Aggregate {
            dice: mean(|m| m.dice),
            iou_fg: mean(|m| m.iou_fg),
            iou_bg: mean(|m| m.iou_bg),
            miou: mean(|m| m.miou),
            sensitivity: mean(|m| m.sensitivity),
            precision: mean(|m| m.precision),
            hd: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
            hd_excluded,
        };
        MetricReport {
            per_image,
            aggregate,
        }
    }

    /// One row per image, then an `AGGREGATE` row. Undefined distances are `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        let mut line = |id: &str, v: [f64; 6], hd: Option<f64>| {
            let vals: Vec<String> = v.iter().map(|x| fmt_value(*x)).collect();
            let _ = writeln!(s, "{id},{},{}", vals.join(","), fmt_hd(hd));
        };
        for m in &self.per_image {
            line(
                &m.id,
                [
                    m.dice,
                    m.iou_fg,
                    m.iou_bg,
                    m.miou,
                    m.sensitivity,
                    m.precision,
                ],
                m.hd,
            );
        }
        let a = &self.aggregate;
        line(
            "AGGREGATE",
            [
                a.dice,
                a.iou_fg,
                a.iou_bg,
                a.miou,
                a.sensitivity,
                a.precision,
            ],
            a.hd,
        );
        s
    }
}

/// Scores predicted masks against ground truth: `(id, prediction, truth)`.
pub fn evaluate_masks(items: &[(String, BinaryMask, BinaryMask)]) -> Result<MetricReport> {
    let per_image = items
        .par_iter()
        .map(|(id, p, g)| ImageMetrics::compute(id.clone(), p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(per_image))
}

/// Teacher predictions on `val`, scored against their masks.
pub fn evaluate(checkpoint: &Checkpoint, val: &[ImageSample]) -> Result<MetricReport> {
    let per_image = val
        .par_iter()
        .map(|s| {
            let gt = s.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("validation sample {} has no mask", s.id))
            })?;
            let pred = predict(checkpoint, &s.pixels)?;
            ImageMetrics::compute(s.id.clone(), &pred, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(per_image))
}
