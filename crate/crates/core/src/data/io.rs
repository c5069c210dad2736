//! PNG images and masks, and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.json`, `images/<id>.png` (8-bit RGB)
//! and `masks/<id>.png` (8-bit grey, 255 = foreground).

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_annotation, rasterize_polygons, BinaryMask, ImageSample, SyntheticParams};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer
        .write_image_data(data)
        .map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))?;
    Ok(())
}

/// Decodes any PNG to 8-bit samples; returns `(width, height, channels, data)`.
fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(image_err(path, "unexpanded palette image")),
    };
    Ok((info.width as usize, info.height as usize, channels, buf))
}

pub fn write_rgb_png(path: &Path, pixels: &FeatureMap<f32>) -> Result<()> {
    if pixels.channels != 3 {
        return Err(Error::shape(format!(
            "RGB image needs 3 channels, got {}",
            pixels.channels
        )));
    }
    let plane = pixels.plane();
    let mut data = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            data.push((pixels.data[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_png(
        path,
        pixels.width,
        pixels.height,
        png::ColorType::Rgb,
        &data,
    )
}

/// Reads an 8-bit colour image as `3 x H x W` values in [0, 1].
pub fn read_rgb_png(path: &Path) -> Result<FeatureMap<f32>> {
    let (w, h, ch, buf) = read_png(path)?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let src = if ch >= 3 { c } else { 0 };
            data[c * plane + i] = buf[i * ch + src] as f32 / 255.0;
        }
    }
    FeatureMap::from_vec(3, h, w, data)
}

/// Writes a mask with foreground stored as 255.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask.values().iter().map(|v| v * 255).collect();
    write_png(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        &data,
    )
}

/// Reads a mask; any first-channel value above 127 is foreground.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let (w, h, ch, buf) = read_png(path)?;
    let values = (0..w * h).map(|i| u8::from(buf[i * ch] > 127)).collect();
    BinaryMask::new(h, w, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub patient_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Present when the frames were produced by the synthetic generator.
    pub generator: Option<SyntheticParams>,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub const VERSION: u32 = 1;

    pub fn val_set(&self) -> BTreeSet<String> {
        self.val_patients.iter().cloned().collect()
    }
}

pub fn write_dataset(
    dir: &Path,
    samples: &[ImageSample],
    manifest: &DatasetManifest,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        write_rgb_png(&dir.join("images").join(format!("{}.png", s.id)), &s.pixels)?;
        if let Some(m) = &s.mask {
            write_mask_png(&dir.join("masks").join(format!("{}.png", s.id)), m)?;
        }
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every sample listed in the manifest; masks are attached when present.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ImageSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let pixels = read_rgb_png(&dir.join("images").join(format!("{}.png", e.id)))?;
        let mask_path = dir.join("masks").join(format!("{}.png", e.id));
        let mask = if mask_path.exists() {
            Some(read_mask_png(&mask_path)?)
        } else {
            None
        };
        samples.push(ImageSample::new(
            e.id.clone(),
            e.patient_id.clone(),
            pixels,
            mask,
        )?);
    }
    Ok((manifest, samples))
}

/// Patient id of an externally supplied frame: the file stem up to its last `_`.
pub fn patient_from_stem(stem: &str) -> &str {
    match stem.rfind('_') {
        Some(i) if i > 0 => &stem[..i],
        _ => stem,
    }
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Where ground truth for external frames comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelSource {
    /// `<dir>/<stem>.png` masks.
    Masks(PathBuf),
    /// `<dir>/<stem>.json` polygon annotations.
    Annotations(PathBuf),
}

/// Loads externally supplied frames. Every frame needs ground truth.
pub fn read_external(image_dir: &Path, labels: &LabelSource) -> Result<Vec<ImageSample>> {
    let label_dir = match labels {
        LabelSource::Masks(d) | LabelSource::Annotations(d) => d,
    };
    if !label_dir.is_dir() {
        return Err(Error::io(
            label_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "label directory not found"),
        ));
    }
    let mut out = Vec::new();
    for path in sorted_pngs(image_dir)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| image_err(&path, "non UTF-8 file name"))?
            .to_string();
        let pixels = read_rgb_png(&path)?;
        let mask = match labels {
            LabelSource::Masks(d) => read_mask_png(&d.join(format!("{stem}.png")))?,
            LabelSource::Annotations(d) => {
                let p = d.join(format!("{stem}.json"));
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let ann = load_annotation(&text).map_err(|e| match e {
                    Error::Annotation { path, message } => Error::Annotation {
                        path: format!("{}: {path}", p.display()),
                        message,
                    },
                    other => other,
                })?;
                rasterize_polygons(&ann)?
            }
        };
        let patient = patient_from_stem(&stem).to_string();
        out.push(ImageSample::new(stem, patient, pixels, Some(mask))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn png_round_trip_preserves_quantized_frames() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(1, 1, 2, 32).unwrap();
        let manifest = DatasetManifest {
            version: DatasetManifest::VERSION,
            generator: None,
            train_patients: vec!["p0".into()],
            val_patients: vec![],
            samples: samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    patient_id: s.patient_id.clone(),
                })
                .collect(),
        };
        write_dataset(dir.path(), &samples, &manifest).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back, samples);
    }

    #[test]
    fn mask_threshold_and_storage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_png(&p, 3, 1, png::ColorType::Grayscale, &[0, 127, 128]).unwrap();
        assert_eq!(read_mask_png(&p).unwrap().values(), &[0, 0, 1]);
        let m = BinaryMask::new(1, 2, vec![1, 0]).unwrap();
        write_mask_png(&p, &m).unwrap();
        let (_, _, _, raw) = read_png(&p).unwrap();
        assert_eq!(raw, vec![255, 0]);
    }

    #[test]
    fn patient_ids_from_file_names() {
        assert_eq!(
            patient_from_stem("04a78ef00c5245e0_10291"),
            "04a78ef00c5245e0"
        );
        assert_eq!(patient_from_stem("p0_0003"), "p0");
        assert_eq!(patient_from_stem("frame"), "frame");
    }

    #[test]
    fn missing_label_dir_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let err = read_external(dir.path(), &LabelSource::Masks(missing.clone())).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
