//! Polygon annotations (a LabelMe-compatible JSON subset) and their rasterization.

use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub label: String,
    /// Vertices as `[x, y]` in pixel units, x to the right and y down.
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<Shape>,
}

impl PolygonAnnotation {
    pub fn validate(&self) -> Result<()> {
        let invalid = |path: String, message: String| Error::Annotation { path, message };
        if self.height == 0 || self.width == 0 {
            return Err(invalid(
                "height/width".into(),
                format!("must be positive, got {}x{}", self.height, self.width),
            ));
        }
        for (i, shape) in self.shapes.iter().enumerate() {
            if shape.points.len() < 3 {
                return Err(invalid(
                    format!("shapes[{i}].points"),
                    format!(
                        "polygon needs at least 3 vertices, got {}",
                        shape.points.len()
                    ),
                ));
            }
            for (j, [x, y]) in shape.points.iter().enumerate() {
                let inside = x.is_finite()
                    && y.is_finite()
                    && (0.0..=self.width as f64).contains(x)
                    && (0.0..=self.height as f64).contains(y);
                if !inside {
                    return Err(invalid(
                        format!("shapes[{i}].points[{j}]"),
                        format!(
                            "vertex ({x}, {y}) outside [0,{}]x[0,{}]",
                            self.width, self.height
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses and validates an annotation document.
pub fn load_annotation(text: &str) -> Result<PolygonAnnotation> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let ann: PolygonAnnotation =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Annotation {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    ann.validate()?;
    Ok(ann)
}

/// X coordinates where the polygon's edges cross the horizontal line `y = yc`.
///
/// An edge counts when exactly one endpoint lies strictly above the line
/// (half-open rule), so vertices on the line are not double counted.
fn crossings(points: &[[f64; 2]], yc: f64, out: &mut Vec<f64>) {
    let n = points.len();
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = points[i];
        let [xj, yj] = points[j];
        if (yi > yc) != (yj > yc) {
            out.push((xj - xi) * (yc - yi) / (yj - yi) + xi);
        }
        j = i;
    }
}

/// Pixel `(r, c)` is foreground iff its centre `(c + 0.5, r + 0.5)` lies inside
/// any polygon under the even-odd rule.
pub fn rasterize_polygons(ann: &PolygonAnnotation) -> Result<BinaryMask> {
    ann.validate()?;
    let mut mask = BinaryMask::zeros(ann.height, ann.width);
    let mut xs = Vec::new();
    for shape in &ann.shapes {
        for r in 0..ann.height {
            let yc = r as f64 + 0.5;
            xs.clear();
            crossings(&shape.points, yc, &mut xs);
            if xs.is_empty() {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            for c in 0..ann.width {
                let xc = c as f64 + 0.5;
                // Crossings strictly to the right of the centre.
                let right = xs.len() - xs.partition_point(|x| *x <= xc);
                if right % 2 == 1 {
                    mask.set(r, c, true);
                }
            }
        }
    }
    Ok(mask)
}
