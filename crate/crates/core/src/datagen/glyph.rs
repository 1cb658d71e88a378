use serde::{Deserialize, Serialize};

use super::DataError;

/// Shape drawn for one in-distribution class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum ShapeFamily {
    /// Line segment through the center at the given angle (degrees).
    Bar { angle_deg: f64 },
    Corner,
    Cross,
    Ring,
    Tee,
    Wedge,
}

impl ShapeFamily {
    /// Binary template on a `side x side` canvas.
    pub fn render(&self, side: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                // pixel center in unit coordinates, y pointing down
                let x = (col as f64 + 0.5) / side as f64;
                let y = (row as f64 + 0.5) / side as f64;
                out.push(if self.covers(x, y) { 1.0 } else { 0.0 });
            }
        }
        out
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        const W: f64 = 0.07;
        let in_box = |x0: f64, x1: f64, y0: f64, y1: f64| x >= x0 && x <= x1 && y >= y0 && y <= y1;
        match *self {
            ShapeFamily::Bar { angle_deg } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let (dx, dy) = (x - 0.5, y - 0.5);
                let along = dx * c - dy * s;
                let across = dx * s + dy * c;
                along.abs() <= 0.4 && across.abs() <= W
            }
            ShapeFamily::Corner => {
                in_box(0.2, 0.2 + 2.0 * W, 0.2, 0.8) || in_box(0.2, 0.8, 0.8 - 2.0 * W, 0.8)
            }
            ShapeFamily::Cross => {
                in_box(0.5 - W, 0.5 + W, 0.2, 0.8) || in_box(0.2, 0.8, 0.5 - W, 0.5 + W)
            }
            ShapeFamily::Ring => {
                let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
                (0.25..=0.36).contains(&r)
            }
            ShapeFamily::Tee => {
                in_box(0.2, 0.8, 0.2, 0.2 + 2.0 * W) || in_box(0.5 - W, 0.5 + W, 0.2, 0.8)
            }
            // right triangle with the right angle at the lower-left
            ShapeFamily::Wedge => in_box(0.2, 0.8, 0.2, 0.8) && y >= x,
        }
    }
}

/// Class glyphs plus per-pixel Gaussian noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub families: Vec<ShapeFamily>,
    pub noise: f64,
}

impl GlyphSpec {
    /// Bar, corner, cross, ring, tee and wedge, followed by further bar
    /// orientations when more than six classes are requested.
    pub fn standard(classes: usize, noise: f64) -> Result<Self, DataError> {
        let mut families = vec![
            ShapeFamily::Bar { angle_deg: 45.0 },
            ShapeFamily::Corner,
            ShapeFamily::Cross,
            ShapeFamily::Ring,
            ShapeFamily::Tee,
            ShapeFamily::Wedge,
        ];
        for angle_deg in [0.0, 90.0, 135.0, 22.5, 67.5, 112.5, 157.5] {
            families.push(ShapeFamily::Bar { angle_deg });
        }
        if classes > families.len() {
            return Err(DataError::InvalidSpec(format!(
                "at most {} standard glyph classes, {classes} requested",
                families.len()
            )));
        }
        families.truncate(classes);
        let spec = Self { families, noise };
        spec.validate()?;
        Ok(spec)
    }

    pub fn classes(&self) -> usize {
        self.families.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes() < 2 {
            return Err(DataError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.classes()
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "noise level must be finite and non-negative, got {}",
                self.noise
            )));
        }
        let templates: Vec<Vec<f64>> = self
            .families
            .iter()
            .map(|f| f.render(super::IMAGE_SIDE))
            .collect();
        for i in 0..templates.len() {
            for j in 0..i {
                if templates[i] == templates[j] {
                    return Err(DataError::InvalidSpec(format!(
                        "classes {j} and {i} render identically"
                    )));
                }
            }
        }
        Ok(())
    }
}
