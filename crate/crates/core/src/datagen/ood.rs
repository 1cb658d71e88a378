use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Out-of-distribution image families. None of them draws a glyph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodKind {
    Checkerboard,
    Blob,
    UniformNoise,
    /// Sinusoidal stripes at angles away from the pixel grid axes and
    /// diagonals.
    StripesOffgrid,
}

impl OodKind {
    pub const ALL: [OodKind; 4] = [
        OodKind::Checkerboard,
        OodKind::Blob,
        OodKind::UniformNoise,
        OodKind::StripesOffgrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OodKind::Checkerboard => "checkerboard",
            OodKind::Blob => "blob",
            OodKind::UniformNoise => "uniform-noise",
            OodKind::StripesOffgrid => "stripes-offgrid",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }

    pub(crate) fn render<R: Rng>(self, side: usize, rng: &mut R) -> Vec<f64> {
        let n = side * side;
        let coords = (0..n).map(move |k| ((k % side) as f64, (k / side) as f64));
        match self {
            OodKind::Checkerboard => {
                let cell = rng.gen_range(2..=4usize);
                let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
                let low = rng.gen_range(0.0..0.3);
                let high = rng.gen_range(0.7..1.0);
                coords
                    .map(|(x, y)| {
                        let cx = (x as usize + ox) / cell;
                        let cy = (y as usize + oy) / cell;
                        if (cx + cy) % 2 == 0 {
                            high
                        } else {
                            low
                        }
                    })
                    .collect()
            }
            OodKind::Blob => {
                let s = side as f64;
                let (mx, my) = (rng.gen_range(0.25..0.75) * s, rng.gen_range(0.25..0.75) * s);
                let sigma = rng.gen_range(0.1..0.25) * s;
                let amp = rng.gen_range(0.6..1.0);
                coords
                    .map(|(x, y)| {
                        let d2 = (x + 0.5 - mx).powi(2) + (y + 0.5 - my).powi(2);
                        amp * (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
            OodKind::UniformNoise => (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect(),
            OodKind::StripesOffgrid => {
                // 10..35 degrees off an axis, in a random quadrant
                let base = rng.gen_range(10.0..35.0) + 90.0 * rng.gen_range(0..4) as f64;
                let mirror = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let angle = (mirror * base as f64).to_radians();
                let period = rng.gen_range(3.0..6.0);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let (sa, ca) = angle.sin_cos();
                coords
                    .map(|(x, y)| {
                        let t = x * ca + y * sa;
                        0.5 + 0.5 * (2.0 * PI * t / period + phase).sin()
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for OodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OodKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OodKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DataError::UnknownOodKind(s.to_string()))
    }
}
