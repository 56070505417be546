use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Shape-local unit length as a fraction of the canvas side, at scale 1.
pub const UNIT_FRACTION: f64 = 0.16;
/// Distance from the canvas border to the extreme centroid positions.
pub const MARGIN_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Ellipse,
    Heart,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Ellipse, ShapeKind::Heart];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Heart => "heart",
        }
    }

    /// Inside test in centroid-centred local coordinates (`v` pointing up).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + 4.0 * v * v <= 1.0,
            ShapeKind::Heart => heart_implicit(u, v + heart_centroid()),
        }
    }
}

fn heart_implicit(u: f64, v: f64) -> bool {
    let r = u * u + v * v - 1.0;
    r * r * r - u * u * v * v * v <= 0.0
}

/// Vertical centroid of the heart region (symmetric in `u`), by midpoint
/// integration over its bounding box.
fn heart_centroid() -> f64 {
    static CENTROID: OnceLock<f64> = OnceLock::new();
    *CENTROID.get_or_init(|| {
        let n = 2000;
        let (lo, hi) = (-1.5, 1.5);
        let h = (hi - lo) / n as f64;
        let (mut area, mut moment) = (0.0, 0.0);
        for i in 0..n {
            let u = lo + (i as f64 + 0.5) * h;
            for j in 0..n {
                let v = lo + (j as f64 + 0.5) * h;
                if heart_implicit(u, v) {
                    area += 1.0;
                    moment += v;
                }
            }
        }
        moment / area
    })
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }
}

/// Pixel coordinate of a normalized position in `[0, 1]`.
pub fn position_to_pixels(pos: f64, canvas: usize) -> f64 {
    let c = canvas as f64;
    let margin = MARGIN_FRACTION * c;
    margin + pos * (c - 2.0 * margin)
}

/// Normalized distance corresponding to one pixel.
pub fn pixel_step(canvas: usize) -> f64 {
    1.0 / (canvas as f64 * (1.0 - 2.0 * MARGIN_FRACTION))
}

/// Rasterizes one shape into a `canvas × canvas` row-major binary mask.
///
/// The outline is scaled, rotated counter-clockwise about its centroid,
/// placed with the centroid at `(x, y)`, then filled by testing pixel centres.
pub fn render(
    shape: ShapeKind,
    x: f64,
    y: f64,
    scale: f64,
    rotation: f64,
    canvas: usize,
) -> Result<Vec<u8>> {
    if canvas == 0 {
        return Err(Error::invalid("canvas must be at least one pixel"));
    }
    for (name, v, lo, hi) in [("x", x, 0.0, 1.0), ("y", y, 0.0, 1.0), ("scale", scale, 0.5, 1.0)] {
        if !(lo..=hi).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} outside [{lo}, {hi}]")));
        }
    }
    if !(0.0..TAU).contains(&rotation) {
        return Err(Error::invalid(format!("rotation = {rotation} outside [0, 2π)")));
    }

    let cx = position_to_pixels(x, canvas);
    let cy = position_to_pixels(y, canvas);
    let unit = UNIT_FRACTION * canvas as f64 * scale;
    let (sin, cos) = rotation.sin_cos();
    let mut img = vec![0u8; canvas * canvas];
    for r in 0..canvas {
        let dy = r as f64 + 0.5 - cy;
        for c in 0..canvas {
            let dx = c as f64 + 0.5 - cx;
            let u = (cos * dx + sin * dy) / unit;
            // image rows grow downwards; flip so local v points up
            let v = -(-sin * dx + cos * dy) / unit;
            if shape.contains(u, v) {
                img[r * canvas + c] = 1;
            }
        }
    }
    Ok(img)
}
