//! Latent traversals: decode while sweeping one coordinate of `μ(x)`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::tensor::{sigmoid, Tensor};

/// Grayscale image of pixel probabilities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    /// 8-bit binary PGM (`P5`), each pixel `round(255·p)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::file(path, e))
    }
}

/// Latent values visited by a traversal; a single step keeps `centre`.
pub fn sweep_values(range: f64, steps: usize, centre: f64) -> Vec<f64> {
    match steps {
        1 => vec![centre],
        _ => (0..steps)
            .map(|i| -range + 2.0 * range * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

/// Encodes `image` (one flattened example) and decodes it with latent
/// `latent` (or every latent, one strip per row) swept over `[−range, range]`.
pub fn traverse(
    model: &ModelParams,
    image: &[f64],
    canvas: usize,
    latent: Option<usize>,
    range: f64,
    steps: usize,
) -> Result<GrayImage> {
    let d = model.spec.latent_dim;
    let p = model.spec.input_dim();
    if image.len() != p || canvas * canvas != p {
        return Err(Error::invalid(format!(
            "image of {} pixels does not match a {canvas}×{canvas} model input of {p}",
            image.len()
        )));
    }
    if steps == 0 || !(range >= 0.0) || !range.is_finite() {
        return Err(Error::invalid("traversal needs steps ≥ 1 and a finite range ≥ 0"));
    }
    let latents: Vec<usize> = match latent {
        Some(i) if i >= d => {
            return Err(Error::invalid(format!("latent index {i} out of range for d = {d}")));
        }
        Some(i) => vec![i],
        None => (0..d).collect(),
    };
    let mu = model
        .encode_values(&Tensor::new(vec![1, p], image.to_vec())?)?
        .mu
        .into_data();

    let mut codes = Vec::with_capacity(latents.len() * steps * d);
    for &i in &latents {
        for v in sweep_values(range, steps, mu[i]) {
            let mut z = mu.clone();
            z[i] = v;
            codes.extend(z);
        }
    }
    let n = latents.len() * steps;
    let probs = model.decode_values(&Tensor::new(vec![n, d], codes)?)?.map(sigmoid);

    let (width, height) = (steps * canvas, latents.len() * canvas);
    let mut pixels = vec![0.0; width * height];
    for strip in 0..latents.len() {
        for s in 0..steps {
            let tile = probs.row(strip * steps + s);
            for r in 0..canvas {
                let dst = (strip * canvas + r) * width + s * canvas;
                pixels[dst..dst + canvas].copy_from_slice(&tile[r * canvas..(r + 1) * canvas]);
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}
