//! Binary dataset cache: `SHAPES1` magic line, `key=value` header lines, a
//! blank line, packed pixel bits (MSB first, row-major), then per example
//! four little-endian `f64` labels (x, y, scale, rotation) and a `u8` shape
//! index.

use std::fs;
use std::path::Path;

use super::{Dataset, FactorGrid, FactorLabels, ShapeKind};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &str = "SHAPES1";

const LABEL_BYTES: usize = 4 * 8 + 1;

fn encode(ds: &Dataset) -> Vec<u8> {
    let g = &ds.grid;
    let shapes: Vec<&str> = g.shapes.iter().map(|s| s.name()).collect();
    let mut out = format!(
        "{CACHE_MAGIC}\nshapes={}\nn_x={}\nn_y={}\nn_scale={}\nn_rotation={}\ncanvas={}\ncount={}\nsplit_seed={}\n\n",
        shapes.join(","),
        g.n_x,
        g.n_y,
        g.n_scale,
        g.n_rotation,
        g.canvas,
        ds.len(),
        ds.split_seed
    )
    .into_bytes();

    let mut packed = vec![0u8; ds.images.len().div_ceil(8)];
    for (i, &bit) in ds.images.iter().enumerate() {
        if bit != 0 {
            packed[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out.extend_from_slice(&packed);
    for l in &ds.labels {
        for v in [l.x, l.y, l.scale, l.rotation] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(l.shape);
    }
    out
}

fn decode(bytes: &[u8]) -> Result<Dataset> {
    let magic_len = CACHE_MAGIC.len() + 1;
    if bytes.len() < magic_len || &bytes[..magic_len] != format!("{CACHE_MAGIC}\n").as_bytes() {
        return Err(Error::Format(format!("missing {CACHE_MAGIC} magic")));
    }
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("unterminated header".into()))?;
    let header = std::str::from_utf8(&bytes[magic_len..header_end])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;

    let mut fields = std::collections::HashMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| -> Result<&str> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("header missing {k}")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("header {k} is not an integer")))
    };

    let shapes = get("shapes")?
        .split(',')
        .map(|s| s.parse::<ShapeKind>().map_err(|e| Error::Format(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let grid = FactorGrid {
        shapes,
        n_x: num("n_x")? as usize,
        n_y: num("n_y")? as usize,
        n_scale: num("n_scale")? as usize,
        n_rotation: num("n_rotation")? as usize,
        canvas: num("canvas")? as usize,
    };
    grid.validate().map_err(|e| Error::Format(e.to_string()))?;
    let count = num("count")? as usize;
    let split_seed = num("split_seed")?;

    let n_bits = count * grid.pixels();
    let packed_len = n_bits.div_ceil(8);
    let payload = &bytes[header_end + 2..];
    let expected = packed_len + count * LABEL_BYTES;
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }

    let images = (0..n_bits)
        .map(|i| (payload[i / 8] >> (7 - i % 8)) & 1)
        .collect();
    let labels = payload[packed_len..]
        .chunks_exact(LABEL_BYTES)
        .map(|c| {
            let f = |k: usize| f64::from_le_bytes(c[k * 8..k * 8 + 8].try_into().unwrap());
            FactorLabels {
                x: f(0),
                y: f(1),
                scale: f(2),
                rotation: f(3),
                shape: c[32],
            }
        })
        .collect();
    Ok(Dataset::assemble(grid, images, labels, split_seed))
}

pub fn save_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, encode(dataset)).map_err(|e| Error::file(path, e))
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}
