//! Procedural 2D shapes: every combination of shape, x, y, scale and
//! rotation rendered as a binary image, with exact ground-truth factors.

mod cache;
mod render;

pub use cache::{load_cache, save_cache, CACHE_MAGIC};
pub use render::{pixel_step, position_to_pixels, render, ShapeKind};

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of generative factors per example: shape, x, y, scale, rotation.
pub const NUM_FACTORS: usize = 5;
pub const FACTOR_NAMES: [&str; NUM_FACTORS] = ["shape", "x", "y", "scale", "rotation"];

/// How a factor is predicted when scoring latents against it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    Regression,
    Classification,
}

pub const SHAPES_FACTOR_KINDS: [FactorKind; NUM_FACTORS] = [
    FactorKind::Classification,
    FactorKind::Regression,
    FactorKind::Regression,
    FactorKind::Regression,
    FactorKind::Regression,
];

#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrid {
    pub shapes: Vec<ShapeKind>,
    pub n_x: usize,
    pub n_y: usize,
    pub n_scale: usize,
    pub n_rotation: usize,
    pub canvas: usize,
}

impl Default for FactorGrid {
    /// Desk-scale grid: 3·8·8·4·8 = 6,144 images on a 32-pixel canvas.
    fn default() -> Self {
        FactorGrid {
            shapes: ShapeKind::ALL.to_vec(),
            n_x: 8,
            n_y: 8,
            n_scale: 4,
            n_rotation: 8,
            canvas: 32,
        }
    }
}

fn evenly_spaced(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Mixed-radix digits of one example, slowest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorIndex {
    pub shape: usize,
    pub x: usize,
    pub y: usize,
    pub scale: usize,
    pub rotation: usize,
}

impl FactorGrid {
    /// Full-size grid: 3 shapes, 32 x, 32 y, 6 scales, 40 rotations.
    pub fn full_size() -> Self {
        FactorGrid {
            shapes: ShapeKind::ALL.to_vec(),
            n_x: 32,
            n_y: 32,
            n_scale: 6,
            n_rotation: 40,
            canvas: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Config("grid needs at least one shape".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if self.shapes[..i].contains(s) {
                return Err(Error::Config(format!("shape {s} listed twice")));
            }
        }
        if [self.n_x, self.n_y, self.n_scale, self.n_rotation, self.canvas].contains(&0) {
            return Err(Error::Config("factor counts and canvas must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shapes.len() * self.n_x * self.n_y * self.n_scale * self.n_rotation
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.canvas * self.canvas
    }

    pub fn x_values(&self) -> Vec<f64> {
        evenly_spaced(self.n_x, 0.0, 1.0)
    }

    pub fn y_values(&self) -> Vec<f64> {
        evenly_spaced(self.n_y, 0.0, 1.0)
    }

    pub fn scale_values(&self) -> Vec<f64> {
        evenly_spaced(self.n_scale, 0.5, 1.0)
    }

    pub fn rotation_values(&self) -> Vec<f64> {
        (0..self.n_rotation)
            .map(|i| TAU * i as f64 / self.n_rotation as f64)
            .collect()
    }

    fn radices(&self) -> [usize; NUM_FACTORS] {
        [self.shapes.len(), self.n_x, self.n_y, self.n_scale, self.n_rotation]
    }

    /// Mixed-radix decomposition with rotation varying fastest.
    pub fn factor_index(&self, mut index: usize) -> FactorIndex {
        let mut digits = [0; NUM_FACTORS];
        for (d, r) in digits.iter_mut().zip(self.radices()).rev() {
            *d = index % r;
            index /= r;
        }
        FactorIndex {
            shape: digits[0],
            x: digits[1],
            y: digits[2],
            scale: digits[3],
            rotation: digits[4],
        }
    }

    pub fn example_index(&self, f: FactorIndex) -> usize {
        let digits = [f.shape, f.x, f.y, f.scale, f.rotation];
        digits
            .iter()
            .zip(self.radices())
            .fold(0, |acc, (&d, r)| acc * r + d)
    }

    pub fn labels(&self, f: FactorIndex) -> FactorLabels {
        FactorLabels {
            shape: f.shape as u8,
            x: self.x_values()[f.x],
            y: self.y_values()[f.y],
            scale: self.scale_values()[f.scale],
            rotation: self.rotation_values()[f.rotation],
        }
    }

    /// Recovers the mixed-radix digits from label values.
    pub fn index_of_labels(&self, l: &FactorLabels) -> Option<FactorIndex> {
        let find = |vals: Vec<f64>, v: f64| vals.iter().position(|&u| u == v);
        Some(FactorIndex {
            shape: (l.shape as usize).lt(&self.shapes.len()).then_some(l.shape as usize)?,
            x: find(self.x_values(), l.x)?,
            y: find(self.y_values(), l.y)?,
            scale: find(self.scale_values(), l.scale)?,
            rotation: find(self.rotation_values(), l.rotation)?,
        })
    }
}

/// Ground-truth factor values of one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorLabels {
    /// Index into [`FactorGrid::shapes`].
    pub shape: u8,
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl FactorLabels {
    pub fn as_array(&self) -> [f64; NUM_FACTORS] {
        [self.shape as f64, self.x, self.y, self.scale, self.rotation]
    }
}

#[derive(Clone, Debug)]
pub struct ImageBatch {
    /// `batch × pixels`, entries in {0, 1}.
    pub pixels: Tensor,
    pub labels: Vec<FactorLabels>,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: FactorGrid,
    /// Row-major `len × pixels` binary images.
    pub images: Vec<u8>,
    pub labels: Vec<FactorLabels>,
    pub split_seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Renders every grid combination and splits 90/10 with `seed`.
pub fn generate_dataset(grid: &FactorGrid, seed: u64) -> Result<Dataset> {
    grid.validate()?;
    let p = grid.pixels();
    let (xs, ys, ss, rs) = (
        grid.x_values(),
        grid.y_values(),
        grid.scale_values(),
        grid.rotation_values(),
    );
    let rendered: Vec<(Vec<u8>, FactorLabels)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let f = grid.factor_index(i);
            let labels = FactorLabels {
                shape: f.shape as u8,
                x: xs[f.x],
                y: ys[f.y],
                scale: ss[f.scale],
                rotation: rs[f.rotation],
            };
            let img = render(
                grid.shapes[f.shape],
                labels.x,
                labels.y,
                labels.scale,
                labels.rotation,
                grid.canvas,
            )?;
            Ok((img, labels))
        })
        .collect::<Result<_>>()?;
    let mut images = Vec::with_capacity(grid.len() * p);
    let mut labels = Vec::with_capacity(grid.len());
    for (img, l) in rendered {
        images.extend_from_slice(&img);
        labels.push(l);
    }
    Ok(Dataset::assemble(grid.clone(), images, labels, seed))
}

/// Seeded uniform 90/10 partition of `0..n`; both halves sorted.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * 0.1).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

impl Dataset {
    pub(crate) fn assemble(grid: FactorGrid, images: Vec<u8>, labels: Vec<FactorLabels>, split_seed: u64) -> Self {
        let (train, test) = split_indices(labels.len(), split_seed);
        Dataset {
            grid,
            images,
            labels,
            split_seed,
            train,
            test,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.grid.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let p = self.grid.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&b| b as f64));
        }
        ImageBatch {
            pixels: Tensor::new(vec![indices.len(), p], data).expect("non-empty batch"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    /// Restricts the dataset to `indices` (re-split with the same seed).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let p = self.grid.pixels();
        let mut images = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::assemble(self.grid.clone(), images, labels, self.split_seed)
    }
}

/// One epoch of shuffled training minibatches; the trailing short batch is
/// dropped.
pub fn minibatches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = ImageBatch> + 'a> {
    let order = epoch_order(&dataset.train, batch_size, seed, epoch)?;
    let n_batches = order.len() / batch_size;
    Ok((0..n_batches).map(move |b| dataset.batch(&order[b * batch_size..(b + 1) * batch_size])))
}

/// Shuffled copy of `indices` for one epoch.
pub fn epoch_order(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order)
}
