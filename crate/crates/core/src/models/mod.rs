//! MLP encoder producing a diagonal-Gaussian posterior `N(μ(x), diag(σ²(x)))`
//! and MLP decoder producing per-pixel Bernoulli logits.

mod checkpoint;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Rows per forward chunk when encoding/decoding whole datasets off-tape.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Architecture of the encoder/decoder pair.
///
/// `widths` is the encoder trunk including the input width, e.g.
/// `[1024, 512, 256]`. The decoder mirrors it: `latent → 256 → 512 → 1024`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, latent_dim: usize, activation: Activation, seed: u64) -> Result<Self> {
        let spec = MlpSpec {
            widths,
            latent_dim,
            activation,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(
                "need an input width and at least one hidden layer".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) || self.latent_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn last_hidden(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn decoder_widths(&self) -> Vec<usize> {
        std::iter::once(self.latent_dim)
            .chain(self.widths[1..].iter().rev().copied())
            .chain(std::iter::once(self.widths[0]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub trunk: Vec<Linear>,
    pub mean_head: Linear,
    pub logvar_head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// Hidden layers followed by the logit layer.
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: MlpSpec,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Uniform `±√(3/fan_in)` weights from a ChaCha stream seeded by `spec.seed`;
/// zero biases.
pub fn init_params(spec: &MlpSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let trunk = spec
        .widths
        .windows(2)
        .map(|w| Linear::init(w[0], w[1], &mut rng))
        .collect();
    let h = spec.last_hidden();
    let mean_head = Linear::init(h, spec.latent_dim, &mut rng);
    let logvar_head = Linear::init(h, spec.latent_dim, &mut rng);
    let layers = spec
        .decoder_widths()
        .windows(2)
        .map(|w| Linear::init(w[0], w[1], &mut rng))
        .collect();
    Ok(ModelParams {
        spec: spec.clone(),
        encoder: EncoderParams {
            trunk,
            mean_head,
            logvar_head,
        },
        decoder: DecoderParams { layers },
    })
}

impl ModelParams {
    /// All-zero parameters of the right shapes (used as an optimizer-state
    /// template and in tests).
    pub fn zeros_like(spec: &MlpSpec) -> Self {
        let h = spec.last_hidden();
        ModelParams {
            spec: spec.clone(),
            encoder: EncoderParams {
                trunk: spec.widths.windows(2).map(|w| Linear::zeroed(w[0], w[1])).collect(),
                mean_head: Linear::zeroed(h, spec.latent_dim),
                logvar_head: Linear::zeroed(h, spec.latent_dim),
            },
            decoder: DecoderParams {
                layers: spec
                    .decoder_widths()
                    .windows(2)
                    .map(|w| Linear::zeroed(w[0], w[1]))
                    .collect(),
            },
        }
    }

    /// Parameter tensors in declaration order: encoder trunk, mean head,
    /// log-variance head, decoder layers; weight before bias in each layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .trunk
            .iter()
            .chain([&self.encoder.mean_head, &self.encoder.logvar_head])
            .chain(&self.decoder.layers)
        {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let enc = &mut self.encoder;
        for l in enc
            .trunk
            .iter_mut()
            .chain([&mut enc.mean_head, &mut enc.logvar_head])
            .chain(self.decoder.layers.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every parameter from a flat vector in declaration order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    /// Puts every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.leaf(t.clone())).collect();
        BoundModel::from_vars(&self.spec, vars)
    }

    /// Puts every parameter on `g` as a constant.
    pub fn bind_constant(&self, g: &mut Graph) -> BoundModel {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        BoundModel::from_vars(&self.spec, vars)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        write_spec(&mut ck, &self.spec);
        ck.payload = self.flatten();
        ck
    }

    /// Reads the spec and the model payload prefix; returns the remaining
    /// payload (optimizer state, if any).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, &[f64])> {
        let spec = read_spec(ck)?;
        let mut params = ModelParams::zeros_like(&spec);
        let n = params.num_scalars();
        if ck.payload.len() < n {
            return Err(Error::Truncated {
                expected: n * 8,
                found: ck.payload.len() * 8,
            });
        }
        params.assign_flat(&ck.payload[..n])?;
        Ok((params, &ck.payload[n..]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let (params, _) = Self::from_checkpoint(&ck)?;
        Ok(params)
    }

    /// Posterior means and variances for every row of `x`, off the tape.
    pub fn encode_values(&self, x: &Tensor) -> Result<GaussianPosterior> {
        let d = self.spec.latent_dim;
        let mut mu = Vec::with_capacity(x.shape()[0] * d);
        let mut var = Vec::with_capacity(x.shape()[0] * d);
        for chunk in row_chunks(x)? {
            let mut g = Graph::new();
            let m = self.bind_constant(&mut g);
            let xv = g.constant(chunk);
            let post = encode(&mut g, &m, xv)?;
            mu.extend_from_slice(g.value(post.mu).data());
            var.extend_from_slice(g.value(post.var).data());
        }
        let n = mu.len() / d;
        Ok(GaussianPosterior {
            mu: Tensor::new(vec![n, d], mu)?,
            var: Tensor::new(vec![n, d], var)?,
        })
    }

    /// Decoder logits for every row of `z`, off the tape.
    pub fn decode_values(&self, z: &Tensor) -> Result<Tensor> {
        let p = self.spec.input_dim();
        let mut out = Vec::with_capacity(z.shape()[0] * p);
        for chunk in row_chunks(z)? {
            let mut g = Graph::new();
            let m = self.bind_constant(&mut g);
            let zv = g.constant(chunk);
            let logits = decode(&mut g, &m, zv)?;
            out.extend_from_slice(g.value(logits).data());
        }
        let n = out.len() / p;
        Tensor::new(vec![n, p], out)
    }
}

fn row_chunks(x: &Tensor) -> Result<Vec<Tensor>> {
    if x.rank() != 2 {
        return Err(Error::invalid(format!("expected a matrix, got {:?}", x.shape())));
    }
    let (n, w) = (x.shape()[0], x.shape()[1]);
    Ok((0..n)
        .step_by(EVAL_CHUNK)
        .map(|start| {
            let end = (start + EVAL_CHUNK).min(n);
            Tensor::new(vec![end - start, w], x.data()[start * w..end * w].to_vec())
                .expect("chunk sized")
        })
        .collect())
}

fn write_spec(ck: &mut Checkpoint, spec: &MlpSpec) {
    let widths: Vec<String> = spec.widths.iter().map(usize::to_string).collect();
    ck.set("widths", widths.join(","));
    ck.set("latent_dim", spec.latent_dim);
    ck.set("activation", spec.activation);
    ck.set("seed", spec.seed);
}

fn read_spec(ck: &Checkpoint) -> Result<MlpSpec> {
    let widths = ck
        .require("widths")?
        .split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad width {w:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let activation = ck
        .require("activation")?
        .parse()
        .map_err(|_| Error::Format("bad activation".into()))?;
    MlpSpec::new(widths, ck.parse("latent_dim")?, activation, ck.parse("seed")?)
        .map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

/// Model parameters as nodes of one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub activation: Activation,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub trunk: Vec<BoundLinear>,
    pub mean_head: BoundLinear,
    pub logvar_head: BoundLinear,
    pub decoder: Vec<BoundLinear>,
    /// Same order as [`ModelParams::tensors`].
    pub vars: Vec<Var>,
}

impl BoundModel {
    /// `vars` in [`ModelParams::tensors`] order.
    pub fn from_vars(spec: &MlpSpec, vars: Vec<Var>) -> Self {
        let layers: Vec<BoundLinear> = vars
            .chunks_exact(2)
            .map(|c| BoundLinear {
                weight: c[0],
                bias: c[1],
            })
            .collect();
        let n_trunk = spec.widths.len() - 1;
        BoundModel {
            activation: spec.activation,
            latent_dim: spec.latent_dim,
            input_dim: spec.input_dim(),
            trunk: layers[..n_trunk].to_vec(),
            mean_head: layers[n_trunk],
            logvar_head: layers[n_trunk + 1],
            decoder: layers[n_trunk + 2..].to_vec(),
            vars,
        }
    }
}

/// Posterior nodes on a graph. `var` is the variance diagonal, `exp(logvar)`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu: Var,
    pub logvar: Var,
    pub var: Var,
}

/// Per-example `μ(x)` and diagonal `Σ(x)` (variances), both `batch × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub var: Tensor,
}

fn linear(g: &mut Graph, l: BoundLinear, x: Var) -> Result<Var> {
    let h = g.matmul(x, l.weight)?;
    g.add(h, l.bias)
}

fn activate(g: &mut Graph, act: Activation, x: Var) -> Var {
    match act {
        Activation::Tanh => g.tanh(x),
        Activation::Relu => g.relu(x),
    }
}

fn check_width(g: &Graph, x: Var, want: usize, what: &str) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != want {
        return Err(Error::ShapeMismatch {
            op: if what == "encode" { "encode" } else { "decode" },
            left: shape.to_vec(),
            right: vec![want],
        });
    }
    Ok(())
}

pub fn encode(g: &mut Graph, m: &BoundModel, x: Var) -> Result<PosteriorVars> {
    check_width(g, x, m.input_dim, "encode")?;
    let mut h = x;
    for &l in &m.trunk {
        let a = linear(g, l, h)?;
        h = activate(g, m.activation, a);
    }
    let mu = linear(g, m.mean_head, h)?;
    let logvar = linear(g, m.logvar_head, h)?;
    let var = g.exp(logvar);
    Ok(PosteriorVars { mu, logvar, var })
}

/// `z = μ + √σ² ⊙ ε`.
pub fn reparameterize(g: &mut Graph, mu: Var, var: Var, noise: Var) -> Result<Var> {
    if g.shape(mu) != g.shape(noise) || g.shape(var) != g.shape(noise) {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            left: g.shape(mu).to_vec(),
            right: g.shape(noise).to_vec(),
        });
    }
    let sd = g.sqrt(var)?;
    let scaled = g.mul(sd, noise)?;
    g.add(mu, scaled)
}

/// Bernoulli logits per pixel.
pub fn decode(g: &mut Graph, m: &BoundModel, z: Var) -> Result<Var> {
    check_width(g, z, m.latent_dim, "decode")?;
    let mut h = z;
    let last = m.decoder.len() - 1;
    for (i, &l) in m.decoder.iter().enumerate() {
        h = linear(g, l, h)?;
        if i < last {
            h = activate(g, m.activation, h);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid as graph_sigmoid;

    fn spec(seed: u64) -> MlpSpec {
        MlpSpec::new(vec![16, 8, 6], 3, Activation::Tanh, seed).unwrap()
    }

    fn zero_heads(p: &mut ModelParams) {
        p.encoder.mean_head = Linear::zeroed(6, 3);
        p.encoder.logvar_head = Linear::zeroed(6, 3);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![16], 3, Activation::Tanh, 0).is_err());
        assert!(MlpSpec::new(vec![16, 0], 3, Activation::Tanh, 0).is_err());
        assert!(MlpSpec::new(vec![16, 4], 0, Activation::Relu, 0).is_err());
    }

    #[test]
    fn zero_heads_give_standard_posterior() {
        let mut p = init_params(&spec(1)).unwrap();
        zero_heads(&mut p);
        let x = Tensor::new(vec![3, 16], (0..48).map(|i| (i % 2) as f64).collect()).unwrap();
        let post = p.encode_values(&x).unwrap();
        assert!(post.mu.data().iter().all(|&v| v == 0.0));
        assert!(post.var.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_rows_identical_posteriors() {
        let p = init_params(&spec(2)).unwrap();
        let row: Vec<f64> = (0..16).map(|i| ((i * 7) % 3) as f64 / 2.0).collect();
        let x = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let post = p.encode_values(&x).unwrap();
        assert_eq!(post.mu.row(0), post.mu.row(2));
        assert_eq!(post.var.row(0), post.var.row(1));
    }

    #[test]
    fn width_mismatch_errors() {
        let p = init_params(&spec(3)).unwrap();
        assert!(p.encode_values(&Tensor::zeros(&[2, 15])).is_err());
        assert!(p.decode_values(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let var = g.constant(Tensor::from_rows(&[vec![4.0, 0.25]]).unwrap());
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        let z = reparameterize(&mut g, mu, var, zero).unwrap();
        assert_eq!(g.value(z), g.value(mu));

        let mu0 = g.constant(Tensor::zeros(&[1, 2]));
        let one = g.constant(Tensor::ones(&[1, 2]));
        let eps = g.constant(Tensor::from_rows(&[vec![0.3, -1.1]]).unwrap());
        let z = reparameterize(&mut g, mu0, one, eps).unwrap();
        assert_eq!(g.value(z), g.value(eps));

        let bad = g.constant(Tensor::zeros(&[2, 2]));
        assert!(reparameterize(&mut g, mu, var, bad).is_err());
    }

    #[test]
    fn zero_decoder_gives_half_probabilities() {
        let s = spec(4);
        let p = ModelParams::zeros_like(&s);
        let logits = p.decode_values(&Tensor::full(&[2, 3], 0.7)).unwrap();
        assert!(logits.data().iter().all(|&l| l == 0.0 && graph_sigmoid(l) == 0.5));
    }

    #[test]
    fn decode_is_deterministic_and_round_trip_finite() {
        let p = init_params(&spec(5)).unwrap();
        let x = Tensor::new(vec![4, 16], (0..64).map(|i| ((i * 5) % 2) as f64).collect()).unwrap();
        let post = p.encode_values(&x).unwrap();
        let a = p.decode_values(&post.mu).unwrap();
        let b = p.decode_values(&post.mu).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_params(&spec(7)).unwrap();
        let b = init_params(&spec(7)).unwrap();
        let c = init_params(&spec(8)).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_ne!(a.flatten(), c.flatten());
        for l in a.encoder.trunk.iter().chain(&a.decoder.layers) {
            let fan_in = l.weight.shape()[0];
            let bound = (3.0 / fan_in as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(&spec(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"DIPVAE1\n"));
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }
}
