//! Training objectives: negative ELBO, β-VAE, and the DIP-VAE covariance
//! regularizers on the inferred prior `q(z) = E_x q(z|x)`.
//!
//! Everything here is expressed as a quantity to *minimize*:
//!
//! ```text
//! total = nll + β·KL(q(z|x) ‖ N(0, I)) + dip_penalty + moment3_penalty
//! ```
//!
//! The DIP penalties act on minibatch estimates of `Cov[μ(x)]` (DIP-VAE-I) or
//! `Cov_q(z)[z] = Cov[μ(x)] + E[Σ(x)]` (DIP-VAE-II), pulling off-diagonals to
//! 0 and diagonals to 1.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, BoundModel, GaussianPosterior, ModelParams};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Vae,
    BetaVae,
    DipVaeI,
    #[serde(rename = "dip-vae-ii")]
    DipVaeII,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::Vae,
        ObjectiveKind::BetaVae,
        ObjectiveKind::DipVaeI,
        ObjectiveKind::DipVaeII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Vae => "vae",
            ObjectiveKind::BetaVae => "beta-vae",
            ObjectiveKind::DipVaeI => "dip-vae-i",
            ObjectiveKind::DipVaeII => "dip-vae-ii",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

/// Which third-order central moments the `λ_3` penalty covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMode {
    /// Every unique index triple `a ≤ b ≤ c` of the symmetric tensor.
    #[default]
    Full,
    /// Only `a = b = c` (per-dimension skewness).
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub lambda_od: f64,
    pub lambda_d: f64,
    pub lambda_3: f64,
    pub moment_mode: MomentMode,
}

impl ObjectiveConfig {
    pub fn vae() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Vae,
            beta: 1.0,
            lambda_od: 0.0,
            lambda_d: 0.0,
            lambda_3: 0.0,
            moment_mode: MomentMode::Full,
        }
    }

    pub fn beta_vae(beta: f64) -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::BetaVae,
            beta,
            ..Self::vae()
        }
    }

    pub fn dip_vae_i(lambda_od: f64, lambda_d: f64) -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::DipVaeI,
            lambda_od,
            lambda_d,
            ..Self::vae()
        }
    }

    pub fn dip_vae_ii(lambda_od: f64, lambda_d: f64, lambda_3: f64) -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::DipVaeII,
            lambda_od,
            lambda_d,
            lambda_3,
            ..Self::vae()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("{}: {msg}", self.kind)));
        if !(self.beta >= 1.0) || !self.beta.is_finite() {
            return bad("beta must be a finite value ≥ 1");
        }
        for (name, v) in [
            ("lambda_od", self.lambda_od),
            ("lambda_d", self.lambda_d),
            ("lambda_3", self.lambda_3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be a finite value ≥ 0"));
            }
        }
        let no_lambdas = self.lambda_od == 0.0 && self.lambda_d == 0.0 && self.lambda_3 == 0.0;
        match self.kind {
            ObjectiveKind::Vae if self.beta != 1.0 || !no_lambdas => {
                bad("plain VAE takes beta = 1 and no regularizer weights")
            }
            ObjectiveKind::BetaVae if !no_lambdas => bad("beta-VAE takes no regularizer weights"),
            ObjectiveKind::DipVaeI | ObjectiveKind::DipVaeII if self.beta != 1.0 => {
                bad("DIP-VAE keeps beta = 1")
            }
            _ => Ok(()),
        }
    }
}

/// Minibatch covariance estimates, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CovarianceStats {
    /// `d × d` population covariance of the posterior means.
    pub cov_mu: Var,
    /// Length-`d` batch mean of the posterior variances.
    pub mean_sigma: Var,
    /// `cov_mu + diag(mean_sigma)`: covariance of the aggregate posterior.
    pub cov_z: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub dip_penalty: f64,
    pub moment3_penalty: f64,
}

/// Loss terms as graph nodes; `total` is what gets differentiated.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
    pub dip_penalty: Var,
    pub moment3_penalty: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            total: v(self.total),
            nll: v(self.nll),
            kl: v(self.kl),
            dip_penalty: v(self.dip_penalty),
            moment3_penalty: v(self.moment3_penalty),
        }
    }
}

fn batch_rows(g: &Graph, v: Var) -> usize {
    g.shape(v).first().copied().unwrap_or(1)
}

/// Batch mean of the summed per-pixel Bernoulli NLL, in the stable form
/// `softplus(l) - x·l`.
pub fn bernoulli_nll(g: &mut Graph, logits: Var, x: Var) -> Result<Var> {
    if let Some(&bad) = g.value(x).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
    }
    if g.shape(logits) != g.shape(x) {
        return Err(Error::ShapeMismatch {
            op: "bernoulli_nll",
            left: g.shape(logits).to_vec(),
            right: g.shape(x).to_vec(),
        });
    }
    let n = batch_rows(g, x) as f64;
    let sp = g.softplus(logits);
    let xl = g.mul(x, logits)?;
    let per_pixel = g.sub(sp, xl)?;
    let total = g.sum_all(per_pixel);
    g.scalar_op(crate::tensor::BinaryOp::Div, total, n)
}

/// Batch mean of `½ Σ_i (σ²_i + μ_i² − 1 − ln σ²_i)`.
pub fn kl_to_standard_normal(g: &mut Graph, mu: Var, var: Var) -> Result<Var> {
    if g.shape(mu) != g.shape(var) {
        return Err(Error::ShapeMismatch {
            op: "kl_to_standard_normal",
            left: g.shape(mu).to_vec(),
            right: g.shape(var).to_vec(),
        });
    }
    let n = batch_rows(g, mu) as f64;
    let ln_var = g.ln(var)?;
    let mu2 = g.square(mu);
    let a = g.add(var, mu2)?;
    let b = g.sub(a, ln_var)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_all(c);
    Ok(g.mul_scalar(s, 0.5 / n))
}

pub fn covariance_stats(g: &mut Graph, mu: Var, var: Var) -> Result<CovarianceStats> {
    let shape = g.shape(mu).to_vec();
    if shape.len() != 2 || g.shape(var) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "covariance_stats",
            left: shape,
            right: g.shape(var).to_vec(),
        });
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::invalid(format!(
            "covariance needs a batch of at least 2, got {n}"
        )));
    }
    // Center against the first row before averaging: identical rows give an
    // exactly zero covariance and the subtraction loses less precision.
    let mut first = vec![0.0; n];
    first[0] = 1.0;
    let first = g.constant(Tensor::new(vec![1, n], first)?);
    let anchor = g.matmul(first, mu)?;
    let shifted = g.sub(mu, anchor)?;
    let mean = g.mean(shifted, Some(0))?;
    let centered = g.sub(shifted, mean)?;
    let ct = g.transpose(centered)?;
    let scatter = g.matmul(ct, centered)?;
    let cov_mu = g.mul_scalar(scatter, 1.0 / n as f64);
    let mean_sigma = g.mean(var, Some(0))?;
    let eye = g.constant(Tensor::eye(d));
    let diag = g.mul(eye, mean_sigma)?;
    let cov_z = g.add(cov_mu, diag)?;
    Ok(CovarianceStats {
        cov_mu,
        mean_sigma,
        cov_z,
    })
}

/// `λ_od Σ_{i≠j} M_ij² + λ_d Σ_i (M_ii − 1)²`.
pub fn covariance_penalty(g: &mut Graph, m: Var, lambda_od: f64, lambda_d: f64) -> Result<Var> {
    let d = g.shape(m)[0];
    let eye = g.constant(Tensor::eye(d));
    let off_mask = g.constant(Tensor::eye(d).map(|v| 1.0 - v));
    let off = g.mul(m, off_mask)?;
    let off_sq = g.square(off);
    let off_sum = g.sum_all(off_sq);
    let off_term = g.mul_scalar(off_sum, lambda_od);
    let masked = g.mul(m, eye)?;
    let diag = g.sum(masked, Some(0))?;
    let dev = g.add_scalar(diag, -1.0);
    let dev_sq = g.square(dev);
    let diag_sum = g.sum_all(dev_sq);
    let diag_term = g.mul_scalar(diag_sum, lambda_d);
    g.add(off_term, diag_term)
}

pub fn dip_i_penalty(g: &mut Graph, stats: &CovarianceStats, lambda_od: f64, lambda_d: f64) -> Result<Var> {
    covariance_penalty(g, stats.cov_mu, lambda_od, lambda_d)
}

pub fn dip_ii_penalty(g: &mut Graph, stats: &CovarianceStats, lambda_od: f64, lambda_d: f64) -> Result<Var> {
    covariance_penalty(g, stats.cov_z, lambda_od, lambda_d)
}

/// `λ_3 Σ_{a≤b≤c} m_abc²` with `m_abc` the batch mean of
/// `(z_a − z̄_a)(z_b − z̄_b)(z_c − z̄_c)`.
pub fn third_moment_penalty(g: &mut Graph, z: Var, lambda_3: f64, mode: MomentMode) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(format!("expected batch × d samples, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::invalid(format!(
            "third moments need a batch of at least 2, got {n}"
        )));
    }
    let mean = g.mean(z, Some(0))?;
    let c = g.sub(z, mean)?;
    let sum_sq = match mode {
        MomentMode::Diagonal => {
            let c2 = g.square(c);
            let c3 = g.mul(c2, c)?;
            let m3 = g.mean(c3, Some(0))?;
            let m3sq = g.square(m3);
            g.sum_all(m3sq)
        }
        MomentMode::Full => {
            // Slice a: M_a[b][c] = mean_n c_na c_nb c_nc, keep b ≥ a and c ≥ b.
            let mut acc: Option<Var> = None;
            for a in 0..d {
                let mut sel = vec![0.0; d];
                sel[a] = 1.0;
                let sel = g.constant(Tensor::new(vec![d, 1], sel)?);
                let col = g.matmul(c, sel)?;
                let weighted = g.mul(c, col)?;
                let wt = g.transpose(weighted)?;
                let prod = g.matmul(wt, c)?;
                let m_a = g.mul_scalar(prod, 1.0 / n as f64);
                let mut mask = vec![0.0; d * d];
                for b in a..d {
                    for cc in b..d {
                        mask[b * d + cc] = 1.0;
                    }
                }
                let mask = g.constant(Tensor::new(vec![d, d], mask)?);
                let m_sq = g.square(m_a);
                let kept = g.mul(m_sq, mask)?;
                let s = g.sum_all(kept);
                acc = Some(match acc {
                    Some(prev) => g.add(prev, s)?,
                    None => s,
                });
            }
            acc.expect("d ≥ 1")
        }
    };
    Ok(g.mul_scalar(sum_sq, lambda_3))
}

/// Builds the full minibatch loss on `g` for the bound model.
pub fn compute_loss(
    g: &mut Graph,
    config: &ObjectiveConfig,
    model: &BoundModel,
    x: Var,
    noise: Var,
) -> Result<LossVars> {
    config.validate()?;
    let post = models::encode(g, model, x)?;
    let z = models::reparameterize(g, post.mu, post.var, noise)?;
    let logits = models::decode(g, model, z)?;
    let nll = bernoulli_nll(g, logits, x)?;
    let kl = kl_to_standard_normal(g, post.mu, post.var)?;

    let dip_penalty = match config.kind {
        ObjectiveKind::DipVaeI | ObjectiveKind::DipVaeII => {
            let stats = covariance_stats(g, post.mu, post.var)?;
            if config.kind == ObjectiveKind::DipVaeI {
                dip_i_penalty(g, &stats, config.lambda_od, config.lambda_d)?
            } else {
                dip_ii_penalty(g, &stats, config.lambda_od, config.lambda_d)?
            }
        }
        _ => g.constant(Tensor::scalar(0.0)),
    };
    let moment3_penalty = if config.lambda_3 > 0.0 {
        third_moment_penalty(g, z, config.lambda_3, config.moment_mode)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let weighted_kl = g.mul_scalar(kl, config.beta);
    let elbo_part = g.add(nll, weighted_kl)?;
    let with_dip = g.add(elbo_part, dip_penalty)?;
    let total = g.add(with_dip, moment3_penalty)?;
    Ok(LossVars {
        total,
        nll,
        kl,
        dip_penalty,
        moment3_penalty,
    })
}

/// Evaluates the loss without keeping a graph around.
pub fn loss_values(
    config: &ObjectiveConfig,
    params: &ModelParams,
    x: &Tensor,
    noise: &Tensor,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let m = params.bind_constant(&mut g);
    let xv = g.constant(x.clone());
    let nv = g.constant(noise.clone());
    Ok(compute_loss(&mut g, config, &m, xv, nv)?.values(&g))
}

/// Both sides of `KL(q(z) ‖ p(z)) ≤ E_x KL(q(z|x) ‖ p(z))`, each estimated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlBoundReport {
    /// 1-nearest-neighbour estimate of `KL(q(z) ‖ N(0, I))` from samples.
    pub aggregate_kl: f64,
    /// Mean closed-form `KL(q(z|x) ‖ N(0, I))` over the examples.
    pub mean_posterior_kl: f64,
    /// `mean_posterior_kl − aggregate_kl`.
    pub gap: f64,
}

/// Closed-form KL of each row's diagonal Gaussian to `N(0, I)`.
pub fn posterior_kl_rows(post: &GaussianPosterior) -> Vec<f64> {
    let d = post.mu.shape()[1];
    (0..post.mu.shape()[0])
        .map(|i| {
            let (m, v) = (post.mu.row(i), post.var.row(i));
            0.5 * (0..d)
                .map(|j| v[j] + m[j] * m[j] - 1.0 - v[j].ln())
                .sum::<f64>()
        })
        .collect()
}

/// Compares a sample-based estimate of the aggregate-posterior KL against the
/// mean per-example KL. `n_samples` draws are taken from each of `q(z)` and the
/// prior.
pub fn kl_bound_check(post: &GaussianPosterior, n_samples: usize, seed: u64) -> Result<KlBoundReport> {
    if n_samples < 1000 {
        return Err(Error::invalid(format!(
            "kl_bound_check needs at least 1000 samples, got {n_samples}"
        )));
    }
    if post.var.data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("posterior variances must be positive"));
    }
    let (n, d) = (post.mu.shape()[0], post.mu.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Vec::with_capacity(n_samples * d);
    for _ in 0..n_samples {
        let i = rng.random_range(0..n);
        let (m, v) = (post.mu.row(i), post.var.row(i));
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            q.push(m[j] + v[j].sqrt() * e);
        }
    }
    let p: Vec<f64> = (0..n_samples * d).map(|_| rng.sample(StandardNormal)).collect();
    let aggregate_kl = knn_kl_divergence(&q, &p, d);
    let rows = posterior_kl_rows(post);
    let mean_posterior_kl = rows.iter().sum::<f64>() / n as f64;
    Ok(KlBoundReport {
        aggregate_kl,
        mean_posterior_kl,
        gap: mean_posterior_kl - aggregate_kl,
    })
}

/// 1-NN divergence estimator `D(P‖Q) ≈ (d/n) Σ ln(ν_i/ρ_i) + ln(m/(n−1))`
/// for flat row-major samples `p` (from P) and `q` (from Q) of width `d`.
pub fn knn_kl_divergence(p: &[f64], q: &[f64], d: usize) -> f64 {
    let n = p.len() / d;
    let m = q.len() / d;
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut acc = 0.0;
    for i in 0..n {
        let pi = &p[i * d..(i + 1) * d];
        let mut rho = f64::INFINITY;
        for j in 0..n {
            if j != i {
                rho = rho.min(dist2(pi, &p[j * d..(j + 1) * d]));
            }
        }
        let mut nu = f64::INFINITY;
        for j in 0..m {
            nu = nu.min(dist2(pi, &q[j * d..(j + 1) * d]));
        }
        // squared distances: ln(ν/ρ) = ½ ln(ν²/ρ²)
        acc += 0.5 * (nu.max(f64::MIN_POSITIVE) / rho.max(f64::MIN_POSITIVE)).ln();
    }
    d as f64 * acc / n as f64 + (m as f64 / (n as f64 - 1.0)).ln()
}
