//! Disentanglement and reconstruction metrics, all computed on the posterior
//! mean `μ(x)` of the test split.

mod attribute;
mod sap;
mod zdiff;

pub use attribute::{attribute_classifier, AttributeResult};
pub use sap::{sap_from_matrix, sap_score, SapResult, ScoreMatrix, ACTIVITY_THRESHOLD};
pub use zdiff::{zdiff_from_codes, zdiff_score, ZDiffConfig};

use std::path::Path;

use crate::data::{Dataset, NUM_FACTORS, SHAPES_FACTOR_KINDS};
use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::tensor::{sigmoid, Tensor};

/// Inferred means with aligned ground-truth factor values, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodes {
    /// `n × d`.
    pub codes: Tensor,
    /// `n × k`.
    pub factors: Tensor,
}

impl LatentCodes {
    pub fn new(codes: Tensor, factors: Tensor) -> Result<Self> {
        if codes.rank() != 2 || factors.rank() != 2 || codes.shape()[0] != factors.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "latent_codes",
                left: codes.shape().to_vec(),
                right: factors.shape().to_vec(),
            });
        }
        Ok(LatentCodes { codes, factors })
    }

    /// Encodes the test split of `dataset` with `model`.
    pub fn from_model(model: &ModelParams, dataset: &Dataset) -> Result<Self> {
        if dataset.test.is_empty() {
            return Err(Error::invalid("test split is empty"));
        }
        let batch = dataset.batch(&dataset.test);
        let post = model.encode_values(&batch.pixels)?;
        let factors = batch
            .labels
            .iter()
            .flat_map(|l| l.as_array())
            .collect::<Vec<f64>>();
        LatentCodes::new(post.mu, Tensor::new(vec![batch.labels.len(), NUM_FACTORS], factors)?)
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn num_factors(&self) -> usize {
        self.factors.shape()[1]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        column(&self.codes, j)
    }

    pub fn factor(&self, j: usize) -> Vec<f64> {
        column(&self.factors, j)
    }

    /// Writes `latent_0,…,latent_{d-1},factor_0,…,factor_{k-1}` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let (d, k) = (self.latent_dim(), self.num_factors());
        let header: Vec<String> = (0..d)
            .map(|i| format!("latent_{i}"))
            .chain((0..k).map(|j| format!("factor_{j}")))
            .collect();
        w.write_record(&header)?;
        for r in 0..self.len() {
            let row: Vec<String> = self
                .codes
                .row(r)
                .iter()
                .chain(self.factors.row(r))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let header = r.headers()?.clone();
        let d = header.iter().take_while(|h| h.starts_with("latent_")).count();
        let k = header.len() - d;
        for (i, h) in header.iter().enumerate() {
            let want = if i < d {
                format!("latent_{i}")
            } else {
                format!("factor_{}", i - d)
            };
            if h != want {
                return Err(Error::Format(format!("column {i} is {h:?}, expected {want:?}")));
            }
        }
        if d == 0 || k == 0 {
            return Err(Error::Format("need at least one latent and one factor column".into()));
        }
        let (mut codes, mut factors) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number {field:?}")))?;
                if i < d {
                    codes.push(v);
                } else {
                    factors.push(v);
                }
            }
        }
        let n = codes.len() / d;
        if n == 0 {
            return Err(Error::Format("no rows".into()));
        }
        LatentCodes::new(Tensor::new(vec![n, d], codes)?, Tensor::new(vec![n, k], factors)?)
    }
}

pub(crate) fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.shape()[0]).map(|r| t.at(r, j)).collect()
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance.
pub(crate) fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceReport {
    /// `d × d` empirical covariance (divides by `n`).
    pub covariance: Tensor,
    /// `d × d` correlation; rows/columns of zero-variance latents are 0.
    pub correlation: Tensor,
    pub variances: Vec<f64>,
    /// Frobenius norm of the off-diagonal part of `covariance`.
    pub offdiag_norm: f64,
    /// Latents with variance at or above [`ACTIVITY_THRESHOLD`].
    pub active_dims: usize,
}

pub fn covariance_diagnostics(codes: &Tensor) -> Result<CovarianceReport> {
    if codes.rank() != 2 || codes.shape()[0] < 2 {
        return Err(Error::invalid(format!(
            "covariance needs at least 2 rows, got shape {:?}",
            codes.shape()
        )));
    }
    let (n, d) = (codes.shape()[0], codes.shape()[1]);
    let cols: Vec<Vec<f64>> = (0..d).map(|j| column(codes, j)).collect();
    let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let s = (0..n)
                .map(|r| (cols[a][r] - means[a]) * (cols[b][r] - means[b]))
                .sum::<f64>()
                / n as f64;
            cov[a * d + b] = s;
            cov[b * d + a] = s;
        }
    }
    let variances: Vec<f64> = (0..d).map(|a| cov[a * d + a]).collect();
    let mut corr = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let den = (variances[a] * variances[b]).sqrt();
            if den > 0.0 {
                corr[a * d + b] = (cov[a * d + b] / den).clamp(-1.0, 1.0);
            }
        }
    }
    let offdiag_norm = (0..d * d)
        .filter(|i| i / d != i % d)
        .map(|i| cov[i] * cov[i])
        .sum::<f64>()
        .sqrt();
    Ok(CovarianceReport {
        covariance: Tensor::new(vec![d, d], cov)?,
        correlation: Tensor::new(vec![d, d], corr)?,
        active_dims: variances.iter().filter(|&&v| v >= ACTIVITY_THRESHOLD).count(),
        variances,
        offdiag_norm,
    })
}

/// Mean squared difference between probabilities and targets.
pub fn mean_squared_error(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    if probs.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_squared_error",
            left: probs.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let s: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, x)| (p - x) * (p - x))
        .sum();
    Ok(s / probs.numel() as f64)
}

/// Per-pixel squared error of `sigmoid(decode(μ(x)))` over the test split.
pub fn reconstruction_error(model: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.test.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let batch = dataset.batch(&dataset.test);
    let post = model.encode_values(&batch.pixels)?;
    let probs = model.decode_values(&post.mu)?.map(sigmoid);
    mean_squared_error(&probs, &batch.pixels)
}

/// Every headline metric of one model on the test split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub sap: f64,
    pub zdiff: f64,
    pub recon_error: f64,
    pub offdiag_norm: f64,
    pub active_dims: usize,
}

pub fn evaluate(model: &ModelParams, dataset: &Dataset, zdiff: &ZDiffConfig, seed: u64) -> Result<EvalReport> {
    if dataset.test.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let batch = dataset.batch(&dataset.test);
    let post = model.encode_values(&batch.pixels)?;
    let probs = model.decode_values(&post.mu)?.map(sigmoid);
    let recon_error = mean_squared_error(&probs, &batch.pixels)?;
    let factors = batch.labels.iter().flat_map(|l| l.as_array()).collect();
    let codes = LatentCodes::new(post.mu, Tensor::new(vec![batch.labels.len(), NUM_FACTORS], factors)?)?;
    let cov = covariance_diagnostics(&codes.codes)?;
    Ok(EvalReport {
        sap: sap_score(&codes, &SHAPES_FACTOR_KINDS)?.score,
        zdiff: zdiff_from_codes(&codes, zdiff, seed)?,
        recon_error,
        offdiag_norm: cov.offdiag_norm,
        active_dims: cov.active_dims,
    })
}
