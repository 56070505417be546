use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{train, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};

/// One train run per value: `β` for β-VAE, `λ_od` for DIP-VAE with
/// `λ_d = lambda_d_ratio · λ_od`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub kind: ObjectiveKind,
    pub values: Vec<f64>,
    pub lambda_d_ratio: f64,
    pub lambda_3: f64,
}

impl SweepSpec {
    pub fn new(kind: ObjectiveKind, values: Vec<f64>) -> Self {
        let lambda_d_ratio = if kind == ObjectiveKind::DipVaeI { 10.0 } else { 1.0 };
        SweepSpec {
            kind,
            values,
            lambda_d_ratio,
            lambda_3: 0.0,
        }
    }

    pub fn objective_for(&self, value: f64) -> Result<ObjectiveConfig> {
        let o = match self.kind {
            ObjectiveKind::Vae => {
                return Err(Error::Config("a plain VAE has no weight to sweep".into()));
            }
            ObjectiveKind::BetaVae => ObjectiveConfig::beta_vae(value),
            ObjectiveKind::DipVaeI => ObjectiveConfig::dip_vae_i(value, self.lambda_d_ratio * value),
            ObjectiveKind::DipVaeII => {
                ObjectiveConfig::dip_vae_ii(value, self.lambda_d_ratio * value, self.lambda_3)
            }
        };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        for &v in &self.values {
            self.objective_for(v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    /// Final metrics, or the reason the run failed.
    pub result: std::result::Result<EvalReport, String>,
}

/// Runs are independent and execute in parallel; run `i` uses seed
/// `base.seed + i` and, when set, checkpoint/record paths suffixed with `-i`.
pub fn sweep(spec: &SweepSpec, base: &TrainConfig, dataset: &Dataset) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    base.validate()?;
    let rows = spec
        .values
        .par_iter()
        .enumerate()
        .map(|(i, &value)| {
            let seed = base.seed.wrapping_add(i as u64);
            let result = run_one(spec, base, dataset, i, value, seed).map_err(|e| {
                log::warn!("sweep run {i} ({} = {value}) failed: {e}", spec.kind);
                e.to_string()
            });
            SweepRow { value, seed, result }
        })
        .collect();
    Ok(rows)
}

fn run_one(
    spec: &SweepSpec,
    base: &TrainConfig,
    dataset: &Dataset,
    i: usize,
    value: f64,
    seed: u64,
) -> Result<EvalReport> {
    let cfg = TrainConfig {
        objective: spec.objective_for(value)?,
        seed,
        checkpoint_path: base.checkpoint_path.as_deref().map(|p| suffixed(p, i)),
        record_path: base.record_path.as_deref().map(|p| suffixed(p, i)),
        ..base.clone()
    };
    let out = train(&cfg, dataset)?;
    evaluate(&out.params, dataset, &cfg.zdiff, seed)
}

fn suffixed(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{i}"),
    };
    path.with_file_name(name)
}

pub const SWEEP_HEADER: [&str; 8] = [
    "value",
    "seed",
    "sap",
    "zdiff",
    "recon_error",
    "offdiag_norm",
    "active_dims",
    "error",
];

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        let fields: Vec<String> = match &r.result {
            Ok(e) => vec![
                r.value.to_string(),
                r.seed.to_string(),
                e.sap.to_string(),
                e.zdiff.to_string(),
                e.recon_error.to_string(),
                e.offdiag_norm.to_string(),
                e.active_dims.to_string(),
                String::new(),
            ],
            Err(msg) => {
                let mut f = vec![r.value.to_string(), r.seed.to_string()];
                f.extend(std::iter::repeat_n(String::new(), 5));
                f.push(msg.clone());
                f
            }
        };
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}
