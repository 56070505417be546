//! Seeded, resumable minibatch training and hyperparameter sweeps.
//!
//! A run is a pure function of `(config, dataset)`: the epoch shuffle is
//! drawn from `(seed, epoch)` and the reparameterization noise from
//! `(seed, step)`, so a checkpoint only has to carry the parameters, the
//! optimizer moments, the step counter and the records so far.

mod adam;
mod config;
mod sweep;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{objective_defaults, ConfigOverrides, TrainConfig};
pub use sweep::{sweep, write_sweep_csv, SweepRow, SweepSpec};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::models::{init_params, Checkpoint, MlpSpec, ModelParams};
use crate::objectives::{compute_loss, LossBreakdown};
use crate::tensor::{Graph, Tensor};

const NOISE_KEY: u64 = 0x6e6f_6973_6500_0001;

pub const RECORD_HEADER: [&str; 10] = [
    "step",
    "total",
    "nll",
    "kl",
    "dip_penalty",
    "moment3_penalty",
    "sap",
    "zdiff",
    "recon_error",
    "offdiag_norm",
];

/// One evaluation row. `loss` is the minibatch loss of the step that
/// completed at `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub sap: f64,
    pub zdiff: f64,
    pub recon_error: f64,
    pub offdiag_norm: f64,
}

impl RunRecord {
    fn to_array(self) -> [f64; 10] {
        let l = self.loss;
        [
            self.step as f64,
            l.total,
            l.nll,
            l.kl,
            l.dip_penalty,
            l.moment3_penalty,
            self.sap,
            self.zdiff,
            self.recon_error,
            self.offdiag_norm,
        ]
    }

    fn from_array(a: &[f64]) -> Self {
        RunRecord {
            step: a[0] as usize,
            loss: LossBreakdown {
                total: a[1],
                nll: a[2],
                kl: a[3],
                dip_penalty: a[4],
                moment3_penalty: a[5],
            },
            sap: a[6],
            zdiff: a[7],
            recon_error: a[8],
            offdiag_norm: a[9],
        }
    }
}

pub fn write_records_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record(r.to_array().iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this trainer checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many steps have completed.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub records: Vec<RunRecord>,
    /// Steps completed.
    pub steps: usize,
    /// Steps a full run would take.
    pub total_steps: usize,
}

impl TrainOutcome {
    pub fn finished(&self) -> bool {
        self.steps == self.total_steps
    }
}

pub fn model_spec(config: &TrainConfig, dataset: &Dataset) -> Result<MlpSpec> {
    let mut widths = vec![dataset.grid.pixels()];
    widths.extend_from_slice(&config.hidden);
    MlpSpec::new(widths, config.latent_dim, config.activation, config.seed)
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(config, dataset, &TrainOptions::default())
}

pub fn train_with(config: &TrainConfig, dataset: &Dataset, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let b = config.batch_size;
    let steps_per_epoch = dataset.train.len() / b;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch_size {b} exceeds the {} training examples",
            dataset.train.len()
        )));
    }
    let total_steps = config.epochs * steps_per_epoch;
    let spec = model_spec(config, dataset)?;
    let header = run_header(config, dataset);

    let (mut params, mut adam, mut records, mut step) = match &options.resume {
        Some(path) => resume_state(path, &spec, &header)?,
        None => {
            let params = init_params(&spec)?;
            let adam = AdamState::new(params.num_scalars());
            (params, adam, Vec::new(), 0)
        }
    };
    let stop = options.stop_after.unwrap_or(total_steps).min(total_steps);
    let adam_cfg = config.adam();
    let d = config.latent_dim;
    let mut order: Option<(usize, Vec<usize>)> = None;

    while step < stop {
        let epoch = step / steps_per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(&dataset.train, b, config.seed, epoch as u64)?));
        }
        let within = step % steps_per_epoch;
        let idx = &order.as_ref().unwrap().1[within * b..(within + 1) * b];
        let batch = dataset.batch(idx);

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(batch.pixels);
        let noise = g.constant(step_noise(config.seed, step as u64, b, d));
        let loss = compute_loss(&mut g, &config.objective, &bound, x, noise)?;
        let values = loss.values(&g);
        if !values.total.is_finite() {
            log::error!("non-finite loss at step {step}: {values:?}");
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        g.backward(loss.total)?;
        let grads: Vec<Tensor> = bound
            .vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        drop(g);
        adam_step(&mut params, &grads, &mut adam, &adam_cfg).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
            e => e,
        })?;
        step += 1;

        let due = step == total_steps || (config.eval_every > 0 && step % config.eval_every == 0);
        if due {
            let report = evaluate(&params, dataset, &config.zdiff, config.seed)?;
            log::info!(
                "step {step}/{total_steps} loss {:.4} sap {:.4} zdiff {:.1} recon {:.5}",
                values.total,
                report.sap,
                report.zdiff,
                report.recon_error
            );
            records.push(record(step, values, report));
            if let Some(path) = &config.record_path {
                write_records_csv(&records, path)?;
            }
            if let Some(path) = &config.checkpoint_path {
                save_checkpoint(path, &params, &adam, &records, step, &header)?;
            }
        }
    }
    if step < total_steps {
        if let Some(path) = &config.checkpoint_path {
            save_checkpoint(path, &params, &adam, &records, step, &header)?;
        }
    }
    Ok(TrainOutcome {
        params,
        adam,
        records,
        steps: step,
        total_steps,
    })
}

fn record(step: usize, loss: LossBreakdown, r: EvalReport) -> RunRecord {
    RunRecord {
        step,
        loss,
        sap: r.sap,
        zdiff: r.zdiff,
        recon_error: r.recon_error,
        offdiag_norm: r.offdiag_norm,
    }
}

/// Standard normal `batch × d` noise for one step.
pub fn step_noise(seed: u64, step: u64, batch: usize, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_KEY);
    rng.set_stream(step);
    let data = (0..batch * d).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![batch, d], data).expect("positive noise shape")
}

/// Settings a resumed run must share with the run that wrote the checkpoint.
fn run_header(c: &TrainConfig, ds: &Dataset) -> Vec<(&'static str, String)> {
    let o = &c.objective;
    vec![
        ("objective", o.kind.to_string()),
        ("beta", o.beta.to_string()),
        ("lambda_od", o.lambda_od.to_string()),
        ("lambda_d", o.lambda_d.to_string()),
        ("lambda_3", o.lambda_3.to_string()),
        ("moment_mode", format!("{:?}", o.moment_mode)),
        ("batch_size", c.batch_size.to_string()),
        ("learning_rate", c.learning_rate.to_string()),
        ("adam_beta1", c.adam_beta1.to_string()),
        ("adam_beta2", c.adam_beta2.to_string()),
        ("adam_epsilon", c.adam_epsilon.to_string()),
        ("train_seed", c.seed.to_string()),
        ("eval_every", c.eval_every.to_string()),
        ("zdiff", format!("{:?}", c.zdiff)),
        ("dataset_len", ds.len().to_string()),
        ("split_seed", ds.split_seed.to_string()),
    ]
}

fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    adam: &AdamState,
    records: &[RunRecord],
    step: usize,
    header: &[(&'static str, String)],
) -> Result<()> {
    let mut ck: Checkpoint = params.to_checkpoint();
    for (k, v) in header {
        ck.set(k, v);
    }
    ck.set("step", step);
    ck.set("adam_step", adam.step);
    ck.set("records", records.len());
    ck.payload.extend_from_slice(&adam.m);
    ck.payload.extend_from_slice(&adam.v);
    for r in records {
        ck.payload.extend_from_slice(&r.to_array());
    }
    ck.save(path)
}

type Resumed = (ModelParams, AdamState, Vec<RunRecord>, usize);

fn resume_state(path: &Path, spec: &MlpSpec, header: &[(&'static str, String)]) -> Result<Resumed> {
    let ck = Checkpoint::load(path)?;
    for (k, v) in header {
        let found = ck.require(k)?;
        if found != v {
            return Err(Error::Config(format!(
                "checkpoint {} has {k} = {found}, this run has {v}",
                path.display()
            )));
        }
    }
    let (params, rest) = ModelParams::from_checkpoint(&ck)?;
    if &params.spec != spec {
        return Err(Error::Config(format!(
            "checkpoint {} holds a different architecture",
            path.display()
        )));
    }
    let n = params.num_scalars();
    let n_records: usize = ck.parse("records")?;
    let expected = 2 * n + n_records * RECORD_HEADER.len();
    if rest.len() != expected {
        return Err(Error::Truncated {
            expected: expected * 8,
            found: rest.len() * 8,
        });
    }
    let adam = AdamState {
        step: ck.parse("adam_step")?,
        m: rest[..n].to_vec(),
        v: rest[n..2 * n].to_vec(),
    };
    let records = rest[2 * n..]
        .chunks_exact(RECORD_HEADER.len())
        .map(RunRecord::from_array)
        .collect();
    Ok((params, adam, records, ck.parse("step")?))
}
