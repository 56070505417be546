use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::AdamConfig;
use crate::error::{Error, Result};
use crate::metrics::ZDiffConfig;
use crate::models::Activation;
use crate::objectives::{MomentMode, ObjectiveConfig, ObjectiveKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Run-record CSV destination.
    pub record_path: Option<PathBuf>,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub zdiff: ZDiffConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            objective: ObjectiveConfig::vae(),
            epochs: 30,
            batch_size: 256,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            seed: 0,
            eval_every: 0,
            checkpoint_path: None,
            record_path: None,
            latent_dim: 10,
            hidden: vec![512, 256],
            activation: Activation::Relu,
            zdiff: ZDiffConfig::default(),
        }
    }
}

/// Weights used when only the objective kind is given.
pub fn objective_defaults(kind: ObjectiveKind) -> ObjectiveConfig {
    match kind {
        ObjectiveKind::Vae => ObjectiveConfig::vae(),
        ObjectiveKind::BetaVae => ObjectiveConfig::beta_vae(4.0),
        ObjectiveKind::DipVaeI => ObjectiveConfig::dip_vae_i(10.0, 100.0),
        ObjectiveKind::DipVaeII => ObjectiveConfig::dip_vae_ii(10.0, 10.0, 0.0),
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.adam().validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be a nonempty list of positive sizes".into()));
        }
        Ok(())
    }

    /// Defaults, then the file's keys.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&ConfigOverrides::from_file(path)?)?;
        Ok(cfg)
    }

    /// Applies every set field. Setting `objective` first resets the weights
    /// to [`objective_defaults`] for that kind.
    pub fn apply(&mut self, o: &ConfigOverrides) -> Result<()> {
        if let Some(kind) = o.objective {
            self.objective = objective_defaults(kind);
        }
        let obj = &mut self.objective;
        set(&mut obj.beta, o.beta);
        set(&mut obj.lambda_od, o.lambda_od);
        set(&mut obj.lambda_d, o.lambda_d);
        set(&mut obj.lambda_3, o.lambda_3);
        set(&mut obj.moment_mode, o.moment_mode);
        set(&mut self.epochs, o.epochs);
        set(&mut self.batch_size, o.batch_size);
        set(&mut self.learning_rate, o.learning_rate);
        set(&mut self.adam_beta1, o.adam_beta1);
        set(&mut self.adam_beta2, o.adam_beta2);
        set(&mut self.adam_epsilon, o.adam_epsilon);
        set(&mut self.seed, o.seed);
        set(&mut self.eval_every, o.eval_every);
        if o.checkpoint_path.is_some() {
            self.checkpoint_path.clone_from(&o.checkpoint_path);
        }
        if o.record_path.is_some() {
            self.record_path.clone_from(&o.record_path);
        }
        set(&mut self.latent_dim, o.latent_dim);
        if let Some(h) = &o.hidden {
            self.hidden.clone_from(h);
        }
        if let Some(a) = &o.activation {
            self.activation = a.parse()?;
        }
        set(&mut self.zdiff.pairs, o.zdiff_pairs);
        set(&mut self.zdiff.n_train, o.zdiff_train);
        set(&mut self.zdiff.n_test, o.zdiff_test);
        self.validate()
    }
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Partial configuration: the TOML file format, and the shape of CLI flags.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub objective: Option<ObjectiveKind>,
    pub beta: Option<f64>,
    pub lambda_od: Option<f64>,
    pub lambda_d: Option<f64>,
    pub lambda_3: Option<f64>,
    pub moment_mode: Option<MomentMode>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub record_path: Option<PathBuf>,
    pub latent_dim: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<String>,
    pub zdiff_pairs: Option<usize>,
    pub zdiff_train: Option<usize>,
    pub zdiff_test: Option<usize>,
}

impl ConfigOverrides {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
