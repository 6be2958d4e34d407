//! Training hyperparameters and their flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::NormMode;
use crate::error::{Error, Result};
use crate::init::{InitKind, InitMode};
use crate::losses::{EntropyMode, LossWeights};
use crate::optim::{AdamConfig, ScheduleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnInit {
    #[default]
    Identity,
    /// Identity plus Gaussian noise of `attn_init_noise`.
    Perturbed,
}

impl FromStr for AttnInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "perturbed" => Ok(Self::Perturbed),
            _ => Err(Error::Config(format!("unknown attention init {s:?}"))),
        }
    }
}

impl std::fmt::Display for AttnInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Perturbed => "perturbed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Combined batch size, split between the streams by dataset size.
    pub batch_size: usize,
    /// Explicit per-stream batch sizes; 0 means proportional.
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr_attention: f64,
    pub lr_backbone: f64,
    pub schedule: ScheduleMode,
    pub adam: AdamConfig,
    /// Softmax temperature for labeled rows.
    pub epsilon: f64,
    pub weights: LossWeights,
    pub entropy_mode: EntropyMode,
    pub init: InitMode,
    pub attn_init: AttnInit,
    pub attn_init_noise: f64,
    pub norm_mode: NormMode,
    /// View noise as a fraction of the mean embedding norm.
    pub augment_sigma: f64,
    pub seed: u64,
    pub patience: usize,
    pub min_delta: f64,
    pub holdout_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Propagate the pair loss into the embeddings through its cosine targets.
    pub bce_z_grad: bool,
    /// Novel class count for datasets read from disk.
    pub novel_classes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            labeled_batch: 0,
            unlabeled_batch: 0,
            lr_attention: 5e-3,
            lr_backbone: 1e-4,
            schedule: ScheduleMode::Cosine,
            adam: AdamConfig::default(),
            epsilon: 2.0,
            weights: LossWeights::default(),
            entropy_mode: EntropyMode::PerSample,
            init: InitMode::default(),
            attn_init: AttnInit::Identity,
            attn_init_noise: 0.0,
            norm_mode: NormMode::None,
            augment_sigma: 0.1,
            seed: 0,
            patience: 20,
            min_delta: 0.0,
            holdout_fraction: 0.1,
            grad_clip: 0.0,
            bce_z_grad: false,
            novel_classes: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "labeled_batch",
        "unlabeled_batch",
        "lr_attention",
        "lr_backbone",
        "schedule",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "epsilon",
        "alpha",
        "beta",
        "gamma",
        "delta",
        "tau1",
        "tau2",
        "prob_floor",
        "entropy_mode",
        "init",
        "init_seed",
        "lloyd_max_iter",
        "lloyd_tol",
        "seeding_only",
        "init_restarts",
        "attn_init",
        "attn_init_noise",
        "norm_mode",
        "augment_sigma",
        "seed",
        "patience",
        "min_delta",
        "holdout_fraction",
        "grad_clip",
        "bce_z_grad",
        "novel_classes",
    ];

    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "labeled_batch" => self.labeled_batch = parse(key, v)?,
            "unlabeled_batch" => self.unlabeled_batch = parse(key, v)?,
            "lr_attention" => self.lr_attention = parse(key, v)?,
            "lr_backbone" => self.lr_backbone = parse(key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "alpha" => self.weights.alpha = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "gamma" => self.weights.gamma = parse(key, v)?,
            "delta" => self.weights.delta = parse(key, v)?,
            "tau1" => self.weights.tau1 = parse(key, v)?,
            "tau2" => self.weights.tau2 = parse(key, v)?,
            "prob_floor" => self.weights.prob_floor = parse(key, v)?,
            "entropy_mode" => self.entropy_mode = v.parse()?,
            "init" => self.init.kind = v.parse::<InitKind>()?,
            "init_seed" => self.init.seed = parse(key, v)?,
            "lloyd_max_iter" => self.init.lloyd_max_iter = parse(key, v)?,
            "lloyd_tol" => self.init.lloyd_tol = parse(key, v)?,
            "seeding_only" => self.init.seeding_only = parse_bool(key, v)?,
            "init_restarts" => self.init.restarts = parse(key, v)?,
            "attn_init" => self.attn_init = v.parse()?,
            "attn_init_noise" => self.attn_init_noise = parse(key, v)?,
            "norm_mode" => self.norm_mode = v.parse()?,
            "augment_sigma" => self.augment_sigma = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "min_delta" => self.min_delta = parse(key, v)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "bce_z_grad" => self.bce_z_grad = parse_bool(key, v)?,
            "novel_classes" => self.novel_classes = Some(parse(key, v)?),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut cfg = Self::default();
        cfg.apply_str(&text)?;
        Ok(cfg)
    }

    /// Renders every field; `apply_str` on the output reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("labeled_batch", self.labeled_batch.to_string());
        put("unlabeled_batch", self.unlabeled_batch.to_string());
        put("lr_attention", self.lr_attention.to_string());
        put("lr_backbone", self.lr_backbone.to_string());
        put("schedule", self.schedule.to_string());
        put("adam_beta1", self.adam.beta1.to_string());
        put("adam_beta2", self.adam.beta2.to_string());
        put("adam_eps", self.adam.eps.to_string());
        put("epsilon", self.epsilon.to_string());
        put("alpha", self.weights.alpha.to_string());
        put("beta", self.weights.beta.to_string());
        put("gamma", self.weights.gamma.to_string());
        put("delta", self.weights.delta.to_string());
        put("tau1", self.weights.tau1.to_string());
        put("tau2", self.weights.tau2.to_string());
        put("prob_floor", self.weights.prob_floor.to_string());
        put("entropy_mode", self.entropy_mode.to_string());
        put("init", self.init.kind.to_string());
        put("init_seed", self.init.seed.to_string());
        put("lloyd_max_iter", self.init.lloyd_max_iter.to_string());
        put("lloyd_tol", self.init.lloyd_tol.to_string());
        put("seeding_only", self.init.seeding_only.to_string());
        put("init_restarts", self.init.restarts.to_string());
        put("attn_init", self.attn_init.to_string());
        put("attn_init_noise", self.attn_init_noise.to_string());
        put("norm_mode", self.norm_mode.to_string());
        put("augment_sigma", self.augment_sigma.to_string());
        put("seed", self.seed.to_string());
        put("patience", self.patience.to_string());
        put("min_delta", self.min_delta.to_string());
        put("holdout_fraction", self.holdout_fraction.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("bce_z_grad", self.bce_z_grad.to_string());
        if let Some(n) = self.novel_classes {
            put("novel_classes", n.to_string());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 && (self.labeled_batch == 0 || self.unlabeled_batch == 0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_attention", self.lr_attention), ("lr_backbone", self.lr_backbone)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.augment_sigma >= 0.0) || !(self.attn_init_noise >= 0.0) {
            return Err(Error::Config("augment_sigma and attn_init_noise must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if !(self.grad_clip >= 0.0) || !(self.min_delta >= 0.0) || !(self.init.lloyd_tol >= 0.0) {
            return Err(Error::Config("grad_clip, min_delta and lloyd_tol must be nonnegative".into()));
        }
        self.weights.validate()?;
        self.adam.validate()
    }
}
