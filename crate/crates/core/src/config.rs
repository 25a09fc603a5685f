//! Experiment configuration as plain `key = value` text.
//!
//! Keys are dotted (`wave.rw`, `adapt.k`, ...). Blank lines and lines
//! starting with `#` are ignored; unknown or repeated keys are errors.
//! [`ExperimentConfig::to_text`] writes every key, so a resolved config
//! reproduces a run exactly.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attention::AttentionOptions;
use crate::awb::{AwbConfig, Strategy};
use crate::data::{DomainTransform, SyntheticDomainSpec};
use crate::error::{AwbError, Result};
use crate::network::{ModelConfig, Tap, DEFAULT_EMA_MOMENTUM};
use crate::optim::AdamConfig;
use crate::pipeline::{AdaptConfig, BatchConfig, LossWeights, PretrainConfig};
use crate::registry::Registries;
use crate::waveblock::WaveConfig;

pub const SOURCE_DOMAIN: &str = "source";
pub const TARGET_DOMAIN: &str = "target";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dir: String,
    pub seed: u64,
    pub identities: usize,
    pub views: usize,
    pub train_fraction: f64,
    pub query_fraction: f64,
    pub source: DomainTransform,
    pub target: DomainTransform,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            seed: 7,
            identities: 50,
            views: 20,
            train_fraction: 0.7,
            query_fraction: 0.1,
            source: DomainTransform { color_shift: [0.0; 3], blur_radius: 0, texture_seed: 11 },
            target: DomainTransform { color_shift: [0.12, -0.04, -0.12], blur_radius: 1, texture_seed: 29 },
        }
    }
}

/// Attention kind plus `auto`, which picks the default pairing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyChoice {
    Auto,
    Fixed(Strategy),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub output_dir: String,
    pub data: DataConfig,
    pub channels: Vec<usize>,
    pub input_height: usize,
    pub input_width: usize,
    pub embed_dim: usize,
    pub attention: String,
    pub strategy: StrategyChoice,
    pub perturbation: String,
    pub attention_options: AttentionOptions,
    pub awb_enabled: bool,
    pub rw: f64,
    pub rh: f64,
    pub optim: AdamConfig,
    pub batch: BatchConfig,
    pub pretrain_epochs: usize,
    pub pretrain_ce_weight: f64,
    pub pretrain_tri_weight: f64,
    pub pretrain_iters: usize,
    pub warmup_epochs: usize,
    pub adapt_epochs: usize,
    pub k: usize,
    pub ema_momentum: f64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub adapt_iters: usize,
    pub loss: LossWeights,
    pub tap: Tap,
    pub pair_diff: bool,
    pub eval_batch: usize,
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 1,
            workers: 1,
            output_dir: "runs/default".into(),
            data: DataConfig::default(),
            channels: model.channels,
            input_height: model.input_height,
            input_width: model.input_width,
            embed_dim: model.embed_dim,
            attention: "nonlocal".into(),
            strategy: StrategyChoice::Auto,
            perturbation: "wave".into(),
            attention_options: AttentionOptions::default(),
            awb_enabled: true,
            rw: WaveConfig::default().rw,
            rh: WaveConfig::default().rh,
            optim: AdamConfig::default(),
            batch: BatchConfig::default(),
            pretrain_epochs: 10,
            pretrain_ce_weight: 1.0,
            pretrain_tri_weight: 1.0,
            pretrain_iters: 0,
            warmup_epochs: 2,
            adapt_epochs: 10,
            k: 50,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            kmeans_iters: 100,
            kmeans_tol: 1e-6,
            adapt_iters: 0,
            loss: LossWeights::default(),
            tap: Tap::default(),
            pair_diff: true,
            eval_batch: 64,
            wall_clock: false,
        }
    }
}

fn cfg_err(key: &str, value: &str, why: impl std::fmt::Display) -> AwbError {
    AwbError::Config(format!("{key} = {value}: {why}"))
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e| cfg_err(key, value, e))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_shift(key: &str, value: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into().map_err(|_| cfg_err(key, value, "expected three comma-separated values"))
}

impl ExperimentConfig {
    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let strategy = match self.strategy {
            StrategyChoice::Auto => "auto".to_string(),
            StrategyChoice::Fixed(s) => s.to_string(),
        };
        let p: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("output_dir", self.output_dir.clone()),
            ("data.dir", d.dir.clone()),
            ("data.seed", d.seed.to_string()),
            ("data.identities", d.identities.to_string()),
            ("data.views", d.views.to_string()),
            ("data.train_fraction", d.train_fraction.to_string()),
            ("data.query_fraction", d.query_fraction.to_string()),
            ("data.source.color_shift", join(&d.source.color_shift)),
            ("data.source.blur", d.source.blur_radius.to_string()),
            ("data.source.texture_seed", d.source.texture_seed.to_string()),
            ("data.target.color_shift", join(&d.target.color_shift)),
            ("data.target.blur", d.target.blur_radius.to_string()),
            ("data.target.texture_seed", d.target.texture_seed.to_string()),
            ("model.channels", join(&self.channels)),
            ("model.input_height", self.input_height.to_string()),
            ("model.input_width", self.input_width.to_string()),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("awb.enabled", self.awb_enabled.to_string()),
            ("awb.attention", self.attention.clone()),
            ("awb.strategy", strategy),
            ("awb.perturbation", self.perturbation.clone()),
            ("awb.reduction", self.attention_options.reduction.to_string()),
            ("awb.kernel", self.attention_options.kernel.to_string()),
            ("wave.rw", self.rw.to_string()),
            ("wave.rh", self.rh.to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("batch.ids", self.batch.p.to_string()),
            ("batch.views", self.batch.k.to_string()),
            ("pretrain.epochs", self.pretrain_epochs.to_string()),
            ("pretrain.ce_weight", self.pretrain_ce_weight.to_string()),
            ("pretrain.tri_weight", self.pretrain_tri_weight.to_string()),
            ("pretrain.iters_per_epoch", self.pretrain_iters.to_string()),
            ("adapt.warmup_epochs", self.warmup_epochs.to_string()),
            ("adapt.epochs", self.adapt_epochs.to_string()),
            ("adapt.k", self.k.to_string()),
            ("adapt.ema_momentum", self.ema_momentum.to_string()),
            ("adapt.kmeans_iters", self.kmeans_iters.to_string()),
            ("adapt.kmeans_tol", self.kmeans_tol.to_string()),
            ("adapt.iters_per_epoch", self.adapt_iters.to_string()),
            ("loss.hard_ce", self.loss.hard_ce.to_string()),
            ("loss.soft_ce", self.loss.soft_ce.to_string()),
            ("loss.hard_tri", self.loss.hard_tri.to_string()),
            ("loss.soft_tri", self.loss.soft_tri.to_string()),
            ("loss.temperature", self.loss.temperature.to_string()),
            ("eval.tap", self.tap.to_string()),
            ("eval.pair_diff", self.pair_diff.to_string()),
            ("eval.batch", self.eval_batch.to_string()),
            ("output.wall_clock", self.wall_clock.to_string()),
        ];
        p.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "output_dir" => self.output_dir = v.to_string(),
            "data.dir" => self.data.dir = v.to_string(),
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.identities" => self.data.identities = parse(key, v)?,
            "data.views" => self.data.views = parse(key, v)?,
            "data.train_fraction" => self.data.train_fraction = parse(key, v)?,
            "data.query_fraction" => self.data.query_fraction = parse(key, v)?,
            "data.source.color_shift" => self.data.source.color_shift = parse_shift(key, v)?,
            "data.source.blur" => self.data.source.blur_radius = parse(key, v)?,
            "data.source.texture_seed" => self.data.source.texture_seed = parse(key, v)?,
            "data.target.color_shift" => self.data.target.color_shift = parse_shift(key, v)?,
            "data.target.blur" => self.data.target.blur_radius = parse(key, v)?,
            "data.target.texture_seed" => self.data.target.texture_seed = parse(key, v)?,
            "model.channels" => self.channels = parse_list(key, v)?,
            "model.input_height" => self.input_height = parse(key, v)?,
            "model.input_width" => self.input_width = parse(key, v)?,
            "model.embed_dim" => self.embed_dim = parse(key, v)?,
            "awb.enabled" => self.awb_enabled = parse(key, v)?,
            "awb.attention" => self.attention = v.to_string(),
            "awb.strategy" => {
                self.strategy = match v {
                    "auto" => StrategyChoice::Auto,
                    other => StrategyChoice::Fixed(other.parse().map_err(|e| cfg_err(key, v, e))?),
                }
            }
            "awb.perturbation" => self.perturbation = v.to_string(),
            "awb.reduction" => self.attention_options.reduction = parse(key, v)?,
            "awb.kernel" => self.attention_options.kernel = parse(key, v)?,
            "wave.rw" => self.rw = parse(key, v)?,
            "wave.rh" => self.rh = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "batch.ids" => self.batch.p = parse(key, v)?,
            "batch.views" => self.batch.k = parse(key, v)?,
            "pretrain.epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain.ce_weight" => self.pretrain_ce_weight = parse(key, v)?,
            "pretrain.tri_weight" => self.pretrain_tri_weight = parse(key, v)?,
            "pretrain.iters_per_epoch" => self.pretrain_iters = parse(key, v)?,
            "adapt.warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "adapt.epochs" => self.adapt_epochs = parse(key, v)?,
            "adapt.k" => self.k = parse(key, v)?,
            "adapt.ema_momentum" => self.ema_momentum = parse(key, v)?,
            "adapt.kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "adapt.kmeans_tol" => self.kmeans_tol = parse(key, v)?,
            "adapt.iters_per_epoch" => self.adapt_iters = parse(key, v)?,
            "loss.hard_ce" => self.loss.hard_ce = parse(key, v)?,
            "loss.soft_ce" => self.loss.soft_ce = parse(key, v)?,
            "loss.hard_tri" => self.loss.hard_tri = parse(key, v)?,
            "loss.soft_tri" => self.loss.soft_tri = parse(key, v)?,
            "loss.temperature" => self.loss.temperature = parse(key, v)?,
            "eval.tap" => self.tap = v.parse().map_err(|e| cfg_err(key, v, e))?,
            "eval.pair_diff" => self.pair_diff = parse(key, v)?,
            "eval.batch" => self.eval_batch = parse(key, v)?,
            "output.wall_clock" => self.wall_clock = parse(key, v)?,
            other => return Err(AwbError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (k, v) in pairs {
            if !seen.insert(k.to_string()) {
                return Err(AwbError::Config(format!("key {k:?} given twice")));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AwbError::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AwbError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyChoice::Auto => Strategy::default_for(&self.attention),
            StrategyChoice::Fixed(s) => s,
        }
    }

    pub fn wave(&self) -> Result<WaveConfig> {
        WaveConfig::new(self.rw, self.rh).map_err(|e| AwbError::Config(e.to_string()))
    }

    pub fn model(&self, num_classes: usize) -> Result<ModelConfig> {
        let m = ModelConfig {
            channels: self.channels.clone(),
            input_height: self.input_height,
            input_width: self.input_width,
            embed_dim: self.embed_dim,
            num_classes,
            awb: AwbConfig {
                attention: self.attention.clone(),
                strategy: self.strategy(),
                wave: self.wave()?,
                perturbation: self.perturbation.clone(),
                attention_options: self.attention_options,
            },
        };
        m.validate().map_err(|e| AwbError::Config(e.to_string()))?;
        Ok(m)
    }

    pub fn domain_spec(&self, target: bool) -> SyntheticDomainSpec {
        let d = &self.data;
        SyntheticDomainSpec {
            name: if target { TARGET_DOMAIN } else { SOURCE_DOMAIN }.into(),
            n_identities: d.identities,
            views_per_identity: d.views,
            height: self.input_height,
            width: self.input_width,
            transform: if target { d.target.clone() } else { d.source.clone() },
            identity_seed: d.seed.wrapping_mul(2).wrapping_add(target as u64),
            train_fraction: d.train_fraction,
            query_fraction: d.query_fraction,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch: self.batch,
            optim: self.optim,
            ce_weight: self.pretrain_ce_weight,
            tri_weight: self.pretrain_tri_weight,
            iters_per_epoch: self.pretrain_iters,
        }
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            warmup_epochs: self.warmup_epochs,
            epochs: self.adapt_epochs,
            k: self.k,
            kmeans_iters: self.kmeans_iters,
            kmeans_tol: self.kmeans_tol,
            batch: self.batch,
            optim: self.optim,
            loss: self.loss,
            ema_momentum: self.ema_momentum,
            iters_per_epoch: self.adapt_iters,
            awb: self.awb_enabled,
            infer_batch: self.eval_batch,
        }
    }

    /// Cross-field checks; every failure is a configuration error.
    pub fn validate(&self) -> Result<()> {
        let c = |e: AwbError| AwbError::Config(e.to_string());
        self.model(2)?;
        let reg = Registries::<f32>::default();
        if !reg.attention.contains(&self.attention) {
            return Err(AwbError::Config(format!("unknown attention {:?}; known: {:?}", self.attention, reg.attention.names())));
        }
        if !reg.perturbation.contains(&self.perturbation) {
            return Err(AwbError::Config(format!(
                "unknown perturbation {:?}; known: {:?}",
                self.perturbation,
                reg.perturbation.names()
            )));
        }
        self.optim.validate().map_err(c)?;
        self.loss.validate().map_err(c)?;
        self.domain_spec(false).validate().map_err(c)?;
        self.domain_spec(true).validate().map_err(c)?;
        if self.batch.p < 2 || self.batch.k < 2 {
            return Err(AwbError::Config("batch.ids and batch.views must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(AwbError::Config(format!("adapt.ema_momentum must lie in [0,1), got {}", self.ema_momentum)));
        }
        if self.k < 2 || self.kmeans_iters == 0 || self.eval_batch == 0 || self.workers == 0 {
            return Err(AwbError::Config("adapt.k ≥ 2, adapt.kmeans_iters, eval.batch and workers ≥ 1 required".into()));
        }
        Ok(())
    }
}
