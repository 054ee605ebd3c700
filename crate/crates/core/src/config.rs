//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and malformed values are errors that name the key. Keys under
//! `meta.` are informational and skipped. Run manifests use the same format,
//! so a manifest can be fed back as a config to reproduce the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{config_err, Result};
use crate::loss::{LossConfig, LossKind};
use crate::model::{BackboneKind, BackboneSpec, DfnetConfig, ModelVariant};
use crate::tensor::Float;
use crate::train::{
    ablation_arms, default_lambdas, AugmentConfig, ExperimentArm, OptimConfig, SyntheticDatasetSpec,
    TrainConfig,
};

/// Prefix of informational keys (command, versions, arm definitions).
pub const META_PREFIX: &str = "meta.";

/// Every accepted key with a one-line description, in manifest order.
pub const KEYS: &[(&str, &str)] = &[
    ("backbone", "tiny3 or tiny4"),
    ("stage_channels", "comma-separated stage widths; empty for the backbone default"),
    ("branch_channels", "output channels of each multi-scale branch"),
    ("fuse_channels", "channels after the per-stage 1×1 fuse"),
    ("ami_channels", "channels of every integration step"),
    ("input_size", "square side, or HxW; both divisible by 2^deepest stage"),
    ("variant", "full, without_mag, without_ami, without_mag_and_ami, without_cas"),
    ("loss", "sharpening or cross_entropy"),
    ("lambda", "weight of the MAE term in the sharpening loss"),
    ("beta_sq", "β² of the soft F-measure"),
    ("epsilon", "stabilizer of the soft precision/recall and the cross-entropy clamp"),
    ("learning_rate", "initial SGD learning rate"),
    ("momentum", "SGD momentum"),
    ("patience", "epochs without improvement before the learning rate drops"),
    ("lr_factor", "learning-rate divisor on a plateau"),
    ("batch_size", "images per SGD step"),
    ("epochs", "training epochs"),
    ("augment", "true or false"),
    ("hflip_probability", "probability of a horizontal flip"),
    ("rotation_min_degrees", "lower end of the rotation range"),
    ("rotation_max_degrees", "upper end of the rotation range"),
    ("data_dir", "directory with images/ and masks/; empty for synthetic data"),
    ("n_train", "synthetic training images"),
    ("n_test", "synthetic test images"),
    ("size_min", "smallest object area as a fraction of the canvas"),
    ("size_max", "largest object area as a fraction of the canvas"),
    ("contrast_min", "smallest object/background colour offset"),
    ("contrast_max", "largest object/background colour offset"),
    ("data_seed", "seed of the synthetic dataset"),
    ("seed", "seed of initialization, shuffling and augmentation"),
    ("seeds", "comma-separated seeds for ablations"),
    ("variants", "comma-separated ablation arms (variants plus cross_entropy)"),
    ("lambdas", "comma-separated λ values for the sweep"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneKind,
    pub stage_channels: Vec<usize>,
    pub branch_channels: usize,
    pub fuse_channels: usize,
    pub ami_channels: usize,
    pub input_size: (usize, usize),
    pub variant: ModelVariant,
    pub loss: String,
    pub lambda: Float,
    pub beta_sq: Float,
    pub epsilon: Float,
    pub learning_rate: Float,
    pub momentum: Float,
    pub patience: usize,
    pub lr_factor: Float,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: bool,
    pub hflip_probability: Float,
    pub rotation_min_degrees: Float,
    pub rotation_max_degrees: Float,
    pub data_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub size_min: Float,
    pub size_max: Float,
    pub contrast_min: Float,
    pub contrast_max: Float,
    pub data_seed: u64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub lambdas: Vec<Float>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = DfnetConfig::default();
        let loss = LossConfig::default();
        let optim = OptimConfig::default();
        let train = TrainConfig::default();
        let aug = AugmentConfig::default();
        let synth = SyntheticDatasetSpec::default();
        RunConfig {
            backbone: model.backbone.kind,
            stage_channels: Vec::new(),
            branch_channels: model.branch_channels,
            fuse_channels: model.fuse_channels,
            ami_channels: model.ami_channels,
            input_size: model.input_size,
            variant: model.variant,
            loss: LossKind::default().name().into(),
            lambda: loss.lambda,
            beta_sq: loss.beta_sq,
            epsilon: loss.epsilon,
            learning_rate: optim.learning_rate,
            momentum: optim.momentum,
            patience: train.patience,
            lr_factor: train.lr_factor,
            batch_size: train.batch_size,
            epochs: train.epochs,
            augment: aug.enabled,
            hflip_probability: aug.hflip_probability,
            rotation_min_degrees: aug.rotation_range_degrees.0,
            rotation_max_degrees: aug.rotation_range_degrees.1,
            data_dir: None,
            n_train: synth.n_train,
            n_test: synth.n_test,
            size_min: synth.size_range.0,
            size_max: synth.size_range.1,
            contrast_min: synth.contrast_range.0,
            contrast_max: synth.contrast_range.1,
            data_seed: synth.seed,
            seed: 0,
            seeds: vec![0, 1, 2],
            variants: ablation_arms(loss).into_iter().map(|a| a.name).collect(),
            lambdas: default_lambdas(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err!("invalid value {value:?} for key {key:?}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse_value(key, h.trim())?, parse_value(key, w.trim())?)),
        None => {
            let s = parse_value(key, value)?;
            Ok((s, s))
        }
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "backbone" => {
                self.backbone = v.parse().map_err(|_| config_err!("invalid value {v:?} for key \"backbone\""))?
            }
            "stage_channels" => self.stage_channels = parse_list(key, v)?,
            "branch_channels" => self.branch_channels = parse_value(key, v)?,
            "fuse_channels" => self.fuse_channels = parse_value(key, v)?,
            "ami_channels" => self.ami_channels = parse_value(key, v)?,
            "input_size" => self.input_size = parse_size(key, v)?,
            "variant" => {
                self.variant = v.parse().map_err(|_| {
                    config_err!(
                        "invalid value {v:?} for key \"variant\"; valid: {}",
                        join(&ModelVariant::ALL.map(ModelVariant::name))
                    )
                })?
            }
            "loss" => {
                LossKind::from_str(v).map_err(|_| config_err!("invalid value {v:?} for key \"loss\""))?;
                self.loss = v.into();
            }
            "lambda" => self.lambda = parse_value(key, v)?,
            "beta_sq" => self.beta_sq = parse_value(key, v)?,
            "epsilon" => self.epsilon = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "lr_factor" => self.lr_factor = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "augment" => self.augment = parse_value(key, v)?,
            "hflip_probability" => self.hflip_probability = parse_value(key, v)?,
            "rotation_min_degrees" => self.rotation_min_degrees = parse_value(key, v)?,
            "rotation_max_degrees" => self.rotation_max_degrees = parse_value(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "n_train" => self.n_train = parse_value(key, v)?,
            "n_test" => self.n_test = parse_value(key, v)?,
            "size_min" => self.size_min = parse_value(key, v)?,
            "size_max" => self.size_max = parse_value(key, v)?,
            "contrast_min" => self.contrast_min = parse_value(key, v)?,
            "contrast_max" => self.contrast_max = parse_value(key, v)?,
            "data_seed" => self.data_seed = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "variants" => {
                let names: Vec<String> = parse_list(key, v)?;
                for n in &names {
                    ExperimentArm::by_name(n, LossConfig::default())?;
                }
                self.variants = names;
            }
            "lambdas" => self.lambdas = parse_list(key, v)?,
            other => return Err(config_err!("unknown config key {other:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "backbone" => self.backbone.to_string(),
            "stage_channels" => join(&self.stage_channels),
            "branch_channels" => self.branch_channels.to_string(),
            "fuse_channels" => self.fuse_channels.to_string(),
            "ami_channels" => self.ami_channels.to_string(),
            "input_size" => format!("{}x{}", self.input_size.0, self.input_size.1),
            "variant" => self.variant.name().into(),
            "loss" => self.loss.clone(),
            "lambda" => self.lambda.to_string(),
            "beta_sq" => self.beta_sq.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "patience" => self.patience.to_string(),
            "lr_factor" => self.lr_factor.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "augment" => self.augment.to_string(),
            "hflip_probability" => self.hflip_probability.to_string(),
            "rotation_min_degrees" => self.rotation_min_degrees.to_string(),
            "rotation_max_degrees" => self.rotation_max_degrees.to_string(),
            "data_dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "size_min" => self.size_min.to_string(),
            "size_max" => self.size_max.to_string(),
            "contrast_min" => self.contrast_min.to_string(),
            "contrast_max" => self.contrast_max.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => join(&self.seeds),
            "variants" => self.variants.join(","),
            "lambdas" => join(&self.lambdas),
            _ => unreachable!("key table and accessor disagree on {key}"),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every setting of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", n + 1))?;
            let key = key.trim();
            if key.starts_with(META_PREFIX) {
                continue;
            }
            self.set(key, value)
                .map_err(|e| config_err!("line {}: {}", n + 1, strip_prefix(&e.to_string())))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config file {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| config_err!("{}: {}", path.display(), strip_prefix(&e.to_string())))
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key));
        }
        s
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            beta_sq: self.beta_sq,
            epsilon: self.epsilon,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss.as_str() {
            "cross_entropy" => LossKind::CrossEntropy {
                epsilon: self.epsilon,
            },
            _ => LossKind::Sharpening(self.loss_config()),
        }
    }

    pub fn model_config(&self) -> Result<DfnetConfig> {
        let backbone = if self.stage_channels.is_empty() {
            match self.backbone {
                BackboneKind::Tiny3 => BackboneSpec::tiny3(),
                BackboneKind::Tiny4 => BackboneSpec::tiny4(),
                BackboneKind::ExternalFeatures => {
                    return Err(config_err!("backbone \"external\" needs explicit stage_channels"))
                }
            }
        } else {
            BackboneSpec::with_stage_channels(self.backbone, &self.stage_channels)
        };
        let cfg = DfnetConfig {
            backbone,
            branch_channels: self.branch_channels,
            fuse_channels: self.fuse_channels,
            ami_channels: self.ami_channels,
            input_size: self.input_size,
            seed: self.seed,
            variant: self.variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: OptimConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
            },
            patience: self.patience,
            lr_factor: self.lr_factor,
            augment: AugmentConfig {
                enabled: self.augment,
                hflip_probability: self.hflip_probability,
                rotation_range_degrees: (self.rotation_min_degrees, self.rotation_max_degrees),
            },
            loss: self.loss_kind(),
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Synthetic data drawn on the model input canvas.
    pub fn synthetic_spec(&self) -> Result<SyntheticDatasetSpec> {
        let spec = SyntheticDatasetSpec {
            n_train: self.n_train,
            n_test: self.n_test,
            canvas: self.input_size,
            size_range: (self.size_min, self.size_max),
            contrast_range: (self.contrast_min, self.contrast_max),
            seed: self.data_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn arms(&self) -> Result<Vec<ExperimentArm>> {
        self.variants
            .iter()
            .map(|n| ExperimentArm::by_name(n, self.loss_config()))
            .collect()
    }
}

fn strip_prefix(msg: &str) -> &str {
    msg.strip_prefix("configuration error: ").unwrap_or(msg)
}
