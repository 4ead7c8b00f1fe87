//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Keys are dotted
//! (`backbone.depth`, `fusion.num_frames`, ...). Unknown keys are rejected.
//! [`RunConfig::to_text`] writes every key, and parsing that text gives the
//! same configuration back.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::capsule::{CapsuleOrder, RouteGrad};
use crate::error::{Error, Result};
use crate::fusion::Gate;
use crate::model::ModelConfig;
use crate::training::{Precision, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Separate held-out manifest; when absent the training manifest is split.
    pub test_manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            test_manifest: None,
            train_fraction: 0.7,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "precision",
    "backbone.depth",
    "backbone.channels",
    "backbone.input_size",
    "backbone.pool",
    "backbone.freeze",
    "capsule.num_primary",
    "capsule.conv_channels",
    "capsule.sa_kernel",
    "capsule.conv1d_channels",
    "capsule.conv1d_kernel",
    "capsule.output_dim",
    "capsule.routing_iters",
    "capsule.squash_epsilon",
    "capsule.squash_predictions",
    "capsule.routing_init_scale",
    "capsule.route_grad",
    "capsule.order",
    "capsule.bn_momentum",
    "capsule.bn_epsilon",
    "fusion.num_frames",
    "fusion.ta_hidden",
    "fusion.num_classes",
    "fusion.alpha_epsilon",
    "fusion.ta_gate",
    "fusion.ta_fc1_bias_init",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.epochs",
    "train.decay_bn",
    "train.checkpoint_every",
    "data.manifest",
    "data.test_manifest",
    "data.train_fraction",
    "output.dir",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

/// `64,64/128,128/256,256,256,256`: stages separated by `/`.
pub fn parse_channels(v: &str) -> Result<Vec<Vec<usize>>> {
    v.split('/')
        .map(|stage| {
            stage
                .split(',')
                .map(|c| num::<usize>("backbone.channels", c.trim()))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

pub fn format_channels(stages: &[Vec<usize>]) -> String {
    stages
        .iter()
        .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("/")
}

impl RunConfig {
    /// Model preset with the default optimiser settings, except that
    /// `small` trains with smaller batches at a higher learning rate.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            model: ModelConfig::preset(name)?,
            ..Self::default()
        };
        if name == "small" {
            cfg.train.lr = 0.02;
            cfg.train.batch_size = 5;
        }
        Ok(cfg)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.train.seed = num(key, v)?,
            "precision" => self.train.precision = Precision::from_bits(num(key, v)?)?,
            "backbone.depth" => {
                let keep = m.backbone.clone();
                m.backbone = BackboneConfig {
                    input_size: keep.input_size,
                    pool_after_each_stage: keep.pool_after_each_stage,
                    freeze: keep.freeze,
                    ..BackboneConfig::for_depth(num(key, v)?)?
                };
            }
            "backbone.channels" => m.backbone.stage_channels = parse_channels(v)?,
            "backbone.input_size" => m.backbone.input_size = num(key, v)?,
            "backbone.pool" => m.backbone.pool_after_each_stage = boolean(key, v)?,
            "backbone.freeze" => m.backbone.freeze = boolean(key, v)?,
            "capsule.num_primary" => m.capsule.num_primary = num(key, v)?,
            "capsule.conv_channels" => m.capsule.conv_channels = num(key, v)?,
            "capsule.sa_kernel" => m.capsule.sa_kernel = num(key, v)?,
            "capsule.conv1d_channels" => m.capsule.conv1d_channels = num(key, v)?,
            "capsule.conv1d_kernel" => m.capsule.conv1d_kernel = num(key, v)?,
            "capsule.output_dim" => {
                m.capsule.output_dim = num(key, v)?;
                m.fusion.feature_dim = m.capsule.output_dim;
            }
            "capsule.routing_iters" => m.capsule.routing_iters = num(key, v)?,
            "capsule.squash_epsilon" => m.capsule.squash_epsilon = num(key, v)?,
            "capsule.squash_predictions" => m.capsule.squash_predictions = boolean(key, v)?,
            "capsule.routing_init_scale" => m.capsule.routing_init_scale = num(key, v)?,
            "capsule.route_grad" => {
                m.capsule.route_grad = match v {
                    "final_iteration" => RouteGrad::FinalIteration,
                    "unrolled" => RouteGrad::Unrolled,
                    _ => return Err(Error::Config(format!("`{key}`: expected final_iteration or unrolled, got `{v}`"))),
                }
            }
            "capsule.order" => {
                m.capsule.order = match v {
                    "bn_mfm" => CapsuleOrder::BnBeforeMfm,
                    "mfm_bn" => CapsuleOrder::BnAfterMfm,
                    _ => return Err(Error::Config(format!("`{key}`: expected bn_mfm or mfm_bn, got `{v}`"))),
                }
            }
            "capsule.bn_momentum" => m.capsule.bn_momentum = num(key, v)?,
            "capsule.bn_epsilon" => m.capsule.bn_epsilon = num(key, v)?,
            "fusion.num_frames" => m.fusion.num_frames = num(key, v)?,
            "fusion.ta_hidden" => m.fusion.ta_hidden = num(key, v)?,
            "fusion.num_classes" => {
                m.fusion.num_classes = num(key, v)?;
                m.capsule.num_output = m.fusion.num_classes;
            }
            "fusion.alpha_epsilon" => m.fusion.alpha_epsilon = num(key, v)?,
            "fusion.ta_gate" => {
                m.fusion.ta_gate = match v {
                    "relu" => Gate::Relu,
                    "sigmoid" => Gate::Sigmoid,
                    _ => return Err(Error::Config(format!("`{key}`: expected relu or sigmoid, got `{v}`"))),
                }
            }
            "fusion.ta_fc1_bias_init" => m.fusion.ta_fc1_bias_init = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.momentum" => self.train.momentum = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.decay_bn" => self.train.decay_bn = boolean(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "data.manifest" => self.data.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.test_manifest" => self.data.test_manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.train_fraction" => self.data.train_fraction = num(key, v)?,
            "output.dir" => self.data.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies the lines of a config file on top of `self`. Relative paths
    /// are resolved against `base`.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let wrap = |e: Error| match e {
                Error::Config(msg) => Error::ConfigLine { line: no + 1, msg },
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| wrap(Error::Config(format!("expected `key = value`, got `{line}`"))))?;
            let key = key.trim();
            self.set(key, value).map_err(wrap)?;
            if matches!(key, "data.manifest" | "data.test_manifest" | "output.dir") {
                let fix = |p: &mut PathBuf| {
                    if p.is_relative() && !p.as_os_str().is_empty() {
                        *p = base.join(&*p);
                    }
                };
                match key {
                    "data.manifest" => self.data.manifest.as_mut().map(fix),
                    "data.test_manifest" => self.data.test_manifest.as_mut().map(fix),
                    _ => Some(fix(&mut self.data.out_dir)),
                };
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, Path::new(""))?;
        Ok(cfg)
    }

    /// Reads `spec`, which is a preset name or a path to a config file.
    pub fn load(spec: &str) -> Result<Self> {
        if crate::model::PRESETS.contains(&spec) {
            return Self::preset(spec);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path.parent().unwrap_or(Path::new("")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config("data.train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Fully resolved configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.train.seed.to_string());
        put("precision", self.train.precision.bits().to_string());
        put("backbone.channels", format_channels(&m.backbone.stage_channels));
        put("backbone.input_size", m.backbone.input_size.to_string());
        put("backbone.pool", m.backbone.pool_after_each_stage.to_string());
        put("backbone.freeze", m.backbone.freeze.to_string());
        put("capsule.num_primary", m.capsule.num_primary.to_string());
        put("capsule.conv_channels", m.capsule.conv_channels.to_string());
        put("capsule.sa_kernel", m.capsule.sa_kernel.to_string());
        put("capsule.conv1d_channels", m.capsule.conv1d_channels.to_string());
        put("capsule.conv1d_kernel", m.capsule.conv1d_kernel.to_string());
        put("capsule.output_dim", m.capsule.output_dim.to_string());
        put("capsule.routing_iters", m.capsule.routing_iters.to_string());
        put("capsule.squash_epsilon", format!("{:e}", m.capsule.squash_epsilon));
        put("capsule.squash_predictions", m.capsule.squash_predictions.to_string());
        put("capsule.routing_init_scale", m.capsule.routing_init_scale.to_string());
        put(
            "capsule.route_grad",
            match m.capsule.route_grad {
                RouteGrad::FinalIteration => "final_iteration",
                RouteGrad::Unrolled => "unrolled",
            }
            .into(),
        );
        put(
            "capsule.order",
            match m.capsule.order {
                CapsuleOrder::BnBeforeMfm => "bn_mfm",
                CapsuleOrder::BnAfterMfm => "mfm_bn",
            }
            .into(),
        );
        put("capsule.bn_momentum", m.capsule.bn_momentum.to_string());
        put("capsule.bn_epsilon", format!("{:e}", m.capsule.bn_epsilon));
        put("fusion.num_frames", m.fusion.num_frames.to_string());
        put("fusion.ta_hidden", m.fusion.ta_hidden.to_string());
        put("fusion.num_classes", m.fusion.num_classes.to_string());
        put("fusion.alpha_epsilon", format!("{:e}", m.fusion.alpha_epsilon));
        put(
            "fusion.ta_gate",
            match m.fusion.ta_gate {
                Gate::Relu => "relu",
                Gate::Sigmoid => "sigmoid",
            }
            .into(),
        );
        put("fusion.ta_fc1_bias_init", m.fusion.ta_fc1_bias_init.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.momentum", self.train.momentum.to_string());
        put("train.weight_decay", self.train.weight_decay.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.decay_bn", self.train.decay_bn.to_string());
        put("train.checkpoint_every", self.train.checkpoint_every.to_string());
        put("data.manifest", path(&self.data.manifest));
        put("data.test_manifest", path(&self.data.test_manifest));
        put("data.train_fraction", self.data.train_fraction.to_string());
        put("output.dir", self.data.out_dir.display().to_string());
        out
    }
}
