//! The full network: backbone, primary capsules, routing and fusion head.

use indexmap::IndexMap;

use crate::backbone::{self, BackboneConfig};
use crate::capsule::{self, CapsuleConfig, CapsuleState, RouteGrad};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::layers::{BatchNormState, BatchStats, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub capsule: CapsuleConfig,
    pub fusion: FusionConfig,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            capsule: CapsuleConfig::default(),
            fusion: FusionConfig::default(),
            in_channels: 3,
        }
    }
}

pub const PRESETS: [&str; 3] = ["tiny", "small", "default"];

impl ModelConfig {
    /// Two 16x16 frames, three classes and a handful of channels. Small
    /// enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: vec![vec![4], vec![4], vec![6]],
                input_size: 16,
                ..BackboneConfig::default()
            },
            capsule: CapsuleConfig {
                num_output: 3,
                conv_channels: 4,
                sa_kernel: 3,
                output_dim: 4,
                routing_init_scale: 4.0,
                ..CapsuleConfig::default()
            },
            fusion: FusionConfig {
                num_frames: 2,
                feature_dim: 4,
                ta_hidden: 4,
                num_classes: 3,
                ..FusionConfig::default()
            },
            in_channels: 3,
        }
    }

    /// The default layout at reduced width, for CPU-scale training runs.
    /// Predictions are routed unsquashed and the routing weights start
    /// larger, otherwise the narrow backbone's capsule outputs are too small
    /// for the classifier to see.
    pub fn small() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: vec![vec![8, 8], vec![16, 16], vec![32, 32]],
                ..BackboneConfig::default()
            },
            capsule: CapsuleConfig {
                squash_predictions: false,
                routing_init_scale: 14.0,
                ..CapsuleConfig::default()
            },
            fusion: FusionConfig::default(),
            in_channels: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "default" => Ok(Self::default()),
            _ => Err(Error::Config(format!("unknown preset `{name}`, expected one of {PRESETS:?}"))),
        }
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size
    }

    pub fn num_classes(&self) -> usize {
        self.fusion.num_classes
    }

    pub fn num_frames(&self) -> usize {
        self.fusion.num_frames
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.capsule.validate()?;
        self.fusion.validate()?;
        if self.capsule.num_output != self.fusion.num_classes {
            return Err(Error::Config(format!(
                "capsule.num_output ({}) must equal fusion.num_classes ({})",
                self.capsule.num_output, self.fusion.num_classes
            )));
        }
        if self.capsule.output_dim != self.fusion.feature_dim {
            return Err(Error::Config(format!(
                "capsule.output_dim ({}) must equal fusion.feature_dim ({})",
                self.capsule.output_dim, self.fusion.feature_dim
            )));
        }
        let map = self.backbone.output_size(self.backbone.input_size)?;
        if map * map < 2 {
            return Err(Error::Config("backbone output map must have at least two positions".into()));
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a [`ParamStore`], by full name.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    /// Records every tensor on `tape`. Backbone tensors become constants
    /// when `freeze_backbone` is set.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, freeze_backbone: bool) -> Self {
        let mut vars = IndexMap::new();
        for (name, t) in store.iter() {
            let v = if freeze_backbone && name.starts_with("backbone.") {
                tape.constant(t.clone())
            } else {
                tape.param(t.clone())
            };
            vars.insert(name, v);
        }
        Self { vars }
    }

    /// Slices every tensor out of one flat vector, in store order, so that a
    /// whole model is a function of a single input.
    pub fn bind_flat<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, flat: Var) -> Result<Self> {
        let mut vars = IndexMap::new();
        let mut offset = 0;
        for (name, t) in store.iter() {
            let v = tape.slice(flat, offset, t.shape())?;
            offset += t.numel();
            vars.insert(name, v);
        }
        if offset != tape.value(flat).numel() {
            return Err(Error::invalid("bind_flat", format!("flat vector has {} values, store has {offset}", tape.value(flat).numel())));
        }
        Ok(Self { vars })
    }

    pub fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter after `tape.backward`. Entries
    /// bound as constants are skipped.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> IndexMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }
}

/// Everything a forward pass produces.
pub struct Forward<T> {
    /// `[V, K]`.
    pub logits: Var,
    /// `[V, K]`.
    pub probs: Var,
    /// `[V, N]`.
    pub alpha: Var,
    /// `[V, N, D]`.
    pub frame_features: Var,
    /// `[V, D]`.
    pub fused: Var,
    /// Conv activations by layer name, each `[V*N, C, h, w]`.
    pub trace: IndexMap<String, Var>,
    /// Routing state of every frame, video-major.
    pub states: Vec<CapsuleState<T>>,
    /// Batch statistics to fold into the running averages.
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapstModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Running statistics keyed by the batch-norm layer name.
    pub bn: IndexMap<String, BatchNormState<T>>,
}

impl<T: Scalar> CapstModel<T> {
    /// Fresh model with weights drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init");
        let mut params = ParamStore::new();
        for l in backbone::init_params(&config.backbone, config.in_channels, &mut r) {
            params.insert(l)?;
        }
        let feat = config.backbone.out_channels(config.in_channels);
        for l in capsule::init_params(&config.capsule, feat, &mut r) {
            params.insert(l)?;
        }
        for l in fusion::init_params(&config.fusion, &mut r) {
            params.insert(l)?;
        }
        let bn = (0..config.capsule.num_primary)
            .map(|i| (capsule::primary_layer(i, "bn"), config.capsule.new_bn_state()))
            .collect();
        Ok(Self { config, params, bn })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Same model at another precision.
    pub fn cast<U: Scalar>(&self) -> CapstModel<U> {
        let mut params = ParamStore::new();
        for l in self.params.layers() {
            let mut out = crate::layers::LayerParams::new(l.name.clone());
            for (k, t) in &l.tensors {
                out = out.with(k, t.cast());
            }
            params.insert(out).expect("names are unique");
        }
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        let bn = self
            .bn
            .iter()
            .map(|(k, s)| {
                (
                    k.clone(),
                    BatchNormState {
                        running_mean: conv(&s.running_mean),
                        running_var: conv(&s.running_var),
                        momentum: s.momentum,
                        epsilon: s.epsilon,
                        training_mode: s.training_mode,
                    },
                )
            })
            .collect();
        CapstModel {
            config: self.config.clone(),
            params,
            bn,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings::bind(tape, &self.params, self.config.backbone.freeze)
    }

    /// All parameters concatenated in store order.
    pub fn flat_params(&self) -> Tensor<T> {
        let data: Vec<T> = self.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        Tensor::from_parts(vec![data.len()], data)
    }

    /// Runs `frames` (`[V, N, C, H, W]`) through the network. `training`
    /// selects batch statistics in batch normalisation.
    pub fn forward(&self, tape: &mut Tape<T>, params: &Bindings, frames: Var, training: bool) -> Result<Forward<T>> {
        let cfg = &self.config;
        let shape = tape.shape(frames).to_vec();
        let [v, n, c, h, w] = shape[..] else {
            return Err(Error::invalid("forward", format!("expected [V,N,C,H,W], got {shape:?}")));
        };
        if n != cfg.num_frames() || c != cfg.in_channels || h != cfg.input_size() || w != cfg.input_size() {
            return Err(Error::invalid(
                "forward",
                format!(
                    "input {shape:?} does not match the configured [V,{},{},{},{}]",
                    cfg.num_frames(),
                    cfg.in_channels,
                    cfg.input_size(),
                    cfg.input_size()
                ),
            ));
        }
        let x = tape.reshape(frames, &[v * n, c, h, w])?;
        let (features, bb_trace) = backbone::extract(tape, x, params, &cfg.backbone)?;
        let mut trace: IndexMap<String, Var> = bb_trace.into_iter().collect();
        let mut primaries = Vec::with_capacity(cfg.capsule.num_primary);
        let mut bn_updates = Vec::new();
        for i in 0..cfg.capsule.num_primary {
            let name = capsule::primary_layer(i, "bn");
            let mut state = self.bn.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?.clone();
            state.training_mode = training;
            let out = capsule::primary_capsule(tape, features, params, i, &cfg.capsule, &state)?;
            primaries.push(out.capsule);
            trace.extend(out.trace);
            if let Some(st) = out.bn_stats {
                bn_updates.push((name, st));
            }
        }
        let (caps, states) = capsule::dynamic_routing(
            tape,
            &primaries,
            params.get(&format!("{}.weight", capsule::ROUTING_LAYER))?,
            params.get(&format!("{}.bias", capsule::ROUTING_LAYER))?,
            &cfg.capsule,
        )?;
        let per_frame = capsule::frame_feature(tape, caps)?;
        let d = cfg.capsule.output_dim;
        let frame_features = tape.reshape(per_frame, &[v, n, d])?;
        let (alpha, fused) = fusion::temporal_attention(tape, frame_features, params, &cfg.fusion)?;
        let (logits, probs) = fusion::classify(tape, fused, params)?;
        Ok(Forward {
            logits,
            probs,
            alpha,
            frame_features,
            fused,
            trace,
            states,
            bn_updates,
        })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) -> Result<()> {
        for (name, st) in updates {
            self.bn
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?
                .update(st);
        }
        Ok(())
    }

    /// Class probabilities of a batch in inference mode, `[V, K]` row-major.
    pub fn predict(&self, frames: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = tape.constant(frames.clone());
        let out = self.forward(&mut tape, &params, x, false)?;
        let k = self.config.num_classes();
        Ok(tape.data(out.probs).chunks(k).map(<[T]>::to_vec).collect())
    }
}

/// Model with every routing iteration recorded on the tape, so that the
/// loss is a plain differentiable function of the parameters.
pub fn with_unrolled_routing(mut config: ModelConfig) -> ModelConfig {
    config.capsule.route_grad = RouteGrad::Unrolled;
    config
}

/// Central-difference check of the loss gradient with respect to every
/// parameter, in 64-bit, on `videos` random clips. Routing is unrolled so
/// that the recorded gradient is the exact derivative of the loss; with
/// `routing_iters = 1` both gradient modes coincide.
pub fn gradcheck_model(
    config: &ModelConfig,
    seed: u64,
    videos: usize,
    epsilon: f64,
    tolerance: f64,
) -> Result<crate::tensor::GradcheckReport> {
    let mut config = config.clone();
    if config.capsule.routing_iters > 1 {
        config = with_unrolled_routing(config);
    }
    let model = CapstModel::<f64>::new(config.clone(), seed)?;
    let s = config.input_size();
    let shape = [videos, config.num_frames(), config.in_channels, s, s];
    let mut r = rng::stream(seed, "gradcheck");
    let noise: Tensor<f64> = crate::layers::uniform(&mut r, &shape, 0.5);
    let frames = Tensor::new(&shape, noise.data().iter().map(|v| v + 0.5).collect())?;
    let labels: Vec<usize> = (0..videos).map(|v| v % config.num_classes()).collect();
    let f = |tape: &mut Tape<f64>, flat: Var| -> Result<Var> {
        let params = Bindings::bind_flat(tape, &model.params, flat)?;
        let x = tape.constant(frames.clone());
        let out = model.forward(tape, &params, x, true)?;
        fusion::cross_entropy(tape, out.probs, &labels)
    };
    crate::tensor::gradcheck(f, &model.flat_params(), epsilon, tolerance)
}
