//! Trainable layer primitives shared by the backbone and the capsule module.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named parameter tensors of one layer, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tensors: IndexMap::new(),
        }
    }

    pub fn with(mut self, key: &str, tensor: Tensor<T>) -> Self {
        self.tensors.insert(key.to_string(), tensor);
        self
    }

    pub fn get(&self, key: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::MissingTensor(format!("{}.{key}", self.name)))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Every trainable tensor of a model, grouped by layer. Full tensor names
/// are `<layer>.<key>`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    layers: IndexMap<String, LayerParams<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            layers: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, layer: LayerParams<T>) -> Result<()> {
        if self.layers.contains_key(&layer.name) {
            return Err(Error::Config(format!("duplicate layer name `{}`", layer.name)));
        }
        self.layers.insert(layer.name.clone(), layer);
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Result<&LayerParams<T>> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerParams<T>> {
        self.layers.values()
    }

    /// `(full name, tensor)` in deterministic order.
    pub fn iter(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.layers
            .values()
            .flat_map(|l| l.tensors.iter().map(move |(k, t)| (format!("{}.{k}", l.name), t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor<T>)> {
        self.layers.values_mut().flat_map(|l| {
            let name = l.name.clone();
            l.tensors.iter_mut().map(move |(k, t)| (format!("{name}.{k}"), t))
        })
    }

    pub fn get(&self, full_name: &str) -> Option<&Tensor<T>> {
        let (layer, key) = full_name.rsplit_once('.')?;
        self.layers.get(layer)?.tensors.get(key)
    }

    pub fn get_mut(&mut self, full_name: &str) -> Option<&mut Tensor<T>> {
        let (layer, key) = full_name.rsplit_once('.')?;
        self.layers.get_mut(layer)?.tensors.get_mut(key)
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().map(LayerParams::param_count).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.iter_mut() {
            t.zero_grad();
        }
    }
}

/// Per-channel running statistics of a batch-normalisation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub training_mode: bool,
}

/// Batch mean and unbiased variance of one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            momentum,
            epsilon,
            training_mode: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::ONE - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Max-Feature-Map over the channel axis: `max(first half, second half)`.
pub fn mfm<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.mfm(x)
}

/// CBAM-style spatial attention. `weight` is `[1, 2, k, k]` with `k` odd and
/// acts on the stacked channel-mean and channel-max maps; the sigmoid mask
/// scales every channel.
pub fn spatial_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let ws = tape.shape(weight).to_vec();
    if ws.len() != 4 || ws[0] != 1 || ws[1] != 2 || ws[2] != ws[3] {
        return Err(Error::invalid("spatial_attention", format!("weight must be [1,2,k,k], got {ws:?}")));
    }
    let k = ws[2];
    if k % 2 == 0 {
        return Err(Error::invalid("spatial_attention", format!("kernel {k} must be odd")));
    }
    let pooled = tape.channel_mean_max(x)?;
    let logits = tape.conv2d(pooled, weight, bias, 1, k / 2)?;
    let mask = tape.sigmoid(logits);
    tape.apply_mask(x, mask)
}

/// Per-channel mean and sample variance, `[K,H,W] -> [2K]`.
pub fn statistical_pooling<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.stat_pool(x)
}

pub fn conv1d<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.conv1d(x, weight, bias)
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.linear(x, weight, bias)
}

/// Batch normalisation driven by `state`. In training mode the batch
/// statistics are returned; the caller folds them into `state` with
/// [`BatchNormState::update`] once the step is committed.
pub fn batchnorm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &BatchNormState<T>,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let (y, stats) = tape.batchnorm(
        x,
        gamma,
        beta,
        (&state.running_mean, &state.running_var),
        T::from_f64(state.epsilon),
        state.training_mode,
    )?;
    Ok((y, stats.map(|(mean, var)| BatchStats { mean, var })))
}

/// Uniform values in `[-bound, bound]`.
pub fn uniform<T: Scalar>(rng: &mut StreamRng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Kaiming-uniform initialisation for a relu layer with the given fan-in.
pub fn kaiming_uniform<T: Scalar>(rng: &mut StreamRng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}
