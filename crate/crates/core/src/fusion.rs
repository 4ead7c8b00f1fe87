//! Temporal attention over frame features, classifier and loss.

use crate::error::{Error, Result};
use crate::layers::{self, LayerParams};
use crate::model::Bindings;
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Final activation producing the frame weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub num_frames: usize,
    pub feature_dim: usize,
    pub ta_hidden: usize,
    pub num_classes: usize,
    pub alpha_epsilon: f64,
    pub ta_gate: Gate,
    /// Initial bias of the second attention layer. A positive value keeps
    /// every relu-gated frame weight alive at the start of training.
    pub ta_fc1_bias_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_frames: 10,
            feature_dim: 256,
            ta_hidden: 64,
            num_classes: 5,
            alpha_epsilon: 1e-8,
            ta_gate: Gate::Relu,
            ta_fc1_bias_init: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("fusion.num_frames", self.num_frames),
            ("fusion.feature_dim", self.feature_dim),
            ("fusion.ta_hidden", self.ta_hidden),
            ("fusion.num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.alpha_epsilon > 0.0) {
            return Err(Error::Config("fusion.alpha_epsilon must be positive".into()));
        }
        Ok(())
    }
}

pub const TA_FC0: &str = "fusion.ta_fc0";
pub const TA_FC1: &str = "fusion.ta_fc1";
pub const CLASSIFIER: &str = "fusion.classifier";

/// Log clamp inside the loss.
pub const LOG_EPSILON: f64 = 1e-12;

pub fn init_params<T: Scalar>(config: &FusionConfig, rng: &mut StreamRng) -> Vec<LayerParams<T>> {
    let (n, d, h, k) = (config.num_frames, config.feature_dim, config.ta_hidden, config.num_classes);
    let lin = |rng: &mut StreamRng, m: usize, fan_in: usize| layers::uniform(rng, &[m, fan_in], 1.0 / (fan_in as f64).sqrt());
    vec![
        LayerParams::new(TA_FC0)
            .with("weight", lin(rng, h, n * d))
            .with("bias", Tensor::zeros(&[h])),
        LayerParams::new(TA_FC1)
            .with("weight", lin(rng, n, h))
            .with("bias", Tensor::full(&[n], T::from_f64(config.ta_fc1_bias_init))),
        LayerParams::new(CLASSIFIER)
            .with("weight", lin(rng, k, d))
            .with("bias", Tensor::zeros(&[k])),
    ]
}

/// Frame weights and fused feature for `f` of shape `[V, N, D]` (or
/// `[N, D]`). Returns `(alpha [V, N], f_final [V, D])`.
pub fn temporal_attention<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    params: &Bindings,
    config: &FusionConfig,
) -> Result<(Var, Var)> {
    let shape = tape.shape(f).to_vec();
    let (v, n, d) = match shape[..] {
        [n, d] => (1, n, d),
        [v, n, d] => (v, n, d),
        _ => return Err(Error::invalid("temporal_attention", format!("expected [V,N,D], got {shape:?}"))),
    };
    if n != config.num_frames || d != config.feature_dim {
        return Err(Error::invalid(
            "temporal_attention",
            format!(
                "got {n} frames of width {d}, config expects {} of width {}",
                config.num_frames, config.feature_dim
            ),
        ));
    }
    let fv = tape.reshape(f, &[v, n, d])?;
    let flat = tape.reshape(f, &[v, n * d])?;
    let h = layers::linear(tape, flat, params.get(&format!("{TA_FC0}.weight"))?, params.get(&format!("{TA_FC0}.bias"))?)?;
    let h = tape.relu(h);
    let a = layers::linear(tape, h, params.get(&format!("{TA_FC1}.weight"))?, params.get(&format!("{TA_FC1}.bias"))?)?;
    let alpha = match config.ta_gate {
        Gate::Relu => tape.relu(a),
        Gate::Sigmoid => tape.sigmoid(a),
    };
    let fused = weighted_mean(tape, fv, alpha, config.alpha_epsilon)?;
    if shape.len() == 2 {
        Ok((tape.reshape(alpha, &[n])?, tape.reshape(fused, &[d])?))
    } else {
        Ok((alpha, fused))
    }
}

/// `sum_t alpha_t * f_t / (sum_t alpha_t + eps)` for `f` `[V, N, D]` and
/// `alpha` `[V, N]`.
pub fn weighted_mean<T: Scalar>(tape: &mut Tape<T>, f: Var, alpha: Var, epsilon: f64) -> Result<Var> {
    tape.attention_pool(f, alpha, T::from_f64(epsilon))
}

/// Class scores and softmax probabilities for `f_final` (`[V, D]` or `[D]`).
pub fn classify<T: Scalar>(tape: &mut Tape<T>, f_final: Var, params: &Bindings) -> Result<(Var, Var)> {
    let logits = layers::linear(
        tape,
        f_final,
        params.get(&format!("{CLASSIFIER}.weight"))?,
        params.get(&format!("{CLASSIFIER}.bias"))?,
    )?;
    let probs = tape.softmax(logits);
    Ok((logits, probs))
}

/// Mean of `-ln(max(p[label], 1e-12))` over rows of `probs`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(probs, labels, T::from_f64(LOG_EPSILON))
}

/// Loss against one-hot targets `y` of the same shape as `probs`.
pub fn cross_entropy_one_hot<T: Scalar>(tape: &mut Tape<T>, y: &Tensor<T>, probs: Var) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if y.shape() != shape.as_slice() {
        return Err(Error::shape("cross_entropy", y.shape(), &shape));
    }
    let k = *shape.last().unwrap_or(&0);
    let mut labels = Vec::new();
    for (row, chunk) in y.data().chunks(k).enumerate() {
        let ones: Vec<usize> = (0..k).filter(|&i| chunk[i] == T::ONE).collect();
        let zeros = chunk.iter().filter(|&&v| v == T::ZERO).count();
        if ones.len() != 1 || zeros != k - 1 {
            return Err(Error::invalid("cross_entropy", format!("target row {row} is not one-hot")));
        }
        labels.push(ones[0]);
    }
    cross_entropy(tape, probs, &labels)
}

/// Index of the largest probability; ties go to the lower index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
