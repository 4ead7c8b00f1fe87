//! Primary capsules, squash and dynamic routing.

use crate::error::{Error, Result};
use crate::layers::{self, BatchNormState, BatchStats, LayerParams};
use crate::model::Bindings;
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// How gradients pass through the routing loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteGrad {
    /// Coupling coefficients of the last iteration are constants; gradients
    /// reach the predictions through the final weighted sum only.
    FinalIteration,
    /// Every routing iteration is recorded on the tape.
    Unrolled,
}

/// Placement of batch normalisation inside a primary capsule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsuleOrder {
    /// conv, BN, MFM, spatial attention.
    BnBeforeMfm,
    /// conv, MFM, BN, spatial attention.
    BnAfterMfm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleConfig {
    pub num_primary: usize,
    pub num_output: usize,
    /// Output channels of the capsule conv; halved by MFM.
    pub conv_channels: usize,
    pub sa_kernel: usize,
    pub conv1d_channels: usize,
    pub conv1d_kernel: usize,
    pub output_dim: usize,
    pub routing_iters: usize,
    pub squash_epsilon: f64,
    /// Squash each prediction before routing.
    pub squash_predictions: bool,
    /// Multiplier on the `1/sqrt(primary_dim)` bound of the routing weights.
    pub routing_init_scale: f64,
    pub route_grad: RouteGrad,
    pub order: CapsuleOrder,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for CapsuleConfig {
    fn default() -> Self {
        Self {
            num_primary: 3,
            num_output: 5,
            conv_channels: 64,
            sa_kernel: 7,
            conv1d_channels: 2,
            conv1d_kernel: 1,
            output_dim: 256,
            routing_iters: 3,
            squash_epsilon: 1e-8,
            squash_predictions: true,
            routing_init_scale: 1.0,
            route_grad: RouteGrad::FinalIteration,
            order: CapsuleOrder::BnBeforeMfm,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl CapsuleConfig {
    /// Width of the statistics vector: mean and variance of each of the
    /// `conv_channels / 2` MFM channels.
    pub fn stats_len(&self) -> usize {
        self.conv_channels
    }

    /// Length of one primary capsule. The statistics vector is read as two
    /// rows (means, variances) of length `conv_channels / 2` and convolved
    /// along its length.
    pub fn primary_dim(&self) -> usize {
        let len = self.conv_channels / 2;
        self.conv1d_channels * (len + 1).saturating_sub(self.conv1d_kernel)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("capsule.num_primary", self.num_primary),
            ("capsule.num_output", self.num_output),
            ("capsule.conv_channels", self.conv_channels),
            ("capsule.conv1d_channels", self.conv1d_channels),
            ("capsule.conv1d_kernel", self.conv1d_kernel),
            ("capsule.output_dim", self.output_dim),
            ("capsule.routing_iters", self.routing_iters),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.conv_channels % 2 != 0 {
            return Err(Error::Config("capsule.conv_channels must be even (MFM halves it)".into()));
        }
        if self.sa_kernel % 2 == 0 {
            return Err(Error::Config("capsule.sa_kernel must be odd".into()));
        }
        if self.conv1d_kernel > self.conv_channels / 2 {
            return Err(Error::Config("capsule.conv1d_kernel exceeds the statistics length".into()));
        }
        if !(self.routing_init_scale > 0.0 && self.routing_init_scale.is_finite()) {
            return Err(Error::Config("capsule.routing_init_scale must be positive".into()));
        }
        if !(self.squash_epsilon > 0.0) {
            return Err(Error::Config("capsule.squash_epsilon must be positive".into()));
        }
        Ok(())
    }

    fn bn_channels(&self) -> usize {
        match self.order {
            CapsuleOrder::BnBeforeMfm => self.conv_channels,
            CapsuleOrder::BnAfterMfm => self.conv_channels / 2,
        }
    }

    pub fn new_bn_state<T: Scalar>(&self) -> BatchNormState<T> {
        BatchNormState::new(self.bn_channels(), self.bn_momentum, self.bn_epsilon)
    }
}

/// Routing trace of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleState<T> {
    /// Logits after the last update, `[P, J]`.
    pub logits: Tensor<T>,
    /// Coupling coefficients of the last iteration, `[P, J]`.
    pub couplings: Tensor<T>,
    /// `[P, J, D]`.
    pub predictions: Tensor<T>,
    /// `[J, D]`.
    pub outputs: Tensor<T>,
    /// Logits at the start of every iteration, then after the last one.
    pub logit_history: Vec<Tensor<T>>,
}

/// Layer names of primary capsule `i`.
pub fn primary_layer(i: usize, part: &str) -> String {
    format!("capsule.p{i}.{part}")
}

pub const ROUTING_LAYER: &str = "capsule.routing";

pub fn init_params<T: Scalar>(config: &CapsuleConfig, in_channels: usize, rng: &mut StreamRng) -> Vec<LayerParams<T>> {
    let cc = config.conv_channels;
    let (sk, c1, k1) = (config.sa_kernel, config.conv1d_channels, config.conv1d_kernel);
    let bn = config.bn_channels();
    let mut out = Vec::new();
    for i in 0..config.num_primary {
        out.push(
            LayerParams::new(primary_layer(i, "conv"))
                .with("weight", layers::kaiming_uniform(rng, &[cc, in_channels, 3, 3], in_channels * 9))
                .with("bias", Tensor::zeros(&[cc])),
        );
        out.push(
            LayerParams::new(primary_layer(i, "bn"))
                .with("gamma", Tensor::full(&[bn], T::ONE))
                .with("beta", Tensor::zeros(&[bn])),
        );
        out.push(
            LayerParams::new(primary_layer(i, "sa"))
                .with("weight", layers::uniform(rng, &[1, 2, sk, sk], 1.0 / ((2 * sk * sk) as f64).sqrt()))
                .with("bias", Tensor::zeros(&[1])),
        );
        out.push(
            LayerParams::new(primary_layer(i, "conv1d"))
                .with("weight", layers::uniform(rng, &[c1, 2, k1], 1.0 / ((2 * k1) as f64).sqrt()))
                .with("bias", Tensor::zeros(&[c1])),
        );
    }
    let (p, j, d, dp) = (config.num_primary, config.num_output, config.output_dim, config.primary_dim());
    out.push(
        LayerParams::new(ROUTING_LAYER)
            .with("weight", layers::uniform(rng, &[p, j, d, dp], config.routing_init_scale / (dp as f64).sqrt()))
            .with("bias", Tensor::zeros(&[p, j, d])),
    );
    out
}

/// `v = |s|^2 / (1 + |s|^2) * s / (|s| + eps)` along the last axis.
pub fn squash<T: Scalar>(tape: &mut Tape<T>, s: Var, epsilon: f64) -> Var {
    tape.squash(s, T::from_f64(epsilon))
}

/// Output of one primary capsule over a batch of feature maps.
pub struct PrimaryOutput<T> {
    /// `[B, primary_dim]`, or `[primary_dim]` for an unbatched input.
    pub capsule: Var,
    pub bn_stats: Option<BatchStats<T>>,
    /// Conv output and spatial-attention output, for Grad-CAM.
    pub trace: Vec<(String, Var)>,
}

/// Conv, BN, MFM, spatial attention, statistical pooling and conv1d over
/// `features` (`[C,h,w]` or `[B,C,h,w]`).
pub fn primary_capsule<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    params: &Bindings,
    index: usize,
    config: &CapsuleConfig,
    bn: &BatchNormState<T>,
) -> Result<PrimaryOutput<T>> {
    let shape = tape.shape(features).to_vec();
    let batched = match shape.len() {
        3 => false,
        4 => true,
        _ => return Err(Error::invalid("primary_capsule", format!("expected [C,h,w] or [B,C,h,w], got {shape:?}"))),
    };
    let p = |part: &str, key: &str| params.get(&format!("{}.{key}", primary_layer(index, part)));
    if bn.channels() != config.bn_channels() {
        return Err(Error::Config(format!(
            "batch-norm state has {} channels, capsule expects {}",
            bn.channels(),
            config.bn_channels()
        )));
    }
    let conv = tape.conv2d(features, p("conv", "weight")?, p("conv", "bias")?, 1, 1)?;
    let (gamma, beta) = (p("bn", "gamma")?, p("bn", "beta")?);
    let (x, bn_stats) = match config.order {
        CapsuleOrder::BnBeforeMfm => {
            let (y, st) = layers::batchnorm(tape, conv, gamma, beta, bn)?;
            (layers::mfm(tape, y)?, st)
        }
        CapsuleOrder::BnAfterMfm => {
            let m = layers::mfm(tape, conv)?;
            layers::batchnorm(tape, m, gamma, beta, bn)?
        }
    };
    let sa = layers::spatial_attention(tape, x, p("sa", "weight")?, p("sa", "bias")?)?;
    let stats = layers::statistical_pooling(tape, sa)?;
    let k = config.conv_channels / 2;
    let b = if batched { shape[0] } else { 1 };
    let rows = tape.reshape(stats, &[b, 2, k])?;
    let c1 = layers::conv1d(tape, rows, p("conv1d", "weight")?, p("conv1d", "bias")?)?;
    let dp = tape.value(c1).numel() / b;
    if dp != config.primary_dim() {
        return Err(Error::invalid(
            "primary_capsule",
            format!("capsule length {dp} differs from primary_dim {}", config.primary_dim()),
        ));
    }
    let capsule = if batched { tape.reshape(c1, &[b, dp])? } else { tape.reshape(c1, &[dp])? };
    Ok(PrimaryOutput {
        capsule,
        bn_stats,
        trace: vec![(primary_layer(index, "conv"), conv), (primary_layer(index, "sa"), sa)],
    })
}

/// Routes `primaries` (each `[B, Dp]`, or `[Dp]`) to the output capsules.
/// Returns `v` (`[B, J, D]`, or `[J, D]`) and one state per batch element.
pub fn dynamic_routing<T: Scalar>(
    tape: &mut Tape<T>,
    primaries: &[Var],
    weight: Var,
    bias: Var,
    config: &CapsuleConfig,
) -> Result<(Var, Vec<CapsuleState<T>>)> {
    if primaries.len() != config.num_primary {
        return Err(Error::invalid(
            "dynamic_routing",
            format!("{} primary capsules, config expects {}", primaries.len(), config.num_primary),
        ));
    }
    let ws = tape.shape(weight).to_vec();
    let expect = [config.num_primary, config.num_output, config.output_dim, config.primary_dim()];
    if ws != expect {
        return Err(Error::shape("dynamic_routing", &ws, &expect));
    }
    let unbatched = tape.shape(primaries[0]).len() == 1;
    let u = if unbatched {
        let s = tape.stack(primaries, 0)?;
        let dp = tape.shape(s)[1];
        tape.reshape(s, &[1, config.num_primary, dp])?
    } else {
        tape.stack(primaries, 1)?
    };
    let b = tape.shape(u)[0];
    let (p, j) = (config.num_primary, config.num_output);
    let raw = tape.capsule_predict(u, weight, bias)?;
    let uhat = if config.squash_predictions {
        squash(tape, raw, config.squash_epsilon)
    } else {
        raw
    };
    let unrolled = config.route_grad == RouteGrad::Unrolled;
    let inner = if unrolled { uhat } else { tape.detach(uhat) };
    let mut logits = tape.constant(Tensor::zeros(&[b, p, j]));
    let mut history = vec![logits];
    let mut c = logits;
    let mut v = logits;
    for _ in 0..config.routing_iters {
        c = tape.softmax(logits);
        let s = tape.route_combine(inner, c)?;
        v = squash(tape, s, config.squash_epsilon);
        let a = tape.agreement(v, inner)?;
        logits = tape.add(logits, a)?;
        history.push(logits);
    }
    if !unrolled {
        let cc = tape.detach(c);
        let s = tape.route_combine(uhat, cc)?;
        v = squash(tape, s, config.squash_epsilon);
    }
    let d = config.output_dim;
    let states = (0..b)
        .map(|n| {
            let part = |var: Var, shape: &[usize]| {
                let len: usize = shape.iter().product();
                Tensor::from_parts(shape.to_vec(), tape.data(var)[n * len..(n + 1) * len].to_vec())
            };
            CapsuleState {
                logits: part(logits, &[p, j]),
                couplings: part(c, &[p, j]),
                predictions: part(uhat, &[p, j, d]),
                outputs: part(v, &[j, d]),
                logit_history: history.iter().map(|&h| part(h, &[p, j])).collect(),
            }
        })
        .collect();
    let v = if unbatched { tape.reshape(v, &[j, d])? } else { v };
    Ok((v, states))
}

/// Mean over the capsule axis: `[B, J, D] -> [B, D]` or `[J, D] -> [D]`.
pub fn frame_feature<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let axis = tape.shape(v).len() - 2;
    tape.mean_axis(v, axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamStore;
    use crate::rng;

    fn sq(data: &[f64]) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[data.len()], data).unwrap());
        let y = squash(&mut tape, x, 1e-8);
        tape.data(y).to_vec()
    }

    #[test]
    fn squash_examples() {
        assert_eq!(sq(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
        let v = sq(&[1.0, 0.0, 0.0]);
        assert!((v[0] - 0.5).abs() < 1e-7 && v[1] == 0.0);
        let v = sq(&[3.0, 4.0]);
        assert!((v[0] - 0.576_923).abs() < 1e-6, "{v:?}");
        assert!((v[1] - 0.769_231).abs() < 1e-6, "{v:?}");
    }

    fn routing_setup(cfg: &CapsuleConfig, seed: u64) -> (Tape<f64>, Vec<Var>, Var, Var) {
        let mut r = rng::stream(seed, "test");
        let mut tape = Tape::new();
        let dp = cfg.primary_dim();
        let prims = (0..cfg.num_primary)
            .map(|_| tape.constant(layers::uniform(&mut r, &[dp], 1.0)))
            .collect();
        let w = tape.param(layers::uniform(&mut r, &[cfg.num_primary, cfg.num_output, cfg.output_dim, dp], 0.5));
        let b = tape.param(layers::uniform(&mut r, &[cfg.num_primary, cfg.num_output, cfg.output_dim], 0.1));
        (tape, prims, w, b)
    }

    fn small_cfg() -> CapsuleConfig {
        CapsuleConfig {
            conv_channels: 8,
            conv1d_channels: 1,
            output_dim: 8,
            ..CapsuleConfig::default()
        }
    }

    #[test]
    fn single_iteration_gives_uniform_couplings() {
        let cfg = CapsuleConfig {
            routing_iters: 1,
            ..small_cfg()
        };
        let (mut tape, prims, w, b) = routing_setup(&cfg, 3);
        let (v, states) = dynamic_routing(&mut tape, &prims, w, b, &cfg).unwrap();
        assert_eq!(tape.shape(v), &[5, 8]);
        assert_eq!(states.len(), 1);
        assert!(states[0].couplings.data().iter().all(|&c| (c - 0.2).abs() < 1e-12));
    }

    #[test]
    fn identical_predictions_keep_couplings_uniform() {
        let cfg = small_cfg();
        let (mut tape, prims, _, _) = routing_setup(&cfg, 4);
        let dp = cfg.primary_dim();
        let mut r = rng::stream(9, "w");
        let row: Tensor<f64> = layers::uniform(&mut r, &[3, 1, 8, dp], 0.5);
        let mut wd = Vec::new();
        for i in 0..3 {
            for _ in 0..5 {
                wd.extend_from_slice(&row.data()[i * 8 * dp..(i + 1) * 8 * dp]);
            }
        }
        let w = tape.constant(Tensor::new(&[3, 5, 8, dp], wd).unwrap());
        let b = tape.constant(Tensor::zeros(&[3, 5, 8]));
        let (v, states) = dynamic_routing(&mut tape, &prims, w, b, &cfg).unwrap();
        assert!(states[0].couplings.data().iter().all(|&c| (c - 0.2).abs() < 1e-12));
        let vd = tape.data(v);
        for j in 1..5 {
            assert_eq!(&vd[j * 8..(j + 1) * 8], &vd[..8]);
        }
    }

    #[test]
    fn batched_routing_matches_per_frame() {
        let cfg = small_cfg();
        let (mut tape, prims, w, b) = routing_setup(&cfg, 5);
        let (v1, _) = dynamic_routing(&mut tape, &prims, w, b, &cfg).unwrap();
        let mut r = rng::stream(6, "x");
        let prims2: Vec<Var> = (0..3)
            .map(|_| tape.constant(layers::uniform(&mut r, &[cfg.primary_dim()], 1.0)))
            .collect();
        let (v2, _) = dynamic_routing(&mut tape, &prims2, w, b, &cfg).unwrap();
        let stacked: Vec<Var> = (0..3)
            .map(|i| tape.stack(&[prims[i], prims2[i]], 0).unwrap())
            .collect();
        let (vb, states) = dynamic_routing(&mut tape, &stacked, w, b, &cfg).unwrap();
        assert_eq!(states.len(), 2);
        let (a, bb, c) = (tape.data(v1).to_vec(), tape.data(v2).to_vec(), tape.data(vb).to_vec());
        let joined: Vec<f64> = a.iter().chain(&bb).copied().collect();
        for (x, y) in joined.iter().zip(&c) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unrolled_and_final_iteration_agree_in_value() {
        let cfg = small_cfg();
        let unrolled = CapsuleConfig {
            route_grad: RouteGrad::Unrolled,
            ..small_cfg()
        };
        let (mut tape, prims, w, b) = routing_setup(&cfg, 8);
        let (v1, _) = dynamic_routing(&mut tape, &prims, w, b, &cfg).unwrap();
        let (v2, _) = dynamic_routing(&mut tape, &prims, w, b, &unrolled).unwrap();
        for (x, y) in tape.data(v1).iter().zip(tape.data(v2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_rejects_bad_weight_shape() {
        let cfg = small_cfg();
        let (mut tape, prims, _, b) = routing_setup(&cfg, 1);
        let w = tape.constant(Tensor::zeros(&[3, 5, 8, 3]));
        assert!(dynamic_routing(&mut tape, &prims, w, b, &cfg).is_err());
        assert!(dynamic_routing(&mut tape, &prims[..2], w, b, &cfg).is_err());
    }

    #[test]
    fn frame_feature_examples() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let f = frame_feature(&mut tape, v).unwrap();
        assert_eq!(tape.data(f), &[0.5, 0.5]);
        let z = tape.constant(Tensor::zeros(&[5, 4]));
        let f = frame_feature(&mut tape, z).unwrap();
        assert_eq!(tape.data(f), &[0.0; 4]);
    }

    fn primary_store(cfg: &CapsuleConfig, in_ch: usize) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for l in init_params(cfg, in_ch, &mut rng::stream(2, "init")) {
            store.insert(l).unwrap();
        }
        store
    }

    #[test]
    fn default_primary_dim_is_64() {
        let cfg = CapsuleConfig::default();
        assert_eq!(cfg.primary_dim(), 64);
        let store = primary_store(&cfg, 256);
        let mut tape = Tape::new();
        let bind = Bindings::bind(&mut tape, &store, false);
        let x = tape.constant(Tensor::full(&[256, 14, 14], 0.1));
        let out = primary_capsule(&mut tape, x, &bind, 0, &cfg, &cfg.new_bn_state()).unwrap();
        assert_eq!(tape.shape(out.capsule), &[64]);
    }

    #[test]
    fn zero_input_leaves_conv1d_bias() {
        let cfg = CapsuleConfig {
            conv_channels: 8,
            ..CapsuleConfig::default()
        };
        let mut store = primary_store(&cfg, 4);
        store.get_mut("capsule.p1.conv1d.bias").unwrap().data_mut().copy_from_slice(&[0.25, -0.5]);
        let mut tape = Tape::new();
        let bind = Bindings::bind(&mut tape, &store, false);
        let x = tape.constant(Tensor::zeros(&[2, 4, 6, 6]));
        let out = primary_capsule(&mut tape, x, &bind, 1, &cfg, &cfg.new_bn_state()).unwrap();
        assert_eq!(tape.shape(out.capsule), &[2, 8]);
        for row in tape.data(out.capsule).chunks(8) {
            assert_eq!(row, &[0.25, 0.25, 0.25, 0.25, -0.5, -0.5, -0.5, -0.5]);
        }
        assert!(out.bn_stats.is_some());
    }
}
