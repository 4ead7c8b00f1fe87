//! SGD with momentum, the epoch loop and checkpoint plumbing.

use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::checkpoint::{self, Checkpoint, CheckpointRef};
use crate::data::{self, VideoSample};
use crate::error::{Error, Result};
use crate::fusion;
use crate::model::CapstModel;
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be 32 or 64, got {bits}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Apply weight decay to batch-norm affine terms too.
    pub decay_bn: bool,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 10,
            epochs: 300,
            seed: 7,
            precision: Precision::F32,
            decay_bn: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradients by full parameter name.
pub type Grads<T> = IndexMap<String, Vec<T>>;
/// Momentum buffers by full parameter name.
pub type Buffers<T> = IndexMap<String, Vec<T>>;

/// One SGD step over every parameter, in store order:
/// `g = grad + wd * p; buf = momentum * buf + g; p -= lr * buf`.
pub fn sgd_step<T: Scalar>(
    params: &mut crate::layers::ParamStore<T>,
    grads: &Grads<T>,
    buffers: &mut Buffers<T>,
    config: &TrainConfig,
) -> Result<()> {
    sgd_step_filtered(params, grads, buffers, config, |_| true)
}

/// [`sgd_step`] restricted to the parameters accepted by `trainable`.
pub fn sgd_step_filtered<T: Scalar>(
    params: &mut crate::layers::ParamStore<T>,
    grads: &Grads<T>,
    buffers: &mut Buffers<T>,
    config: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n).filter(|n| trainable(n)).collect();
    if let Some(missing) = names.iter().find(|n| !grads.contains_key(*n)) {
        return Err(Error::MissingGradient(missing.clone()));
    }
    let lr = T::from_f64(config.lr);
    let mom = T::from_f64(config.momentum);
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name).expect("name comes from the store");
        if g.len() != p.numel() {
            return Err(Error::shape("sgd_step", &[g.len()], p.shape()));
        }
        let wd = if config.decay_bn || !name.contains(".bn.") { config.weight_decay } else { 0.0 };
        let wd = T::from_f64(wd);
        let buf = buffers.entry(name).or_insert_with(|| vec![T::ZERO; g.len()]);
        for ((pv, &gv), b) in p.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
            let step = gv + wd * *pv;
            *b = mom * *b + step;
            *pv = *pv - lr * *b;
        }
    }
    Ok(())
}

/// Visit order of `n` samples in `epoch`; a pure function of the seed and
/// the epoch number.
pub fn shuffle_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed_stream(seed, "shuffle", epoch as u64));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    /// Percent of training videos classified correctly during the epoch.
    pub accuracy: f64,
    pub seconds: f64,
}

/// Model plus optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: CapstModel<T>,
    pub config: TrainConfig,
    pub buffers: Buffers<T>,
    /// Completed epochs.
    pub epoch: usize,
}

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

impl<T: Scalar> Trainer<T> {
    pub fn new(model: CapstModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            buffers: IndexMap::new(),
            epoch: 0,
        })
    }

    fn trainable(&self) -> impl Fn(&str) -> bool {
        let frozen = self.model.config.backbone.freeze;
        move |n: &str| !(frozen && n.starts_with("backbone."))
    }

    /// Forward, backward and update on one batch. Returns the mean loss and
    /// the number of correct predictions.
    pub fn step(&mut self, frames: &Tensor<f32>, labels: &[usize]) -> Result<(f64, usize)> {
        let k = self.model.config.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape);
        let x = tape.constant(frames.cast());
        let out = self.model.forward(&mut tape, &params, x, true)?;
        let loss = fusion::cross_entropy(&mut tape, out.probs, labels)?;
        let value = tape.data(loss)[0].to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let correct = tape
            .data(out.probs)
            .chunks(k)
            .zip(labels)
            .filter(|(row, &l)| fusion::argmax(row) == l)
            .count();
        tape.backward(loss)?;
        let grads = params.grads(&tape);
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient in `{name}`")));
        }
        let filter = self.trainable();
        sgd_step_filtered(&mut self.model.params, &grads, &mut self.buffers, &self.config, filter)?;
        self.model.apply_bn_updates(&out.bn_updates)?;
        Ok((value, correct))
    }

    /// Runs the next epoch over `data`.
    pub fn train_epoch(&mut self, data: &[VideoSample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let start = Instant::now();
        let order = shuffle_order(self.config.seed, self.epoch, data.len());
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let samples: Vec<&VideoSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (frames, labels) = data::batch(&samples)?;
            let (loss, ok) = self.step(&frames, &labels).map_err(|e| match e {
                Error::Numeric(m) => {
                    let ids: Vec<&str> = samples.iter().map(|s| s.video_id.as_str()).collect();
                    Error::Numeric(format!("{m} at epoch {} batch {b} (videos {})", self.epoch + 1, ids.join(",")))
                }
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: 100.0 * correct as f64 / data.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn train(
        &mut self,
        data: &[VideoSample],
        mut on_epoch: impl FnMut(&EpochLog, &Self) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.train_epoch(data)?;
            on_epoch(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Checkpoint bytes with `config_text` as the configuration snapshot.
    /// Batch-norm running statistics are stored in the tensor table as
    /// `<layer>.running_mean` and `<layer>.running_var`.
    pub fn checkpoint_bytes(&self, config_text: &str) -> Vec<u8> {
        let stats: Vec<(String, Tensor<T>)> = self
            .model
            .bn
            .iter()
            .flat_map(|(name, s)| {
                let n = s.running_mean.len();
                [
                    (format!("{name}.{RUNNING_MEAN}"), Tensor::from_parts(vec![n], s.running_mean.clone())),
                    (format!("{name}.{RUNNING_VAR}"), Tensor::from_parts(vec![n], s.running_var.clone())),
                ]
            })
            .collect();
        let momentum: Vec<(String, Tensor<T>)> = self
            .buffers
            .iter()
            .map(|(name, buf)| {
                let shape = self.model.params.get(name).map_or(vec![buf.len()], |t| t.shape().to_vec());
                (name.clone(), Tensor::from_parts(shape, buf.clone()))
            })
            .collect();
        let mut tensors: Vec<(String, &Tensor<T>)> = self.model.params.iter().collect();
        tensors.extend(stats.iter().map(|(n, t)| (n.clone(), t)));
        checkpoint::encode(&CheckpointRef {
            config: config_text,
            tensors,
            momentum: momentum.iter().map(|(n, t)| (n.clone(), t)).collect(),
            epoch: self.epoch as u64,
            seed: self.config.seed,
        })
    }

    pub fn save(&self, path: &Path, config_text: &str) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes(config_text))?;
        Ok(())
    }

    /// Overwrites model and optimiser state from `ck`. Every shape is
    /// checked before anything is modified.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut params = Vec::new();
        let mut stats = Vec::new();
        for (name, t) in &ck.tensors {
            if let Some(layer) = name.strip_suffix(&format!(".{RUNNING_MEAN}")) {
                stats.push((layer.to_string(), true, t));
            } else if let Some(layer) = name.strip_suffix(&format!(".{RUNNING_VAR}")) {
                stats.push((layer.to_string(), false, t));
            } else {
                params.push((name, t));
            }
        }
        for (name, t) in &params {
            let slot = self
                .model
                .params
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint tensor `{name}` has no place in the model")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "shape conflict for `{name}`: model {:?}, checkpoint {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != self.model.params.iter().count() {
            let have: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
            let missing = self.model.params.iter().map(|(n, _)| n).find(|n| !have.contains(&n.as_str()));
            return Err(Error::MissingTensor(missing.unwrap_or_default()));
        }
        for (layer, _, t) in &stats {
            let st = self
                .model
                .bn
                .get(layer)
                .ok_or_else(|| Error::Format(format!("checkpoint statistics for unknown layer `{layer}`")))?;
            if t.shape() != [st.channels()] {
                return Err(Error::Format(format!("shape conflict for statistics of `{layer}`")));
            }
        }
        for (name, t) in &ck.momentum {
            match self.model.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("momentum buffer `{name}` does not match the model"))),
            }
        }
        for (name, t) in params {
            let cast: Tensor<T> = t.cast();
            self.model.params.get_mut(name).expect("checked").data_mut().copy_from_slice(cast.data());
        }
        for (layer, is_mean, t) in stats {
            let st = self.model.bn.get_mut(&layer).expect("checked");
            let vals: Vec<T> = t.cast::<T>().into_data();
            if is_mean {
                st.running_mean = vals;
            } else {
                st.running_var = vals;
            }
        }
        self.buffers = ck
            .momentum
            .iter()
            .map(|(n, t)| (n.clone(), t.cast::<T>().into_data()))
            .collect();
        self.epoch = ck.epoch as usize;
        self.config.seed = ck.seed;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerParams, ParamStore};
    use crate::model::ModelConfig;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(LayerParams::new("w").with("p", Tensor::full(&[1], v))).unwrap();
        s
    }

    fn step(store: &mut ParamStore<f64>, bufs: &mut Buffers<f64>, g: f64, cfg: &TrainConfig) -> f64 {
        let grads: Grads<f64> = [("w.p".to_string(), vec![g])].into_iter().collect();
        sgd_step(store, &grads, bufs, cfg).unwrap();
        store.get("w.p").unwrap().data()[0]
    }

    #[test]
    fn sgd_examples() {
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut s = one_param(1.0);
        assert!((step(&mut s, &mut Buffers::new(), 1.0, &cfg) - 0.9).abs() < 1e-15);

        let cfg = TrainConfig {
            lr: 0.01,
            momentum: 0.0,
            weight_decay: 5e-4,
            ..TrainConfig::default()
        };
        let mut s = one_param(1.0);
        assert!((step(&mut s, &mut Buffers::new(), 0.0, &cfg) - 0.999_995).abs() < 1e-15);

        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut s = one_param(0.0);
        let mut b = Buffers::new();
        let p1 = step(&mut s, &mut b, 2.0, &cfg);
        let p2 = step(&mut s, &mut b, 2.0, &cfg);
        assert!(((p1 - p2) - 0.1 * 1.9 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = one_param(1.0);
        let err = sgd_step(&mut s, &Grads::new(), &mut Buffers::new(), &TrainConfig::default());
        assert!(matches!(err, Err(Error::MissingGradient(_))));
    }

    #[test]
    fn decay_bn_switch() {
        let mut s = ParamStore::<f64>::new();
        s.insert(LayerParams::new("capsule.p0.bn").with("gamma", Tensor::full(&[1], 1.0))).unwrap();
        let cfg = TrainConfig {
            momentum: 0.0,
            decay_bn: false,
            ..TrainConfig::default()
        };
        let grads: Grads<f64> = [("capsule.p0.bn.gamma".to_string(), vec![0.0])].into_iter().collect();
        sgd_step(&mut s, &grads, &mut Buffers::new(), &cfg).unwrap();
        assert_eq!(s.get("capsule.p0.bn.gamma").unwrap().data()[0], 1.0);
    }

    #[test]
    fn shuffles_are_pure_and_vary_by_epoch() {
        assert_eq!(shuffle_order(3, 4, 50), shuffle_order(3, 4, 50));
        assert_ne!(shuffle_order(3, 4, 50), shuffle_order(3, 5, 50));
        let mut o = shuffle_order(3, 4, 50);
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    fn samples(cfg: &ModelConfig, n: usize) -> Vec<VideoSample> {
        let s = cfg.input_size();
        (0..n)
            .map(|i| {
                let mut r = rng::indexed_stream(1, "samples", i as u64);
                let t = crate::layers::uniform::<f32>(&mut r, &[cfg.num_frames(), 3, s, s], 0.5);
                VideoSample {
                    frames: Tensor::new(t.shape(), t.data().iter().map(|v| v + 0.5).collect()).unwrap(),
                    label: i % cfg.num_classes(),
                    video_id: format!("v{i}"),
                }
            })
            .collect()
    }

    #[test]
    fn oversized_batch_and_checkpoint_round_trip() {
        let cfg = ModelConfig::tiny();
        let data = samples(&cfg, 3);
        let tc = TrainConfig {
            batch_size: 16,
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(CapstModel::<f32>::new(cfg.clone(), 1).unwrap(), tc.clone()).unwrap();
        let logs = t.train(&data, |_, _| Ok(())).unwrap();
        assert_eq!(logs.len(), 2);
        let bytes = t.checkpoint_bytes("x = 1\n");
        let ck = checkpoint::decode(bytes.as_slice()).unwrap();
        let mut u = Trainer::new(CapstModel::<f32>::new(cfg, 99).unwrap(), tc).unwrap();
        u.restore(&ck).unwrap();
        assert_eq!(u.model, t.model);
        assert_eq!(u.buffers, t.buffers);
        assert_eq!(u.epoch, 2);
    }

    #[test]
    fn restore_rejects_shape_conflicts_untouched() {
        let tiny = ModelConfig::tiny();
        let t = Trainer::new(CapstModel::<f32>::new(tiny.clone(), 1).unwrap(), TrainConfig::default()).unwrap();
        let ck = checkpoint::decode(t.checkpoint_bytes("").as_slice()).unwrap();
        let mut other = tiny;
        other.fusion.ta_hidden = 5;
        let mut u = Trainer::new(CapstModel::<f32>::new(other, 2).unwrap(), TrainConfig::default()).unwrap();
        let before = u.model.clone();
        assert!(matches!(u.restore(&ck), Err(Error::Format(_))));
        assert_eq!(u.model, before);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let cfg = ModelConfig::tiny();
        let mut data = samples(&cfg, 2);
        data[1].label = 7;
        let mut t = Trainer::new(CapstModel::<f32>::new(cfg, 1).unwrap(), TrainConfig::default()).unwrap();
        assert!(matches!(t.train_epoch(&data), Err(Error::Data(_))));
        assert!(matches!(t.train_epoch(&[]), Err(Error::Data(_))));
    }
}
