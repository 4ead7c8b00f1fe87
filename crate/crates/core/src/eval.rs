//! Accuracy reports, Grad-CAM heatmaps and the parameter/MAC ledger.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::backbone;
use crate::capsule;
use crate::data::{self, VideoSample};
use crate::error::{Error, Result};
use crate::fusion;
use crate::model::{CapstModel, ModelConfig};
use crate::tensor::{Scalar, Tape, Tensor};

/// Rows are true classes, columns predicted classes.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Confusion> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l >= num_classes || p >= num_classes {
            return Err(Error::Data(format!("class index out of range: true {l}, predicted {p}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// `100 * diagonal / row sum`; a class with no samples scores 0.
pub fn per_class_accuracy(confusion: &Confusion) -> Vec<f64> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                100.0 * row[i] as f64 / total as f64
            }
        })
        .collect()
}

/// Unweighted mean of per-class accuracies. NaN for an empty list.
pub fn average_accuracy(per_class: &[f64]) -> f64 {
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub per_class_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub param_count: usize,
    /// Multiply-accumulates for one video.
    pub mac_count: u64,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion, param_count: usize, mac_count: u64, runtime_seconds: f64) -> Self {
        let per_class_accuracy = per_class_accuracy(&confusion);
        let average_accuracy = average_accuracy(&per_class_accuracy);
        Self {
            confusion,
            per_class_accuracy,
            average_accuracy,
            param_count,
            mac_count,
            runtime_seconds,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Human-readable table.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
        let width = (0..self.num_classes()).map(|i| name(i).len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "");
        for j in 0..self.num_classes() {
            let _ = write!(out, " {:>6}", j);
        }
        let _ = writeln!(out, " {:>9}", "acc %");
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{:width$}", name(i));
            for v in row {
                let _ = write!(out, " {v:>6}");
            }
            let _ = writeln!(out, " {:>9.2}", self.per_class_accuracy[i]);
        }
        let _ = writeln!(out, "average accuracy: {:.2}%", self.average_accuracy);
        let _ = writeln!(out, "parameters: {}", self.param_count);
        let _ = writeln!(out, "MACs per video: {}", self.mac_count);
        out
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "num_classes={}", self.num_classes());
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(out, "confusion.{i}.{j}={v}");
            }
        }
        for (i, a) in self.per_class_accuracy.iter().enumerate() {
            let _ = writeln!(out, "per_class_accuracy.{i}={a}");
        }
        let _ = writeln!(out, "average_accuracy={}", self.average_accuracy);
        let _ = writeln!(out, "param_count={}", self.param_count);
        let _ = writeln!(out, "mac_count={}", self.mac_count);
        // Wall time differs between otherwise identical runs, so it lives on
        // a comment line.
        let _ = writeln!(out, "# runtime_seconds={}", self.runtime_seconds);
        out
    }

    /// Inverse of [`EvalReport::to_kv`]. A leading `#` is stripped, so
    /// commented `key=value` lines are read too; lines without `=` are
    /// ignored.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .map(|l| l.trim_start_matches('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        fn get<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, k: &str) -> Result<T> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("report is missing `{k}`")))?
                .parse()
                .map_err(|_| Error::Format(format!("report value of `{k}` is malformed")))
        }
        let k: usize = get(&kv, "num_classes")?;
        let mut confusion = vec![vec![0u64; k]; k];
        for (i, row) in confusion.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = get(&kv, &format!("confusion.{i}.{j}"))?;
            }
        }
        Ok(Self {
            confusion,
            per_class_accuracy: (0..k)
                .map(|i| get(&kv, &format!("per_class_accuracy.{i}")))
                .collect::<Result<_>>()?,
            average_accuracy: get(&kv, "average_accuracy")?,
            param_count: get(&kv, "param_count")?,
            mac_count: get(&kv, "mac_count")?,
            runtime_seconds: get(&kv, "runtime_seconds")?,
        })
    }
}

/// Predicted class of every sample (inference mode, batches of
/// `batch_size`).
pub fn predict_classes<T: Scalar>(model: &CapstModel<T>, samples: &[VideoSample], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&VideoSample> = chunk.iter().collect();
        let (frames, _) = data::batch(&refs)?;
        for row in model.predict(&frames.cast())? {
            preds.push(fusion::argmax(&row));
        }
    }
    Ok(preds)
}

/// Video-level evaluation. `num_classes` is the class count of the data and
/// must match the model.
pub fn evaluate<T: Scalar>(model: &CapstModel<T>, samples: &[VideoSample], num_classes: usize) -> Result<EvalReport> {
    if model.config.num_classes() != num_classes {
        return Err(Error::Data(format!(
            "model predicts {} classes, data has {num_classes}",
            model.config.num_classes()
        )));
    }
    let start = Instant::now();
    let preds = predict_classes(model, samples, 10)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let m = confusion(&labels, &preds, num_classes)?;
    let ledger = profile(&model.config);
    Ok(EvalReport::from_confusion(
        m,
        model.param_count(),
        ledger.total_macs_per_video(),
        start.elapsed().as_secs_f64(),
    ))
}

/// Name of the view that sums the backbone and capsule heatmaps.
pub const COMBINED: &str = "combined";

/// A heatmap normalised to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn to_pgm(&self) -> Vec<u8> {
        data::encode_pgm(&self.values, self.height, self.width)
    }

    /// Mean value of each quadrant: top-left, top-right, bottom-left,
    /// bottom-right.
    pub fn quadrant_means(&self) -> [f64; 4] {
        let (h2, w2) = (self.height / 2, self.width / 2);
        let mut sum = [0.0f64; 4];
        let mut n = [0usize; 4];
        for y in 0..self.height {
            for x in 0..self.width {
                let q = 2 * usize::from(y >= h2) + usize::from(x >= w2);
                sum[q] += self.values[y * self.width + x] as f64;
                n[q] += 1;
            }
        }
        std::array::from_fn(|q| if n[q] == 0 { 0.0 } else { sum[q] / n[q] as f64 })
    }
}

/// Divides by the maximum; an all-zero map stays zero.
fn normalise(v: &mut [f64]) {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

fn upsample(v: &[f64], h: usize, w: usize, out: usize) -> Vec<f64> {
    let mut res = vec![0.0; out * out];
    for y in 0..out {
        for x in 0..out {
            res[y * out + x] = v[(y * h / out) * w + x * w / out];
        }
    }
    res
}

/// Grad-CAM maps of one activation `[N, C, h, w]` with gradient `grad`,
/// averaged over the N frames, normalised and upsampled to `size`.
fn cam(act: &[f64], grad: &[f64], shape: &[usize], size: usize) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut acc = vec![0.0; plane];
    for f in 0..n {
        let mut map = vec![0.0; plane];
        for ch in 0..c {
            let off = (f * c + ch) * plane;
            let weight = grad[off..off + plane].iter().sum::<f64>() / plane as f64;
            for (m, &a) in map.iter_mut().zip(&act[off..off + plane]) {
                *m += weight * a;
            }
        }
        for (a, m) in acc.iter_mut().zip(&map) {
            *a += m.max(0.0) / n as f64;
        }
    }
    normalise(&mut acc);
    upsample(&acc, h, w, size)
}

/// Grad-CAM for `target_class` of one video. `layer` names a conv
/// activation (`backbone.stage<s>.conv<c>`, `capsule.p<i>.conv`,
/// `capsule.p<i>.sa`) or [`COMBINED`]. Gradients of the class score are
/// taken in inference mode; the map is averaged over frames.
pub fn gradcam<T: Scalar>(model: &CapstModel<T>, sample: &VideoSample, target_class: usize, layer: &str) -> Result<Heatmap> {
    let k = model.config.num_classes();
    if target_class >= k {
        return Err(Error::Data(format!("target class {target_class} out of range for {k} classes")));
    }
    let mut tape = Tape::<T>::new();
    let params = crate::model::Bindings::bind(&mut tape, &model.params, false);
    let (frames, _) = data::batch(&[sample])?;
    let x = tape.constant(frames.cast());
    let out = model.forward(&mut tape, &params, x, false)?;
    let layers: Vec<String> = if layer == COMBINED {
        let last = model
            .config
            .backbone
            .last_conv()
            .ok_or_else(|| Error::UnknownLayer(COMBINED.into()))?;
        std::iter::once(last)
            .chain((0..model.config.capsule.num_primary).map(|i| capsule::primary_layer(i, "sa")))
            .collect()
    } else {
        if !out.trace.contains_key(layer) {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        vec![layer.to_string()]
    };
    let mut onehot = vec![T::ZERO; k];
    onehot[target_class] = T::ONE;
    let mask = tape.constant(Tensor::from_parts(vec![1, k], onehot));
    let picked = tape.mul(out.logits, mask)?;
    let score = tape.sum(picked);
    tape.backward(score)?;
    let size = model.config.input_size();
    let mut total = vec![0.0; size * size];
    for name in &layers {
        let var = out.trace[name.as_str()];
        let act: Vec<f64> = tape.data(var).iter().map(|v| v.to_f64()).collect();
        let grad: Vec<f64> = match tape.grad(var) {
            Some(g) => g.iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; act.len()],
        };
        let map = cam(&act, &grad, tape.shape(var), size);
        total.iter_mut().zip(&map).for_each(|(t, m)| *t += m);
    }
    normalise(&mut total);
    Ok(Heatmap {
        height: size,
        width: size,
        values: total.iter().map(|&v| v as f32).collect(),
    })
}

/// One module row of the ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub module: String,
    pub params: usize,
    /// MACs spent on each frame (zero for video-level stages).
    pub macs_per_frame: u64,
    /// MACs spent once per video.
    pub macs_per_clip: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub rows: Vec<LedgerRow>,
    pub num_frames: usize,
}

impl Ledger {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs_per_frame(&self) -> u64 {
        self.rows.iter().map(|r| r.macs_per_frame).sum()
    }

    pub fn row_macs_per_video(&self, row: &LedgerRow) -> u64 {
        row.macs_per_frame * self.num_frames as u64 + row.macs_per_clip
    }

    pub fn total_macs_per_video(&self) -> u64 {
        self.rows.iter().map(|r| self.row_macs_per_video(r)).sum()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>12} {:>16} {:>16}", "module", "params", "MACs/frame", "MACs/video");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<22} {:>12} {:>16} {:>16}",
                r.module,
                r.params,
                r.macs_per_frame,
                self.row_macs_per_video(r)
            );
        }
        let _ = writeln!(
            out,
            "{:<22} {:>12} {:>16} {:>16}",
            "total",
            self.total_params(),
            self.total_macs_per_frame(),
            self.total_macs_per_video()
        );
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "num_frames={}", self.num_frames);
        for r in &self.rows {
            let _ = writeln!(out, "{}.params={}", r.module, r.params);
            let _ = writeln!(out, "{}.macs_per_frame={}", r.module, r.macs_per_frame);
            let _ = writeln!(out, "{}.macs_per_video={}", r.module, self.row_macs_per_video(r));
        }
        let _ = writeln!(out, "total.params={}", self.total_params());
        let _ = writeln!(out, "total.macs_per_frame={}", self.total_macs_per_frame());
        let _ = writeln!(out, "total.macs_per_video={}", self.total_macs_per_video());
        out
    }
}

/// Parameter and MAC counts per module, from the configuration alone.
/// Convolutions count `c_out * c_in * k^2 * h' * w'`, linear layers `m * n`;
/// normalisation, activations and pooling are not counted.
pub fn profile(config: &ModelConfig) -> Ledger {
    let bb = &config.backbone;
    let cap = &config.capsule;
    let fu = &config.fusion;
    let size = config.input_size();
    let map = bb.output_size(size).unwrap_or(0);
    let hw = (map * map) as u64;
    let feat = bb.out_channels(config.in_channels);
    let u = |v: usize| v as u64;

    let cc = cap.conv_channels;
    let half = cc / 2;
    let bn = match cap.order {
        capsule::CapsuleOrder::BnBeforeMfm => cc,
        capsule::CapsuleOrder::BnAfterMfm => half,
    };
    let sk = cap.sa_kernel;
    let (c1, k1) = (cap.conv1d_channels, cap.conv1d_kernel);
    let l_out = (half + 1).saturating_sub(k1);
    let primary_params = cc * feat * 9 + cc + 2 * bn + 2 * sk * sk + 1 + c1 * 2 * k1 + c1;
    let primary_macs = u(cc * feat * 9) * hw + u(2 * sk * sk) * hw + u(c1 * 2 * k1 * l_out);

    let (p, j, d, dp) = (cap.num_primary, cap.num_output, cap.output_dim, cap.primary_dim());
    let routing_params = p * j * d * dp + p * j * d;
    let routing_macs = u(p * j * d * dp) + u(cap.routing_iters) * 2 * u(p * j * d);

    let (n, h, k) = (fu.num_frames, fu.ta_hidden, fu.num_classes);
    Ledger {
        rows: vec![
            LedgerRow {
                module: "backbone".into(),
                params: bb.param_count(config.in_channels),
                macs_per_frame: backbone::count_macs(bb, size, 1),
                macs_per_clip: 0,
            },
            LedgerRow {
                module: "capsule.primary".into(),
                params: p * primary_params,
                macs_per_frame: u(p) * primary_macs,
                macs_per_clip: 0,
            },
            LedgerRow {
                module: "capsule.routing".into(),
                params: routing_params,
                macs_per_frame: routing_macs,
                macs_per_clip: 0,
            },
            LedgerRow {
                module: "fusion.ta_fc0".into(),
                params: h * n * d + h,
                macs_per_frame: 0,
                macs_per_clip: u(h * n * d),
            },
            LedgerRow {
                module: "fusion.ta_fc1".into(),
                params: n * h + n,
                macs_per_frame: 0,
                macs_per_clip: u(n * h) + u(n * d),
            },
            LedgerRow {
                module: "fusion.classifier".into(),
                params: k * d + k,
                macs_per_frame: 0,
                macs_per_clip: u(k * d),
            },
        ],
        num_frames: n,
    }
}
