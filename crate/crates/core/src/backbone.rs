//! Truncated VGG-style feature extractor.
//!
//! The default plan `[64,64] P [128,128] P [256,256,256,256] P` is the VGG19
//! prefix through its third max-pool: 2,325,568 parameters and a
//! `256 x 14 x 14` map for a `112 x 112` frame.

use std::io::Read;

use indexmap::IndexMap;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::layers::{self, LayerParams, ParamStore};
use crate::model::Bindings;
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Output channels of each conv, grouped by stage.
    pub stage_channels: Vec<Vec<usize>>,
    pub input_size: usize,
    pub kernel: usize,
    pub padding: usize,
    pub pool_after_each_stage: bool,
    /// Bind backbone tensors as constants during training.
    pub freeze: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![vec![64, 64], vec![128, 128], vec![256, 256, 256, 256]],
            input_size: 112,
            kernel: 3,
            padding: 1,
            pool_after_each_stage: true,
            freeze: false,
        }
    }
}

/// Layer counts of the depth ablation and their conv plans. Each step of
/// four layers adds one 3x3 conv to the plan.
pub const DEPTH_PRESETS: [usize; 5] = [18, 22, 26, 30, 34];

impl BackboneConfig {
    /// Conv plan for one of the [`DEPTH_PRESETS`].
    pub fn for_depth(depth: usize) -> Result<Self> {
        let stage_channels = match depth {
            18 => vec![vec![64, 64], vec![128, 128], vec![256, 256]],
            22 => vec![vec![64, 64], vec![128, 128], vec![256, 256, 256]],
            26 => vec![vec![64, 64], vec![128, 128], vec![256, 256, 256, 256]],
            30 => vec![vec![64, 64], vec![128, 128], vec![256, 256, 256, 256], vec![512]],
            34 => vec![vec![64, 64], vec![128, 128], vec![256, 256, 256, 256], vec![512, 512]],
            _ => {
                return Err(Error::Config(format!(
                    "backbone.depth must be one of {DEPTH_PRESETS:?}, got {depth}"
                )))
            }
        };
        Ok(Self {
            stage_channels,
            ..Self::default()
        })
    }

    pub fn num_convs(&self) -> usize {
        self.stage_channels.iter().map(Vec::len).sum()
    }

    pub fn pools(&self) -> usize {
        if self.pool_after_each_stage {
            self.stage_channels.iter().filter(|s| !s.is_empty()).count()
        } else {
            0
        }
    }

    /// Channel count of the extracted feature map.
    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.stage_channels
            .iter()
            .flatten()
            .last()
            .copied()
            .unwrap_or(in_channels)
    }

    /// Spatial size of the feature map for a square `size x size` frame.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        let div = 1usize << self.pools();
        if size == 0 || size % div != 0 {
            return Err(Error::Config(format!(
                "frame size {size} is not divisible by {div} ({} pooling stages)",
                self.pools()
            )));
        }
        Ok(size / div)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("backbone kernel {} must be odd", self.kernel)));
        }
        if self.stage_channels.iter().flatten().any(|&c| c == 0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        self.output_size(self.input_size).map(|_| ())
    }

    /// `(layer name, c_in, c_out)` for every conv in order. Names follow
    /// `backbone.stage<s>.conv<c>`, both 1-based.
    pub fn conv_layers(&self, in_channels: usize) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut c_in = in_channels;
        for (s, stage) in self.stage_channels.iter().enumerate() {
            for (c, &c_out) in stage.iter().enumerate() {
                out.push((format!("backbone.stage{}.conv{}", s + 1, c + 1), c_in, c_out));
                c_in = c_out;
            }
        }
        out
    }

    /// Name of the last conv, the default Grad-CAM layer.
    pub fn last_conv(&self) -> Option<String> {
        self.conv_layers(3).pop().map(|(n, _, _)| n)
    }

    /// Closed-form parameter count: `sum(c_out * c_in * k^2 + c_out)`.
    pub fn param_count(&self, in_channels: usize) -> usize {
        let k2 = self.kernel * self.kernel;
        self.conv_layers(in_channels)
            .iter()
            .map(|(_, ci, co)| co * ci * k2 + co)
            .sum()
    }
}

pub fn init_params<T: Scalar>(config: &BackboneConfig, in_channels: usize, rng: &mut StreamRng) -> Vec<LayerParams<T>> {
    let k = config.kernel;
    config
        .conv_layers(in_channels)
        .into_iter()
        .map(|(name, ci, co)| {
            LayerParams::new(name)
                .with("weight", layers::kaiming_uniform(rng, &[co, ci, k, k], ci * k * k))
                .with("bias", Tensor::zeros(&[co]))
        })
        .collect()
}

/// Runs the conv/relu/pool stack on `frames` (`[C,H,W]` or `[B,C,H,W]`).
/// Returns the feature map and the post-relu activation of every conv,
/// keyed by layer name.
pub fn extract<T: Scalar>(
    tape: &mut Tape<T>,
    frames: Var,
    params: &Bindings,
    config: &BackboneConfig,
) -> Result<(Var, Vec<(String, Var)>)> {
    let shape = tape.shape(frames).to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let div = 1usize << config.pools();
    if h % div != 0 || w % div != 0 {
        return Err(Error::invalid(
            "backbone",
            format!("spatial dims {h}x{w} not divisible by {div}"),
        ));
    }
    let in_channels = shape[shape.len() - 3];
    let mut trace = Vec::new();
    let mut x = frames;
    let mut layer_iter = config.conv_layers(in_channels).into_iter();
    for stage in &config.stage_channels {
        for _ in stage {
            let (name, _, _) = layer_iter.next().expect("conv_layers matches stage_channels");
            let wv = params.get(&format!("{name}.weight"))?;
            let bv = params.get(&format!("{name}.bias"))?;
            let y = tape.conv2d(x, wv, bv, 1, config.padding)?;
            x = tape.relu(y);
            trace.push((name, x));
        }
        if config.pool_after_each_stage && !stage.is_empty() {
            x = tape.maxpool2(x)?;
        }
    }
    Ok((x, trace))
}

/// Exact number of scalar parameters under the `backbone.` prefix.
pub fn count_params<T: Scalar>(params: &ParamStore<T>) -> usize {
    params
        .layers()
        .filter(|l| l.name.starts_with("backbone."))
        .map(LayerParams::param_count)
        .sum()
}

/// Multiply-accumulate count of the backbone: `c_out * c_in * k^2 * H' * W'`
/// per conv, times `num_frames`.
pub fn count_macs(config: &BackboneConfig, input_size: usize, num_frames: usize) -> u64 {
    let k2 = (config.kernel * config.kernel) as u64;
    let mut size = input_size as u64;
    let mut c_in = 3u64;
    let mut total = 0u64;
    for stage in &config.stage_channels {
        for &c_out in stage {
            total += c_out as u64 * c_in * k2 * size * size;
            c_in = c_out as u64;
        }
        if config.pool_after_each_stage && !stage.is_empty() {
            size /= 2;
        }
    }
    total * num_frames as u64
}

/// Outcome of a weight import.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportReport {
    /// Model tensor names that were overwritten.
    pub loaded: Vec<String>,
    /// Source tensor names with no destination.
    pub unmatched: Vec<String>,
}

/// Loads backbone tensors from a checkpoint stream. `name_map` maps source
/// names to model names; source names not present in the map are matched
/// verbatim. Every backbone tensor of `params` must be supplied, with the
/// exact shape. Values are converted to the model precision.
pub fn import_weights<T: Scalar, R: Read>(
    source: R,
    name_map: &IndexMap<String, String>,
    params: &mut ParamStore<T>,
) -> Result<ImportReport> {
    let table = checkpoint::read_tensor_table(source)?;
    let mut staged: IndexMap<String, Tensor<T>> = IndexMap::new();
    let mut report = ImportReport::default();
    for (src_name, tensor) in table {
        let dst = name_map.get(&src_name).cloned().unwrap_or_else(|| src_name.clone());
        let Some(existing) = params.get(&dst).filter(|_| dst.starts_with("backbone.")) else {
            report.unmatched.push(src_name);
            continue;
        };
        if existing.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "shape conflict for `{dst}`: model {:?}, source {:?}",
                existing.shape(),
                tensor.shape()
            )));
        }
        staged.insert(dst, tensor.cast::<T>());
    }
    let required: Vec<String> = params
        .iter()
        .map(|(n, _)| n)
        .filter(|n| n.starts_with("backbone."))
        .collect();
    if let Some(missing) = required.iter().find(|n| !staged.contains_key(*n)) {
        return Err(Error::MissingTensor(missing.clone()));
    }
    for (name, tensor) in staged {
        let slot = params.get_mut(&name).expect("checked above");
        slot.data_mut().copy_from_slice(tensor.data());
        report.loaded.push(name);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn default_shapes_and_counts() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.output_size(112).unwrap(), 14);
        assert_eq!(cfg.output_size(128).unwrap(), 16);
        assert!(cfg.output_size(100).is_err());
        assert_eq!(cfg.out_channels(3), 256);
        assert_eq!(cfg.param_count(3), 2_325_568);
    }

    #[test]
    fn first_conv_param_count() {
        let cfg = BackboneConfig {
            stage_channels: vec![vec![64]],
            ..BackboneConfig::default()
        };
        assert_eq!(cfg.param_count(3), 1_792);
    }

    #[test]
    fn mac_examples() {
        let first = BackboneConfig {
            stage_channels: vec![vec![64]],
            ..BackboneConfig::default()
        };
        assert_eq!(count_macs(&first, 112, 1), 21_676_032);
        let empty = BackboneConfig {
            stage_channels: vec![],
            ..BackboneConfig::default()
        };
        assert_eq!(count_macs(&empty, 112, 10), 0);
        let cfg = BackboneConfig::default();
        let one = count_macs(&cfg, 112, 1);
        assert_eq!(count_macs(&cfg, 112, 10), 10 * one);
        assert!((2.79e9..2.81e9).contains(&(one as f64)), "{one}");
    }

    #[test]
    fn depth_presets_follow_closed_form_shape() {
        for depth in DEPTH_PRESETS {
            let cfg = BackboneConfig::for_depth(depth).unwrap();
            let expect = 112 >> cfg.pools();
            assert_eq!(cfg.output_size(112).unwrap(), expect);
        }
        assert_eq!(BackboneConfig::for_depth(26).unwrap(), BackboneConfig::default());
        assert!(BackboneConfig::for_depth(27).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let cfg = BackboneConfig {
            stage_channels: vec![vec![4], vec![4], vec![6]],
            input_size: 16,
            ..BackboneConfig::default()
        };
        let mut r = rng::stream(1, "init");
        let mut store = ParamStore::<f64>::new();
        for l in init_params(&cfg, 3, &mut r) {
            store.insert(l).unwrap();
        }
        let mut tape = Tape::new();
        let bind = Bindings::bind(&mut tape, &store, false);
        let x = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let (f, trace) = extract(&mut tape, x, &bind, &cfg).unwrap();
        assert_eq!(tape.shape(f), &[6, 2, 2]);
        assert!(tape.data(f).iter().all(|&v| v == 0.0));
        assert_eq!(trace.len(), 3);
        assert_eq!(count_params(&store), cfg.param_count(3));
    }
}
