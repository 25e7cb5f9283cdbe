//! Reference backbone and classification head.
//!
//! The backbone is a stack of blocks, each `conv3x3 -> batch norm -> relu ->
//! 2x2 average pool`. Its last block output is the feature map `F` that feeds
//! both the pooled classifier and the class activation maps, so the same fc
//! weight matrix serves logits and attention.

pub mod checkpoint;
pub mod layers;

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{compute_cam, flip_width, AttentionMaps, FeatureMap};
use crate::error::{Error, Result};
use crate::losses::Logits;
use layers::Dims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_size: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Weight of the current batch in the running-statistics update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            input_size: 32,
            channels: vec![16, 32, 64],
            num_classes: 7,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Input side must halve cleanly through every block and leave at least
    /// a 2×2 feature map.
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::config("channel plan must be non-empty and positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::TooFewClasses(self.num_classes));
        }
        let factor = 1usize << self.channels.len();
        if self.input_size % factor != 0 || self.input_size / factor < 2 {
            return Err(Error::config(format!(
                "unsupported input size {} for {} blocks (needs a multiple of {factor} with at least 2×2 features)",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn feature_size(&self) -> usize {
        self.input_size >> self.channels.len()
    }
}

/// A named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters (or gradients) in a fixed, deterministic order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub entries: Vec<Param>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    fn slot(&self, name: &str) -> usize {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }
}

/// Batch-norm running statistics, one mean/variance pair per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; caches kept for backward.
    Train,
    /// Running statistics; no caches.
    Eval,
}

#[derive(Clone, Debug)]
struct BlockCache {
    dims: Dims,
    c_out: usize,
    /// Block input, needed for the convolution weight gradient.
    input: Vec<f64>,
    /// Normalized convolution output.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Everything needed to backpropagate through one backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneCache {
    blocks: Vec<BlockCache>,
}

/// Per-block batch statistics observed in a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// Elements per channel that entered each block's statistics.
    pub count: Vec<usize>,
}

pub struct ViewOutput {
    pub features: FeatureMap,
    pub pooled: Array2<f64>,
    pub logits: Logits,
    pub maps: AttentionMaps,
    pub cache: Option<BackboneCache>,
    pub stats: Option<BatchStats>,
}

/// Both views of a batch. In training mode the views pass through the
/// backbone as one concatenated batch, so they share batch-norm statistics;
/// the joint cache and statistics live here rather than on each view.
pub struct DualViewOutputs {
    pub original: ViewOutput,
    pub transformed: ViewOutput,
    pub cache: Option<BackboneCache>,
    pub stats: Option<BatchStats>,
}

impl DualViewOutputs {
    pub fn features(&self) -> &FeatureMap {
        &self.original.features
    }

    pub fn features_flipped(&self) -> &FeatureMap {
        &self.transformed.features
    }

    pub fn logits(&self) -> &Logits {
        &self.original.logits
    }

    pub fn logits_flipped(&self) -> &Logits {
        &self.transformed.logits
    }

    pub fn maps(&self) -> &AttentionMaps {
        &self.original.maps
    }

    pub fn maps_flipped(&self) -> &AttentionMaps {
        &self.transformed.maps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub running: RunningStats,
}

pub fn conv_name(block: usize) -> String {
    format!("block{block}.conv.weight")
}
pub fn gamma_name(block: usize) -> String {
    format!("block{block}.bn.gamma")
}
pub fn beta_name(block: usize) -> String {
    format!("block{block}.bn.beta")
}
pub const FC_WEIGHT: &str = "fc.weight";
pub const FC_BIAS: &str = "fc.bias";

impl Model {
    /// He-normal convolutions, unit/zero batch-norm affine, and
    /// `N(0, 1/C)` fc weights with zero bias.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut c_in = config.in_channels;
        for (b, &c_out) in config.channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            entries.push(Param {
                name: conv_name(b),
                shape: vec![c_out, c_in, 3, 3],
                data: (0..c_out * c_in * 9).map(|_| dist.sample(&mut rng)).collect(),
            });
            entries.push(Param {
                name: gamma_name(b),
                shape: vec![c_out],
                data: vec![1.0; c_out],
            });
            entries.push(Param {
                name: beta_name(b),
                shape: vec![c_out],
                data: vec![0.0; c_out],
            });
            c_in = c_out;
        }
        let (l, c) = (config.num_classes, config.feature_channels());
        let dist = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("finite std");
        entries.push(Param {
            name: FC_WEIGHT.into(),
            shape: vec![l, c],
            data: (0..l * c).map(|_| dist.sample(&mut rng)).collect(),
        });
        entries.push(Param {
            name: FC_BIAS.into(),
            shape: vec![l],
            data: vec![0.0; l],
        });
        let running = RunningStats {
            mean: config.channels.iter().map(|&c| vec![0.0; c]).collect(),
            var: config.channels.iter().map(|&c| vec![1.0; c]).collect(),
        };
        Ok(Self {
            config,
            params: ParamSet { entries },
            running,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn fc_weight(&self) -> Array2<f64> {
        let p = self.params.get(FC_WEIGHT).expect("fc weight");
        Array2::from_shape_vec((p.shape[0], p.shape[1]), p.data.clone()).expect("fc shape")
    }

    pub fn fc_bias(&self) -> &[f64] {
        &self.params.get(FC_BIAS).expect("fc bias").data
    }

    fn check_input(&self, images: &Array4<f64>) -> Result<()> {
        let s = images.shape();
        let c = &self.config;
        if s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                context: "backbone input",
                expected: vec![s[0].max(1), c.in_channels, c.input_size, c.input_size],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the backbone. In training mode the batch's own statistics
    /// normalize each block and the cache/statistics are returned.
    pub fn backbone_forward(
        &self,
        images: &Array4<f64>,
        mode: Mode,
    ) -> Result<(FeatureMap, Option<BackboneCache>, Option<BatchStats>)> {
        self.check_input(images)?;
        let n = images.shape()[0];
        let mut x: Vec<f64> = images.as_standard_layout().iter().copied().collect();
        let mut dims = Dims {
            n,
            c: self.config.in_channels,
            h: self.config.input_size,
            w: self.config.input_size,
        };
        let mut caches = Vec::new();
        let mut stats = BatchStats {
            mean: Vec::new(),
            var: Vec::new(),
            count: Vec::new(),
        };
        for (b, &c_out) in self.config.channels.iter().enumerate() {
            let weight = &self.params.entries[self.params.slot(&conv_name(b))].data;
            let gamma = &self.params.entries[self.params.slot(&gamma_name(b))].data;
            let beta = &self.params.entries[self.params.slot(&beta_name(b))].data;
            let mut conv = layers::conv3x3_forward(&x, dims, weight, c_out);
            let out_dims = Dims { c: c_out, ..dims };
            let (mean, var) = match mode {
                Mode::Train => layers::channel_stats(&conv, out_dims),
                Mode::Eval => (self.running.mean[b].clone(), self.running.var[b].clone()),
            };
            let (act, inv_std) =
                layers::batch_norm_relu_forward(&mut conv, out_dims, &mean, &var, gamma, beta, self.config.bn_eps);
            let pooled = layers::avg_pool2_forward(&act, out_dims);
            if mode == Mode::Train {
                stats.count.push(n * out_dims.plane());
                stats.mean.push(mean);
                stats.var.push(var);
                caches.push(BlockCache {
                    dims,
                    c_out,
                    input: std::mem::take(&mut x),
                    xhat: conv,
                    inv_std,
                });
            }
            x = pooled;
            dims = Dims {
                n,
                c: c_out,
                h: dims.h / 2,
                w: dims.w / 2,
            };
        }
        let features = Array4::from_shape_vec((n, dims.c, dims.h, dims.w), x).expect("feature shape");
        Ok(match mode {
            Mode::Train => (features, Some(BackboneCache { blocks: caches }), Some(stats)),
            Mode::Eval => (features, None, None),
        })
    }

    /// Backpropagates `grad_features` through a cached training pass,
    /// accumulating into `grads`.
    pub fn backbone_backward(&self, cache: &BackboneCache, grad_features: &FeatureMap, grads: &mut ParamSet) {
        let mut g: Vec<f64> = grad_features.as_standard_layout().iter().copied().collect();
        for (b, block) in cache.blocks.iter().enumerate().rev() {
            let out_dims = Dims {
                c: block.c_out,
                ..block.dims
            };
            let gamma = &self.params.entries[self.params.slot(&gamma_name(b))].data;
            let beta = &self.params.entries[self.params.slot(&beta_name(b))].data;
            let mut d_conv = layers::avg_pool2_relu_backward(&g, &block.xhat, gamma, beta, out_dims);
            let (gi, bi) = (grads.slot(&gamma_name(b)), grads.slot(&beta_name(b)));
            let (gg, gb) = two_mut(&mut grads.entries, gi, bi);
            layers::batch_norm_backward(
                &mut d_conv,
                &block.xhat,
                &block.inv_std,
                gamma,
                out_dims,
                &mut gg.data,
                &mut gb.data,
            );
            let weight = &self.params.entries[self.params.slot(&conv_name(b))].data;
            let wi = grads.slot(&conv_name(b));
            let dx = layers::conv3x3_backward(
                &d_conv,
                &block.input,
                block.dims,
                weight,
                block.c_out,
                &mut grads.entries[wi].data,
                b > 0,
            );
            if let Some(dx) = dx {
                g = dx;
            }
        }
    }

    /// Folds a training pass's batch statistics into the running averages
    /// (unbiased variance, exponential moving average with `bn_momentum`).
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        for b in 0..self.config.channels.len() {
            let count = stats.count[b] as f64;
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for c in 0..self.config.channels[b] {
                let rm = &mut self.running.mean[b][c];
                *rm = (1.0 - m) * *rm + m * stats.mean[b][c];
                let rv = &mut self.running.var[b][c];
                *rv = (1.0 - m) * *rv + m * stats.var[b][c] * correction;
            }
        }
    }

    /// Logits `gap(F) Wᵀ + b` and bias-free attention maps for one view.
    pub fn forward_view(&self, images: &Array4<f64>, mode: Mode) -> Result<ViewOutput> {
        let (features, cache, stats) = self.backbone_forward(images, mode)?;
        let mut out = self.head(features)?;
        out.cache = cache;
        out.stats = stats;
        Ok(out)
    }

    fn head(&self, features: FeatureMap) -> Result<ViewOutput> {
        let pooled = gap(&features);
        let w = self.fc_weight();
        let mut logits = pooled.dot(&w.t());
        for mut row in logits.outer_iter_mut() {
            row.iter_mut().zip(self.fc_bias()).for_each(|(z, b)| *z += b);
        }
        let maps = compute_cam(&features, &w)?;
        Ok(ViewOutput {
            features,
            pooled,
            logits,
            maps,
            cache: None,
            stats: None,
        })
    }

    /// Runs both views with shared parameters and shared batch statistics.
    pub fn forward_pair(
        &self,
        images: &Array4<f64>,
        transformed: &Array4<f64>,
        mode: Mode,
    ) -> Result<DualViewOutputs> {
        if images.shape() != transformed.shape() {
            return Err(Error::ShapeMismatch {
                context: "dual-view inputs",
                expected: images.shape().to_vec(),
                actual: transformed.shape().to_vec(),
            });
        }
        let n = images.shape()[0];
        let joint = ndarray::concatenate(Axis(0), &[images.view(), transformed.view()])
            .expect("matching shapes");
        let (features, cache, stats) = self.backbone_forward(&joint, mode)?;
        let original = features.slice_axis(Axis(0), (0..n).into()).to_owned();
        let second = features.slice_axis(Axis(0), (n..2 * n).into()).to_owned();
        Ok(DualViewOutputs {
            original: self.head(original)?,
            transformed: self.head(second)?,
            cache,
            stats,
        })
    }

    /// [`Model::forward_pair`] with the horizontally flipped input as the
    /// second view.
    pub fn forward_dual(&self, images: &Array4<f64>, mode: Mode) -> Result<DualViewOutputs> {
        self.forward_pair(images, &flip_width(images), mode)
    }

    /// Single-view logits with running statistics.
    pub fn predict_logits(&self, images: &Array4<f64>) -> Result<Logits> {
        Ok(self.forward_view(images, Mode::Eval)?.logits)
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Global average pooling: spatial mean per channel, N×C.
pub fn gap(features: &FeatureMap) -> Array2<f64> {
    let s = features.shape();
    let hw = (s[2] * s[3]) as f64;
    features.sum_axis(Axis(3)).sum_axis(Axis(2)) / hw
}
