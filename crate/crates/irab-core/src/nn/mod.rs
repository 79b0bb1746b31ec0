//! Model kit: configs, the shared-extractor/multi-head bundle, Adam, EMA
//! teacher maintenance, and checkpoints.
//!
//! The topology is one feature extractor feeding a density regressor and
//! `c` segmentation predictor heads in parallel. All heads consume the
//! extractor's final feature map. The density head ends in one channel
//! (rectified, densities are nonnegative); each segmentation head ends in
//! two channels whose per-pixel softmax is the foreground posterior.

mod adam;
mod checkpoint;
mod layer;

pub use adam::{adam_step, ema_update, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layer::{Activation, LayerKind, LayerSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Tensor};

fn default_in_channels() -> usize {
    1
}

/// Architecture description for a [`ModelBundle`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub extractor: Vec<LayerSpec>,
    /// Head ending in a single output channel (the density map).
    pub regressor_head: Vec<LayerSpec>,
    /// Head template instantiated once per segmentation predictor; the
    /// last layer carries one channel per segmentation class.
    pub seg_head_template: Vec<LayerSpec>,
    pub num_seg_heads: usize,
    /// Ratio of image resolution to label resolution; must equal the
    /// product of the extractor's pooling/stride divisors.
    pub downsample_factor: usize,
    /// Classes per segmentation head: 2 for the binary surrogate tasks,
    /// more for the multi-class quantization variant.
    #[serde(default = "ModelConfig::default_seg_classes")]
    pub seg_classes: usize,
}

impl ModelConfig {
    fn default_seg_classes() -> usize {
        2
    }

    /// The desk-scale default: a narrow dilated-conv analog of the full
    /// VGG-based stack, cheap enough to train on one CPU core in seconds.
    pub fn default_desk() -> Self {
        let parse = |s: &str| s.parse::<LayerSpec>().unwrap();
        ModelConfig {
            in_channels: 1,
            extractor: [
                "k(3,3)-c16-s1-p1-d1-relu",
                "k(3,3)-c16-s1-p1-d1-relu",
                "maxpooling(2,2)",
                "k(3,3)-c32-s1-p1-d1-relu",
                "maxpooling(2,2)",
                "k(3,3)-c32-s1-p2-d2-relu",
            ]
            .iter()
            .map(|s| parse(s))
            .collect(),
            regressor_head: ["k(3,3)-c16-s1-p1-d1-relu", "k(1,1)-c1-s1-p0-d1-softplus"]
                .iter()
                .map(|s| parse(s))
                .collect(),
            seg_head_template: ["k(3,3)-c16-s1-p1-d1-relu", "k(1,1)-c2-s1-p0-d1"]
                .iter()
                .map(|s| parse(s))
                .collect(),
            num_seg_heads: 3,
            downsample_factor: 4,
            seg_classes: 2,
        }
    }

    /// Same architecture at a narrower width; used by the bundled
    /// benchmark so a full method comparison stays within minutes.
    pub fn slim_desk() -> Self {
        let parse = |s: &str| s.parse::<LayerSpec>().unwrap();
        ModelConfig {
            in_channels: 1,
            extractor: [
                "k(3,3)-c12-s1-p1-d1-relu",
                "k(3,3)-c12-s1-p1-d1-relu",
                "maxpooling(2,2)",
                "k(3,3)-c24-s1-p1-d1-relu",
                "maxpooling(2,2)",
                "k(3,3)-c24-s1-p2-d2-relu",
            ]
            .iter()
            .map(|s| parse(s))
            .collect(),
            regressor_head: ["k(3,3)-c12-s1-p1-d1-relu", "k(1,1)-c1-s1-p0-d1-softplus"]
                .iter()
                .map(|s| parse(s))
                .collect(),
            seg_head_template: ["k(3,3)-c12-s1-p1-d1-relu", "k(1,1)-c2-s1-p0-d1"]
                .iter()
                .map(|s| parse(s))
                .collect(),
            num_seg_heads: 3,
            downsample_factor: 4,
            seg_classes: 2,
        }
    }

    /// Rewritten copy with `heads` segmentation heads of `classes` classes
    /// each (the last template layer's channel count is adjusted).
    pub fn with_seg_heads(&self, heads: usize, classes: usize) -> Self {
        let mut cfg = self.clone();
        cfg.num_seg_heads = heads;
        cfg.seg_classes = classes;
        if let Some(last) = cfg.seg_head_template.last_mut() {
            if let LayerKind::Conv { out_channels, .. } = &mut last.kind {
                *out_channels = classes;
            }
        }
        cfg
    }

    fn last_conv_channels(stack: &[LayerSpec]) -> Option<usize> {
        stack.iter().rev().find_map(|l| l.out_channels())
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(CoreError::invalid("in_channels must be positive".to_string()));
        }
        if Self::last_conv_channels(&self.regressor_head) != Some(1) {
            return Err(CoreError::invalid(
                "regressor head must end in exactly 1 output channel".to_string(),
            ));
        }
        if self.num_seg_heads > 0 {
            if self.seg_classes < 2 {
                return Err(CoreError::invalid(
                    "segmentation heads need at least 2 classes".to_string(),
                ));
            }
            if Self::last_conv_channels(&self.seg_head_template) != Some(self.seg_classes) {
                return Err(CoreError::invalid(format!(
                    "segmentation head must end in {} output channels",
                    self.seg_classes
                )));
            }
        }
        let div: usize = self.extractor.iter().map(|l| l.spatial_divisor()).product();
        if div != self.downsample_factor {
            return Err(CoreError::invalid(format!(
                "extractor downsamples by {} but downsample_factor says {}",
                div, self.downsample_factor
            )));
        }
        let head_div: usize = self
            .regressor_head
            .iter()
            .chain(self.seg_head_template.iter())
            .map(|l| l.spatial_divisor())
            .product();
        if head_div != 1 {
            return Err(CoreError::invalid(
                "heads must preserve spatial extent".to_string(),
            ));
        }
        Ok(())
    }
}

pub(crate) struct ConvLayer {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub activation: Activation,
    pub w: Tensor,
    pub b: Tensor,
}

pub(crate) enum Layer {
    Conv(ConvLayer),
    MaxPool,
}

/// A sequential stack of layers with its parameters.
pub(crate) struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    fn build(
        specs: &[LayerSpec],
        mut in_channels: usize,
        rng: &mut ChaCha8Rng,
        last_bias: f64,
    ) -> Result<Self> {
        let last_conv = specs
            .iter()
            .rposition(|s| matches!(s.kind, LayerKind::Conv { .. }));
        let mut layers = Vec::with_capacity(specs.len());
        for (pos, spec) in specs.iter().enumerate() {
            match spec.kind {
                LayerKind::Conv {
                    kernel,
                    out_channels,
                    stride,
                    padding,
                    dilation,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std)
                        .map_err(|e| CoreError::invalid(format!("init distribution: {}", e)))?;
                    let w_len = out_channels * in_channels * kernel * kernel;
                    let w_values: Vec<f64> = (0..w_len).map(|_| normal.sample(rng)).collect();
                    let w = Tensor::param(
                        w_values,
                        &[out_channels, in_channels, kernel, kernel],
                    )?;
                    let bias_init = if Some(pos) == last_conv { last_bias } else { 0.0 };
                    let b = Tensor::param(vec![bias_init; out_channels], &[out_channels])?;
                    layers.push(Layer::Conv(ConvLayer {
                        stride,
                        padding,
                        dilation: dilation.max(1),
                        activation: spec.activation,
                        w,
                        b,
                    }));
                    in_channels = out_channels;
                }
                LayerKind::MaxPool => layers.push(Layer::MaxPool),
            }
        }
        Ok(Stack { layers })
    }

    fn forward(&self, tape: &Tape, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => {
                    let y = tape.conv2d(&x, &c.w, &c.b, c.stride, c.padding, c.dilation)?;
                    match c.activation {
                        Activation::Relu => tape.relu(&y)?,
                        Activation::Softplus => tape.softplus(&y)?,
                        Activation::None => y,
                    }
                }
                Layer::MaxPool => tape.max_pool2d(&x)?,
            };
        }
        Ok(x)
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv(c) = layer {
                out.push((format!("{}.{}.w", prefix, i), c.w.clone()));
                out.push((format!("{}.{}.b", prefix, i), c.b.clone()));
            }
        }
    }
}

pub(crate) struct ModelParams {
    pub extractor: Stack,
    pub regressor: Stack,
    pub seg_heads: Vec<Stack>,
}

/// Initial bias of the rectified density output. Zero risks a dead output
/// (all pre-activations negative means no gradient ever flows); a small
/// positive start keeps the head alive from the first step.
const DENSITY_OUTPUT_BIAS_INIT: f64 = 0.5;

impl ModelParams {
    fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let extractor = Stack::build(&cfg.extractor, cfg.in_channels, rng, 0.0)?;
        let feat_channels = ModelConfig::last_conv_channels(&cfg.extractor)
            .ok_or_else(|| CoreError::invalid("extractor has no conv layers".to_string()))?;
        let regressor = Stack::build(
            &cfg.regressor_head,
            feat_channels,
            rng,
            DENSITY_OUTPUT_BIAS_INIT,
        )?;
        let seg_heads = (0..cfg.num_seg_heads)
            .map(|_| Stack::build(&cfg.seg_head_template, feat_channels, rng, 0.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            extractor,
            regressor,
            seg_heads,
        })
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.extractor.collect_params("extractor", &mut out);
        self.regressor.collect_params("regressor", &mut out);
        for (k, head) in self.seg_heads.iter().enumerate() {
            head.collect_params(&format!("seg.{}", k), &mut out);
        }
        out
    }
}

/// Shared feature extractor, density regressor, `c` segmentation heads,
/// and optionally an EMA teacher copy of all of them.
pub struct ModelBundle {
    pub cfg: ModelConfig,
    pub(crate) student: ModelParams,
    pub(crate) teacher: Option<ModelParams>,
}

/// Build a bundle with He fan-in initialization, deterministic per seed.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = ModelParams::build(cfg, &mut rng)?;
    Ok(ModelBundle {
        cfg: cfg.clone(),
        student,
        teacher: None,
    })
}

impl ModelBundle {
    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.cfg.in_channels {
            return Err(CoreError::invalid(format!(
                "model expects {} input channels, image has {}",
                self.cfg.in_channels, c
            )));
        }
        let f = self.cfg.downsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(CoreError::invalid(format!(
                "image extents {}x{} not divisible by downsample factor {}",
                h, w, f
            )));
        }
        Ok(())
    }

    /// Extractor features for an image; recorded once per call.
    pub fn forward_features(&self, tape: &Tape, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        self.student.extractor.forward(tape, image)
    }

    pub fn forward_density_from(&self, tape: &Tape, features: &Tensor) -> Result<Tensor> {
        self.student.regressor.forward(tape, features)
    }

    /// Density map only (no segmentation heads evaluated).
    pub fn forward_density(&self, tape: &Tape, image: &Tensor) -> Result<Tensor> {
        let feat = self.forward_features(tape, image)?;
        self.forward_density_from(tape, &feat)
    }

    /// Posterior field of segmentation head `k` from shared features.
    pub fn forward_seg_from(&self, tape: &Tape, k: usize, features: &Tensor) -> Result<Tensor> {
        let head = self
            .student
            .seg_heads
            .get(k)
            .ok_or_else(|| CoreError::invalid(format!("no segmentation head {}", k)))?;
        let logits = head.forward(tape, features)?;
        if self.cfg.seg_classes == 2 {
            tape.channel_softmax(&logits)
        } else {
            tape.channel_softmax_multi(&logits)
        }
    }

    /// Density map plus every head's posterior field, with the extractor
    /// evaluated exactly once.
    pub fn forward_all(&self, tape: &Tape, image: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let feat = self.forward_features(tape, image)?;
        let density = self.forward_density_from(tape, &feat)?;
        let probs = (0..self.student.seg_heads.len())
            .map(|k| self.forward_seg_from(tape, k, &feat))
            .collect::<Result<Vec<_>>>()?;
        Ok((density, probs))
    }

    /// Every head's posterior field without evaluating the density head
    /// (the unlabeled branch never needs it).
    pub fn forward_seg_all(&self, tape: &Tape, image: &Tensor) -> Result<Vec<Tensor>> {
        let feat = self.forward_features(tape, image)?;
        (0..self.student.seg_heads.len())
            .map(|k| self.forward_seg_from(tape, k, &feat))
            .collect()
    }

    /// Density prediction of the teacher copy for an image. The result is
    /// detached: teacher outputs are training targets, never gradient paths.
    pub fn teacher_forward_density(&self, image: &Tensor) -> Result<Tensor> {
        let teacher = self
            .teacher
            .as_ref()
            .ok_or_else(|| CoreError::invalid("model has no teacher copy".to_string()))?;
        self.check_image(image)?;
        let tape = Tape::new();
        let feat = teacher.extractor.forward(&tape, image)?;
        Ok(teacher.regressor.forward(&tape, &feat)?.detach())
    }

    /// Create the teacher as an exact copy of the current student.
    pub fn init_teacher(&mut self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let teacher = ModelParams::build(&self.cfg, &mut rng)?;
        for ((_, t), (_, s)) in teacher.named_params().iter().zip(self.student.named_params()) {
            t.set_values(s.to_vec())?;
        }
        self.teacher = Some(teacher);
        Ok(())
    }

    pub fn has_teacher(&self) -> bool {
        self.teacher.is_some()
    }

    /// EMA update of the teacher toward the student.
    pub fn ema_teacher_update(&mut self, alpha: f64) -> Result<()> {
        let teacher = self
            .teacher
            .as_ref()
            .ok_or_else(|| CoreError::invalid("model has no teacher copy".to_string()))?;
        let t_params: Vec<Tensor> = teacher.named_params().into_iter().map(|(_, t)| t).collect();
        let s_params: Vec<Tensor> = self.parameters();
        ema_update(&t_params, &s_params, alpha)
    }

    /// Student parameters in a fixed order (extractor, regressor, heads).
    pub fn parameters(&self) -> Vec<Tensor> {
        self.student.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .student
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("student.{}", n), t))
            .collect();
        if let Some(teacher) = &self.teacher {
            out.extend(
                teacher
                    .named_params()
                    .into_iter()
                    .map(|(n, t)| (format!("teacher.{}", n), t)),
            );
        }
        out
    }

    /// Parameters of the density regressor head only (for the
    /// gradient-routing checks).
    pub fn density_head_parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.student.regressor.collect_params("regressor", &mut out);
        out.into_iter().map(|(_, t)| t).collect()
    }

    pub fn extractor_parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.student.extractor.collect_params("extractor", &mut out);
        out.into_iter().map(|(_, t)| t).collect()
    }

    /// Snapshot of all student parameter values.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(|p| p.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) -> Result<()> {
        let params = self.parameters();
        if params.len() != snapshot.len() {
            return Err(CoreError::invalid(
                "snapshot does not match parameter count".to_string(),
            ));
        }
        for (p, s) in params.iter().zip(snapshot) {
            p.set_values(s.clone())?;
        }
        Ok(())
    }
}
