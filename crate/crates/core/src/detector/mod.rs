//! Desk-scale dense detector: plain conv backbone, FPN, optional hierarchy
//! transformer, and twin anchor / anchor-free heads.

mod checkpoint;
mod infer;
mod params;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{AnchorSet, MatcherConfig, PyramidGeometry, LEVEL_STRIDES};
use crate::attention::{self, AttentionConfig, AttentionError, ProjectionKind, PYRAMID_LEVELS};
use crate::autodiff::{Array, AutodiffError, CustomOp, Graph, InterpMode, Tensor};
use crate::losses::{BranchOutputs, LossError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use infer::{nms, Detection};
pub use params::{BoundParams, ParamStore};
pub use train::{prepare_sample, train, PreparedSample, StepLog, TrainSample};

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Assign(#[from] crate::assign::AssignError),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

/// Where the hierarchy transformer is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HtMode {
    None,
    Cst,
    Psst,
    Both,
}

impl HtMode {
    pub fn cst(self) -> bool {
        matches!(self, HtMode::Cst | HtMode::Both)
    }

    pub fn psst(self) -> bool {
        matches!(self, HtMode::Psst | HtMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of every backbone, FPN and head feature map.
    pub width: usize,
    /// 3x3 conv + ReLU layers per head branch.
    pub head_layers: usize,
    pub ht: HtMode,
    pub cst_heads: usize,
    pub psst_heads: usize,
    pub ht_residual: bool,
    pub ht_scaled: bool,
    pub psst_concat: bool,
    pub dea_enabled: bool,
    /// Score candidates from the anchor-free head at inference.
    pub free_branch_inference: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub pre_nms_top_n: usize,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            in_channels: 1,
            num_classes: 4,
            width: 32,
            head_layers: 4,
            ht: HtMode::None,
            cst_heads: 4,
            psst_heads: 1,
            ht_residual: false,
            ht_scaled: true,
            psst_concat: false,
            dea_enabled: false,
            free_branch_inference: true,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: 10.0,
            steps: 50,
            batch_size: 4,
            seed: 0,
            score_thresh: 0.05,
            nms_iou: 0.5,
            pre_nms_top_n: 1000,
            max_detections: 100,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DetectorError::Config(m));
        if self.input_size < LEVEL_STRIDES[LEVEL_STRIDES.len() - 1] {
            return fail(format!("input_size must be at least 64, got {}", self.input_size));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.width == 0 {
            return fail("channels, classes and width must be positive".into());
        }
        if self.head_layers == 0 {
            return fail("heads need at least one layer".into());
        }
        if self.ht.cst() && (self.cst_heads == 0 || self.width % self.cst_heads != 0) {
            return fail(format!("width {} not divisible by {} heads", self.width, self.cst_heads));
        }
        if self.ht.psst() && !matches!(self.psst_heads, 1 | 5) {
            return fail("psst_heads must divide the 5 pyramid slots".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return fail("invalid optimiser settings".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) || !(0.0..1.0).contains(&self.score_thresh) {
            return fail("score_thresh must lie in [0, 1) and nms_iou in (0, 1]".into());
        }
        Ok(())
    }

    pub fn cst_config(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.cst_heads,
            channels: self.width,
            projection_kind: ProjectionKind::OneByOneConv,
            scaled: self.ht_scaled,
            residual: self.ht_residual,
        }
    }

    pub fn psst_config(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.psst_heads,
            channels: PYRAMID_LEVELS,
            projection_kind: ProjectionKind::OneByOneConv,
            scaled: self.ht_scaled,
            residual: false,
        }
    }
}

/// Head outputs of both branches, per level.
pub struct HeadOutputs<'g> {
    pub pyramid: Vec<Tensor<'g>>,
    pub free: BranchOutputs<'g>,
    pub anchor: BranchOutputs<'g>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub matcher: MatcherConfig,
    pub params: ParamStore,
    pub geometry: PyramidGeometry,
    pub anchors: AnchorSet,
    pub step: u64,
}

/// `exp(min(x, cap))`; the gradient is zero above the cap.
struct ClampedExp {
    cap: f64,
}

impl CustomOp for ClampedExp {
    fn name(&self) -> &'static str {
        "clamped_exp"
    }

    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = inputs[0]
            .iter()
            .zip(output)
            .zip(grad_out)
            .map(|((&x, &y), &go)| if x < self.cap { y * go } else { 0.0 })
            .collect();
        vec![Some(g)]
    }
}

const MAX_LOG_DISTANCE: f64 = 8.0;

pub(crate) fn clamped_exp<'g>(x: &Tensor<'g>) -> Result<Tensor<'g>> {
    let value: Vec<f64> = x.data().iter().map(|v| v.min(MAX_LOG_DISTANCE).exp()).collect();
    Ok(x.graph().custom(&[*x], x.shape(), value, Box::new(ClampedExp { cap: MAX_LOG_DISTANCE }))?)
}

impl Detector {
    /// Deterministic initialisation from `seed`.
    pub fn build(config: DetectorConfig, matcher: MatcherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        matcher.validate()?;
        let geometry = PyramidGeometry::new(config.input_size, config.input_size);
        let anchors = matcher.anchors(&geometry);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ht_rng = ChaCha8Rng::seed_from_u64(seed);
        ht_rng.set_stream(1);
        let params = params::init_params(&config, anchors.per_location, &mut rng, &mut ht_rng);
        Ok(Self {
            config,
            matcher,
            params,
            geometry,
            anchors,
            step: 0,
        })
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchors.per_location
    }

    fn conv<'g>(p: &BoundParams<'g>, x: &Tensor<'g>, name: &str, stride: usize, padding: usize) -> Result<Tensor<'g>> {
        let w = p.get(&format!("{name}.weight"));
        let b = p.get(&format!("{name}.bias"));
        Ok(x.conv2d(&w, stride, padding)?.add_channel_bias(&b)?)
    }

    /// Backbone and FPN, P2..P6.
    fn pyramid<'g>(&self, p: &BoundParams<'g>, image: &Tensor<'g>) -> Result<Vec<Tensor<'g>>> {
        let mut x = Self::conv(p, image, "backbone.stem", 2, 1)?.relu();
        let mut stages = Vec::with_capacity(PYRAMID_LEVELS);
        for k in 0..PYRAMID_LEVELS {
            x = Self::conv(p, &x, &format!("backbone.stage{k}"), 2, 1)?.relu();
            stages.push(x);
        }
        let mut levels: Vec<Tensor<'g>> = Vec::with_capacity(PYRAMID_LEVELS);
        let mut top: Option<Tensor<'g>> = None;
        for k in (0..PYRAMID_LEVELS).rev() {
            let lateral = Self::conv(p, &stages[k], &format!("fpn.lateral{k}"), 1, 0)?;
            let merged = match top {
                Some(t) => {
                    let shape = lateral.shape();
                    lateral.add(&t.interpolate(shape[1], shape[2], InterpMode::Nearest)?)?
                }
                None => lateral,
            };
            top = Some(merged);
            levels.push(merged);
        }
        levels.reverse();
        Ok(levels)
    }

    fn transform<'g>(&self, p: &BoundParams<'g>, levels: Vec<Tensor<'g>>) -> Result<Vec<Tensor<'g>>> {
        let mut levels = levels;
        if self.config.ht.cst() {
            let cfg = self.config.cst_config();
            let proj = attention::Projection::Conv {
                q: p.get("ht.cst.q"),
                k: p.get("ht.cst.k"),
                v: p.get("ht.cst.v"),
            };
            levels = levels
                .iter()
                .map(|l| attention::cst_forward(l, &cfg, &proj))
                .collect::<std::result::Result<_, _>>()?;
        }
        if self.config.ht.psst() {
            let bound = attention::BoundPsst {
                reduce_weight: p.get("ht.psst.reduce.weight"),
                reduce_bias: p.get("ht.psst.reduce.bias"),
                projection: attention::Projection::Conv {
                    q: p.get("ht.psst.q"),
                    k: p.get("ht.psst.k"),
                    v: p.get("ht.psst.v"),
                },
                fuse: self.config.psst_concat.then(|| p.get("ht.psst.fuse")),
            };
            levels = attention::psst_forward(&levels, &self.config.psst_config(), &bound)?;
        }
        Ok(levels)
    }

    fn head<'g>(&self, p: &BoundParams<'g>, x: &Tensor<'g>, branch: &str) -> Result<(Tensor<'g>, Tensor<'g>)> {
        let mut h = *x;
        for i in 0..self.config.head_layers {
            h = Self::conv(p, &h, &format!("{branch}.layer{i}"), 1, 1)?.relu();
        }
        Ok((Self::conv(p, &h, &format!("{branch}.cls"), 1, 1)?, Self::conv(p, &h, &format!("{branch}.reg"), 1, 1)?))
    }

    /// Full forward pass of one `(C, H, W)` image.
    pub fn forward<'g>(&self, p: &BoundParams<'g>, image: &Tensor<'g>) -> Result<HeadOutputs<'g>> {
        let s = self.config.input_size;
        if image.shape() != [self.config.in_channels, s, s] {
            return Err(DetectorError::Input(format!(
                "expected ({}, {s}, {s}) image, got {:?}",
                self.config.in_channels,
                image.shape()
            )));
        }
        let pyramid = self.transform(p, self.pyramid(p, image)?)?;
        let mut free = BranchOutputs { cls: vec![], reg: vec![] };
        let mut anchor = BranchOutputs { cls: vec![], reg: vec![] };
        for (k, level) in pyramid.iter().enumerate() {
            let (cls, reg) = self.head(p, level, "head.free")?;
            free.cls.push(cls);
            free.reg.push(clamped_exp(&reg)?.scale(self.geometry.levels[k].stride as f64));
            let (cls, reg) = self.head(p, level, "head.anchor")?;
            anchor.cls.push(cls);
            anchor.reg.push(reg);
        }
        Ok(HeadOutputs { pyramid, free, anchor })
    }

    /// Forward pass on a fresh graph, returning values only.
    pub fn forward_values(&self, image: &Array) -> Result<(Vec<Array>, Vec<Array>, Vec<Array>, Vec<Array>)> {
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let out = self.forward(&p, &g.constant(image.clone()))?;
        let vals = |ts: &[Tensor]| ts.iter().map(Tensor::value).collect::<Vec<_>>();
        Ok((vals(&out.free.cls), vals(&out.free.reg), vals(&out.anchor.cls), vals(&out.anchor.reg)))
    }
}

/// Worker pool sized by `PYRAMIDFORGE_THREADS` (all cores when unset).
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("PYRAMIDFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}
