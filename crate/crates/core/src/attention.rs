//! Channel self-attention over one feature map and scale self-attention over
//! a five-level pyramid.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Array, AutodiffError, Graph, InterpMode, Tensor};

pub const PYRAMID_LEVELS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("attention configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T, E = AttentionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Identity,
    OneByOneConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub channels: usize,
    pub projection_kind: ProjectionKind,
    /// Divide similarities by `sqrt(H*W)`.
    pub scaled: bool,
    /// Add the input back onto the attended map.
    pub residual: bool,
}

impl AttentionConfig {
    pub fn new(channels: usize, num_heads: usize, projection_kind: ProjectionKind) -> Self {
        Self {
            num_heads,
            channels,
            projection_kind,
            scaled: false,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.channels == 0 {
            return Err(AttentionError::Config("channels and heads must be positive".into()));
        }
        if self.channels % self.num_heads != 0 {
            return Err(AttentionError::Config(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Query/key/value maps: either identity or `(C, C, 1, 1)` weights.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionParams {
    Identity,
    Conv { q: Array, k: Array, v: Array },
}

impl ProjectionParams {
    /// He-uniform 1x1 weights, or identity markers.
    pub fn init(kind: ProjectionKind, channels: usize, rng: &mut impl Rng) -> Self {
        match kind {
            ProjectionKind::Identity => Self::Identity,
            ProjectionKind::OneByOneConv => {
                let mut draw = || conv1x1_init(channels, channels, rng);
                Self::Conv {
                    q: draw(),
                    k: draw(),
                    v: draw(),
                }
            }
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Projection<'g> {
        match self {
            Self::Identity => Projection::Identity,
            Self::Conv { q, k, v } => Projection::Conv {
                q: g.param(q),
                k: g.param(k),
                v: g.param(v),
            },
        }
    }
}

pub(crate) fn conv1x1_init(cout: usize, cin: usize, rng: &mut impl Rng) -> Array {
    let bound = (6.0 / cin as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    Array::from_fn(&[cout, cin, 1, 1], |_| dist.sample(rng))
}

/// Projections bound into a graph.
#[derive(Debug, Clone, Copy)]
pub enum Projection<'g> {
    Identity,
    Conv { q: Tensor<'g>, k: Tensor<'g>, v: Tensor<'g> },
}

impl<'g> Projection<'g> {
    fn apply(&self, x: &Tensor<'g>) -> Result<(Tensor<'g>, Tensor<'g>, Tensor<'g>)> {
        Ok(match self {
            Self::Identity => (*x, *x, *x),
            Self::Conv { q, k, v } => (x.conv2d(q, 1, 0)?, x.conv2d(k, 1, 0)?, x.conv2d(v, 1, 0)?),
        })
    }
}

/// Attended map and the per-head `(d, d)` weight matrices.
pub struct Attended<'g> {
    pub output: Tensor<'g>,
    pub weights: Vec<Tensor<'g>>,
}

fn check_map(x: &Tensor<'_>, channels: usize) -> Result<(usize, usize)> {
    match x.shape().as_slice() {
        &[c, h, w] if c == channels => Ok((h, w)),
        other => Err(AttentionError::Config(format!("expected ({channels}, H, W) input, got {other:?}"))),
    }
}

/// Multi-head channel attention with exposed weights.
pub fn cst_attend<'g>(x: &Tensor<'g>, cfg: &AttentionConfig, proj: &Projection<'g>) -> Result<Attended<'g>> {
    cfg.validate()?;
    let (h, w) = check_map(x, cfg.channels)?;
    let (c, hw) = (cfg.channels, h * w);
    let (q, k, v) = proj.apply(x)?;
    let (q, k, v) = (q.reshape(&[c, hw])?, k.reshape(&[c, hw])?, v.reshape(&[c, hw])?);
    let d = c / cfg.num_heads;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for n in 0..cfg.num_heads {
        let qn = q.narrow(0, n * d, d)?;
        let kn = k.narrow(0, n * d, d)?;
        let vn = v.narrow(0, n * d, d)?;
        let mut sim = qn.matmul(&kn.transpose()?)?;
        if cfg.scaled {
            sim = sim.scale(1.0 / (hw as f64).sqrt());
        }
        let a = sim.softmax(1)?;
        heads.push(a.matmul(&vn)?);
        weights.push(a);
    }
    let mut output = concat(&heads, 0)?.reshape(&[c, h, w])?;
    if cfg.residual {
        output = output.add(x)?;
    }
    Ok(Attended { output, weights })
}

pub fn cst_forward<'g>(x: &Tensor<'g>, cfg: &AttentionConfig, proj: &Projection<'g>) -> Result<Tensor<'g>> {
    Ok(cst_attend(x, cfg, proj)?.output)
}

/// Learned 1x1 convolution with bias.
pub fn channel_reduce<'g>(x: &Tensor<'g>, weight: &Tensor<'g>, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
    Ok(x.conv2d(weight, 1, 0)?.add_channel_bias(bias)?)
}

/// Parameters of the scale attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct PsstParams {
    /// `(1, C, 1, 1)` reduction shared by all levels.
    pub reduce_weight: Array,
    pub reduce_bias: Array,
    /// Projections over the five slots.
    pub projection: ProjectionParams,
    /// `(C, 2C, 1, 1)` fusion for the concat variant.
    pub fuse: Option<Array>,
}

impl PsstParams {
    pub fn init(cfg: &AttentionConfig, channels: usize, concat_variant: bool, rng: &mut impl Rng) -> Self {
        // averaging reduction; bias 1 keeps the first-step weights near one
        Self {
            reduce_weight: Array::full(&[1, channels, 1, 1], 1.0 / channels as f64),
            reduce_bias: Array::full(&[1], 1.0),
            projection: ProjectionParams::init(cfg.projection_kind, PYRAMID_LEVELS, rng),
            fuse: concat_variant.then(|| conv1x1_init(channels, 2 * channels, rng)),
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> BoundPsst<'g> {
        BoundPsst {
            reduce_weight: g.param(&self.reduce_weight),
            reduce_bias: g.param(&self.reduce_bias),
            projection: self.projection.bind(g),
            fuse: self.fuse.as_ref().map(|f| g.param(f)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPsst<'g> {
    pub reduce_weight: Tensor<'g>,
    pub reduce_bias: Tensor<'g>,
    pub projection: Projection<'g>,
    pub fuse: Option<Tensor<'g>>,
}

/// Rescaled pyramid and the five per-level weights.
pub struct ScaleAttended<'g> {
    pub levels: Vec<Tensor<'g>>,
    pub slot_weights: Tensor<'g>,
    pub attention: Vec<Tensor<'g>>,
}

/// Scale attention: reduce each level to one channel, resize to the finest
/// extent, attend over the five slots, and multiply each level by the
/// spatial mean of its attended slot. `cfg.channels` is the slot count (5).
pub fn psst_attend<'g>(levels: &[Tensor<'g>], cfg: &AttentionConfig, params: &BoundPsst<'g>) -> Result<ScaleAttended<'g>> {
    if levels.len() != PYRAMID_LEVELS {
        return Err(AttentionError::Config(format!("expected {PYRAMID_LEVELS} levels, got {}", levels.len())));
    }
    if cfg.channels != PYRAMID_LEVELS {
        return Err(AttentionError::Config(format!("scale attention runs over {PYRAMID_LEVELS} slots")));
    }
    let c = levels[0].shape()[0];
    let [_, h, w] = levels[0].shape()[..] else {
        return Err(AttentionError::Config("levels must be (C, H, W)".into()));
    };
    let mut slots = Vec::with_capacity(PYRAMID_LEVELS);
    for level in levels {
        check_map(level, c)?;
        let reduced = channel_reduce(level, &params.reduce_weight, &params.reduce_bias)?;
        slots.push(reduced.interpolate(h, w, InterpMode::Bilinear)?);
    }
    let stacked = concat(&slots, 0)?;
    let slot_cfg = AttentionConfig { residual: false, ..cfg.clone() };
    let attended = cst_attend(&stacked, &slot_cfg, &params.projection)?;
    let slot_weights = attended.output.mean(&[1, 2])?;
    let mut out = Vec::with_capacity(PYRAMID_LEVELS);
    for (k, level) in levels.iter().enumerate() {
        let scaled = level.mul_scalar(&slot_weights.narrow(0, k, 1)?)?;
        out.push(match &params.fuse {
            Some(fuse) => concat(&[*level, scaled], 0)?.conv2d(fuse, 1, 0)?,
            None => scaled,
        });
    }
    Ok(ScaleAttended {
        levels: out,
        slot_weights,
        attention: attended.weights,
    })
}

pub fn psst_forward<'g>(levels: &[Tensor<'g>], cfg: &AttentionConfig, params: &BoundPsst<'g>) -> Result<Vec<Tensor<'g>>> {
    Ok(psst_attend(levels, cfg, params)?.levels)
}

/// Value-level convenience wrapper around [`cst_forward`].
pub fn cst_forward_array(x: &Array, cfg: &AttentionConfig, params: &ProjectionParams) -> Result<Array> {
    let g = Graph::new();
    let xt = g.constant(x.clone());
    Ok(cst_forward(&xt, cfg, &params.bind(&g))?.value())
}

/// Value-level convenience wrapper around [`psst_forward`].
pub fn psst_forward_array(levels: &[Array], cfg: &AttentionConfig, params: &PsstParams) -> Result<(Vec<Array>, Array)> {
    let g = Graph::new();
    let xs: Vec<Tensor> = levels.iter().map(|a| g.constant(a.clone())).collect();
    let out = psst_attend(&xs, cfg, &params.bind(&g))?;
    Ok((out.levels.iter().map(Tensor::value).collect(), out.slot_weights.value()))
}
