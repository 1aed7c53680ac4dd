//! Label assignment: IoU anchor matching, point-based (anchor-free)
//! assignment, and the rescue merge that hands anchor-free positives to the
//! anchor branch for ground truths the IoU matcher left uncovered.

mod dea;
mod free;
mod geometry;
mod matcher;
mod stats;

pub use dea::{centerness, dea_enhance, EnhanceReport};
pub use free::{assign_anchor_free, decode_targets, designated_level, fcos_targets};
pub use geometry::{map_location, Anchor, AnchorSet, LevelGeometry, PyramidGeometry, LEVEL_STRIDES};
pub use matcher::match_anchors;
pub use stats::{coverage_stats, CoverageRow, CoverageSummary};

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssignError {
    #[error("invalid matcher config: {0}")]
    Config(String),
    #[error("anchor set is empty")]
    NoAnchors,
    #[error("maps were built against different ground truths ({0} vs {1} boxes)")]
    GtMismatch(usize, usize),
}

/// Distances `(l, t, r, b)` from a point to the four sides of a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl RegressionTarget {
    pub const fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        Self { l, t, r, b }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn min(&self) -> f64 {
        self.l.min(self.t).min(self.r).min(self.b)
    }

    pub fn max(&self) -> f64 {
        self.l.max(self.t).max(self.r).max(self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    AnchorIou,
    AnchorFree,
    DeaRescue,
}

/// A positive unit: the ground truth it was matched to and the `(l, t, r, b)`
/// distances from the unit's centre to that ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub class: u32,
    pub gt: usize,
    pub target: RegressionTarget,
    pub source: Source,
}

/// Labels for every unit (location or anchor). `None` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap {
    pub units: Vec<Option<Assignment>>,
    pub num_gts: usize,
}

impl AssignmentMap {
    pub fn empty(num_units: usize, num_gts: usize) -> Self {
        Self {
            units: vec![None; num_units],
            num_gts,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Class label c* of a unit, 0 for background.
    pub fn class(&self, unit: usize) -> u32 {
        self.units[unit].map_or(0, |a| a.class)
    }

    pub fn num_pos(&self) -> usize {
        self.units.iter().filter(|u| u.is_some()).count()
    }

    /// Positive-unit count for every ground truth.
    pub fn positives_per_gt(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_gts];
        for a in self.units.iter().flatten() {
            counts[a.gt] += 1;
        }
        counts
    }

    pub fn count_source(&self, source: Source) -> usize {
        self.units.iter().flatten().filter(|a| a.source == source).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub pos_iou_threshold: f64,
    pub anchor_base_size: f64,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// Upper bounds of the object scale `max(w, h) / 2` for P2..P5; larger
    /// objects go to P6.
    pub free_size_bounds: Vec<f64>,
    pub rescue_k: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            pos_iou_threshold: 0.5,
            anchor_base_size: 16.0,
            anchor_scales: vec![1.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            // (0,64],(64,128],... at 1024 px scaled to a 128 px input
            free_size_bounds: vec![8.0, 16.0, 32.0, 64.0],
            rescue_k: 3,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), AssignError> {
        if !(self.pos_iou_threshold > 0.0 && self.pos_iou_threshold <= 1.0) {
            return Err(AssignError::Config(format!(
                "pos_iou_threshold must lie in (0, 1], got {}",
                self.pos_iou_threshold
            )));
        }
        if self.anchor_base_size <= 0.0 {
            return Err(AssignError::Config("anchor_base_size must be positive".into()));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(AssignError::Config("need at least one anchor scale and ratio".into()));
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|&v| v.is_nan() || v <= 0.0) {
            return Err(AssignError::Config("anchor scales and ratios must be positive".into()));
        }
        if self.free_size_bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AssignError::Config("free_size_bounds must increase".into()));
        }
        Ok(())
    }

    pub fn anchors(&self, geometry: &PyramidGeometry) -> AnchorSet {
        AnchorSet::generate(geometry, self.anchor_base_size, &self.anchor_scales, &self.anchor_ratios)
    }
}

/// Box spanned by distances `t` around `(x, y)`.
pub(crate) fn box_around(x: f64, y: f64, t: &RegressionTarget) -> BBox {
    BBox::new(x - t.l, y - t.t, x + t.r, y + t.b)
}
