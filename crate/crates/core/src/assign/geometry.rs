use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

/// Strides of P2..P6.
pub const LEVEL_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];

/// Maps feature-map location `(x, y)` at stride `s` back to the image point
/// `(floor(s/2) + x*s, floor(s/2) + y*s)`.
pub fn map_location(x: usize, y: usize, stride: usize) -> (f64, f64) {
    let half = (stride / 2) as f64;
    (half + (x * stride) as f64, half + (y * stride) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelGeometry {
    pub fn num_locations(&self) -> usize {
        self.height * self.width
    }
}

/// Spatial layout of every pyramid level for one input size. Locations are
/// numbered level by level, row-major within a level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidGeometry {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<LevelGeometry>,
}

impl PyramidGeometry {
    pub fn new(image_height: usize, image_width: usize) -> Self {
        Self::with_strides(image_height, image_width, &LEVEL_STRIDES)
    }

    /// Each level has extent `ceil(dim / stride)`, which is what a chain of
    /// stride-2, padding-1, 3x3 convolutions produces.
    pub fn with_strides(image_height: usize, image_width: usize, strides: &[usize]) -> Self {
        let levels = strides
            .iter()
            .map(|&stride| LevelGeometry {
                stride,
                height: image_height.div_ceil(stride),
                width: image_width.div_ceil(stride),
            })
            .collect();
        Self {
            image_height,
            image_width,
            levels,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_locations(&self) -> usize {
        self.levels.iter().map(LevelGeometry::num_locations).sum()
    }

    /// Index of the first location of `level`.
    pub fn level_offset(&self, level: usize) -> usize {
        self.levels[..level].iter().map(LevelGeometry::num_locations).sum()
    }

    /// `(level, x, y)` of a flat location index.
    pub fn locate(&self, mut index: usize) -> (usize, usize, usize) {
        for (k, level) in self.levels.iter().enumerate() {
            if index < level.num_locations() {
                return (k, index % level.width, index / level.width);
            }
            index -= level.num_locations();
        }
        panic!("location index out of range");
    }

    pub fn point(&self, index: usize) -> (f64, f64) {
        let (k, x, y) = self.locate(index);
        map_location(x, y, self.levels[k].stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub level: usize,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.width, self.height)
    }
}

/// Anchors for every location, ordered (level, location, scale, ratio).
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub geometry: PyramidGeometry,
    pub anchors: Vec<Anchor>,
    pub per_location: usize,
    /// Position of the base shape (first scale, ratio closest to 1) among a
    /// location's anchors.
    pub base_slot: usize,
}

impl AnchorSet {
    /// Anchor side at level k is `base_size * stride_k / 4`, i.e. `base_size`
    /// on P2. Ratio is height / width.
    pub fn generate(geometry: &PyramidGeometry, base_size: f64, scales: &[f64], ratios: &[f64]) -> Self {
        let mut anchors = Vec::new();
        for (k, level) in geometry.levels.iter().enumerate() {
            let size = base_size * level.stride as f64 / 4.0;
            for y in 0..level.height {
                for x in 0..level.width {
                    let (cx, cy) = map_location(x, y, level.stride);
                    for &scale in scales {
                        for &ratio in ratios {
                            let side = size * scale;
                            anchors.push(Anchor {
                                cx,
                                cy,
                                width: side / ratio.sqrt(),
                                height: side * ratio.sqrt(),
                                level: k,
                            });
                        }
                    }
                }
            }
        }
        let base_ratio = ratios
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1.ln().abs()).total_cmp(&b.1.ln().abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Self {
            geometry: geometry.clone(),
            anchors,
            per_location: scales.len() * ratios.len(),
            base_slot: base_ratio,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchor index for slot `slot` of flat location `location`.
    pub fn index_at(&self, location: usize, slot: usize) -> usize {
        location * self.per_location + slot
    }

    pub fn location_of(&self, anchor: usize) -> usize {
        anchor / self.per_location
    }
}
