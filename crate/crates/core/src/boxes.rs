//! Axis-aligned box geometry.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate box ({x0}, {y0}, {x1}, {y1})")]
    Degenerate { x0: f64, y0: f64, x1: f64, y1: f64 },
}

/// Box given by its left-top `(x0, y0)` and right-bottom `(x1, y1)` corners,
/// in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0 && [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(GeometryError::Degenerate {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
            })
        }
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union, rejecting zero-area boxes.
    pub fn iou(&self, other: &BBox) -> Result<f64, GeometryError> {
        self.validate()?;
        other.validate()?;
        Ok(self.iou_unchecked(other))
    }

    /// Intersection over union for boxes already known to be valid.
    pub fn iou_unchecked(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Contains the point, borders included.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Intersection with `clip`, or `None` when it has no area.
    pub fn clip(&self, clip: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.x0.max(clip.x0),
            self.y0.max(clip.y0),
            self.x1.min(clip.x1),
            self.y1.min(clip.y1),
        );
        b.is_valid().then_some(b)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
}

/// Ground-truth object: a box plus a category index (>= 1; 0 is background).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class: u32,
}

impl GroundTruthBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, class: u32) -> Self {
        Self {
            bbox: BBox::new(x0, y0, x1, y1),
            class,
        }
    }

    pub fn area(&self) -> f64 {
        self.bbox.area()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        // touching edges share no area
        assert_eq!(a.iou(&BBox::new(2.0, 0.0, 3.0, 2.0)).unwrap(), 0.0);
        assert!(a.iou(&BBox::new(1.0, 1.0, 1.0, 3.0)).is_err());
    }

    /// Counts unit pixels covered by integer-cornered boxes.
    fn raster_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
        let inside = |r: (i32, i32, i32, i32), x: i32, y: i32| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
        let (mut inter, mut union) = (0, 0);
        for y in -10..20 {
            for x in -10..20 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as i32;
                union += (ia || ib) as i32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_matches_pixel_count() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        let expected = raster_iou((0, 0, 2, 2), (1, 0, 3, 2));
        assert!((expected - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.iou(&b).unwrap() - expected).abs() < 1e-15);
        for (ra, rb) in [((0, 0, 5, 3), (2, 1, 9, 8)), ((-3, -3, 4, 4), (0, 0, 2, 2)), ((0, 0, 3, 3), (3, 3, 5, 5))] {
            let to_box = |r: (i32, i32, i32, i32)| BBox::new(r.0 as f64, r.1 as f64, r.2 as f64, r.3 as f64);
            assert!((to_box(ra).iou(&to_box(rb)).unwrap() - raster_iou(ra, rb)).abs() < 1e-15);
        }
    }

    #[test]
    fn clip_drops_empty() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(b.clip(&BBox::new(5.0, 5.0, 20.0, 20.0)), Some(BBox::new(5.0, 5.0, 10.0, 10.0)));
        assert_eq!(b.clip(&BBox::new(10.0, 0.0, 20.0, 20.0)), None);
    }
}
