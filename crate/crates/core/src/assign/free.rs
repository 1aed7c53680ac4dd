use super::{box_around, AssignError, Assignment, AssignmentMap, MatcherConfig, PyramidGeometry, RegressionTarget, Source};
use crate::boxes::{BBox, GroundTruthBox};

/// Distances from `(x, y)` to the sides of `gt`. All four are non-negative
/// exactly when the point lies inside the box (borders included).
pub fn fcos_targets(x: f64, y: f64, gt: &BBox) -> RegressionTarget {
    RegressionTarget::new(x - gt.x0, y - gt.y0, gt.x1 - x, gt.y1 - y)
}

/// Inverse of [`fcos_targets`].
pub fn decode_targets(x: f64, y: f64, t: &RegressionTarget) -> BBox {
    box_around(x, y, t)
}

/// Pyramid level whose size range holds `max(w, h) / 2`.
pub fn designated_level(gt: &BBox, bounds: &[f64], num_levels: usize) -> usize {
    let scale = gt.width().max(gt.height()) / 2.0;
    bounds
        .iter()
        .position(|&b| scale <= b)
        .unwrap_or(bounds.len())
        .min(num_levels - 1)
}

/// Locations of `level` lying inside `gt`, in index order.
fn inside_locations(geometry: &PyramidGeometry, level: usize, gt: &BBox) -> Vec<usize> {
    let lv = geometry.levels[level];
    let offset = geometry.level_offset(level);
    let s = lv.stride as f64;
    let half = (lv.stride / 2) as f64;
    // x = half + i*s inside [x0, x1]
    let span = |lo: f64, hi: f64, n: usize| {
        let first = ((lo - half) / s).ceil().max(0.0) as usize;
        let last = ((hi - half) / s).floor();
        if last < 0.0 {
            return first..first;
        }
        first..((last as usize + 1).min(n))
    };
    let xs = span(gt.x0, gt.x1, lv.width);
    let ys = span(gt.y0, gt.y1, lv.height);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for y in ys {
        for x in xs.clone() {
            out.push(offset + y * lv.width + x);
        }
    }
    out
}

/// Point assignment over every pyramid location.
///
/// Each ground truth claims the locations inside it on the level selected by
/// its size; when that level has none it falls back to the next finer levels,
/// then the coarser ones, and finally to the single P2 location nearest its
/// centre. A location claimed by several ground truths goes to the one with
/// the smallest area (lowest index on ties).
pub fn assign_anchor_free(
    geometry: &PyramidGeometry,
    gts: &[GroundTruthBox],
    cfg: &MatcherConfig,
) -> Result<AssignmentMap, AssignError> {
    cfg.validate()?;
    let mut map = AssignmentMap::empty(geometry.num_locations(), gts.len());
    let mut claim_area = vec![f64::INFINITY; map.len()];
    for (g, gt) in gts.iter().enumerate() {
        for unit in claimed_locations(geometry, &gt.bbox, cfg) {
            let area = gt.area();
            if area < claim_area[unit] {
                claim_area[unit] = area;
                let (x, y) = geometry.point(unit);
                map.units[unit] = Some(Assignment {
                    class: gt.class,
                    gt: g,
                    target: fcos_targets(x, y, &gt.bbox),
                    source: Source::AnchorFree,
                });
            }
        }
    }
    Ok(map)
}

pub(crate) fn claimed_locations(geometry: &PyramidGeometry, gt: &BBox, cfg: &MatcherConfig) -> Vec<usize> {
    let n = geometry.num_levels();
    let home = designated_level(gt, &cfg.free_size_bounds, n);
    let order = (0..=home).rev().chain(home + 1..n);
    for level in order {
        let inside = inside_locations(geometry, level, gt);
        if !inside.is_empty() {
            return inside;
        }
    }
    vec![nearest_fine_location(geometry, gt)]
}

fn nearest_fine_location(geometry: &PyramidGeometry, gt: &BBox) -> usize {
    let (cx, cy) = gt.center();
    let lv = geometry.levels[0];
    let mut best = (f64::INFINITY, 0);
    for i in 0..lv.num_locations() {
        let (px, py) = geometry.point(i);
        let d = (px - cx).powi(2) + (py - cy).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn target_examples() {
        let gt = BBox::new(10.0, 20.0, 50.0, 80.0);
        assert_eq!(fcos_targets(30.0, 50.0, &gt), RegressionTarget::new(20.0, 30.0, 20.0, 30.0));
        assert_eq!(fcos_targets(10.0, 20.0, &gt), RegressionTarget::new(0.0, 0.0, 40.0, 60.0));
        let outside = fcos_targets(5.0, 50.0, &gt);
        assert!(outside.l < 0.0);
        let p = decode_targets(7.0, 9.0, &RegressionTarget::new(0.0, 0.0, 0.0, 0.0));
        assert_eq!(p, BBox::new(7.0, 9.0, 7.0, 9.0));
    }

    proptest! {
        #[test]
        fn targets_sum_to_extent_and_round_trip(
            x0 in -100.0..100.0f64, y0 in -100.0..100.0f64,
            w in 0.5..200.0f64, h in 0.5..200.0f64,
            fx in 0.0..=1.0f64, fy in 0.0..=1.0f64,
        ) {
            let gt = BBox::new(x0, y0, x0 + w, y0 + h);
            let (x, y) = (x0 + fx * w, y0 + fy * h);
            let t = fcos_targets(x, y, &gt);
            prop_assert!(t.min() >= 0.0);
            prop_assert!(((t.l + t.r) - gt.width()).abs() <= 1e-12 * gt.width().max(1.0) * 4.0);
            prop_assert!(((t.t + t.b) - gt.height()).abs() <= 1e-12 * gt.height().max(1.0) * 4.0);
            let back = decode_targets(x, y, &t);
            for (a, b) in [(back.x0, gt.x0), (back.y0, gt.y0), (back.x1, gt.x1), (back.y1, gt.y1)] {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn whole_image_gt_covers_p2() {
        let geometry = PyramidGeometry::new(64, 64);
        let cfg = MatcherConfig {
            free_size_bounds: vec![100.0, 200.0, 300.0, 400.0],
            ..Default::default()
        };
        let gts = [GroundTruthBox::new(0.0, 0.0, 64.0, 64.0, 3)];
        let map = assign_anchor_free(&geometry, &gts, &cfg).unwrap();
        let p2 = geometry.levels[0].num_locations();
        assert!((0..p2).all(|u| map.class(u) == 3));
        assert!((p2..map.len()).all(|u| map.class(u) == 0));
    }

    #[test]
    fn empty_scene_is_background() {
        let geometry = PyramidGeometry::new(64, 64);
        let map = assign_anchor_free(&geometry, &[], &MatcherConfig::default()).unwrap();
        assert_eq!(map.num_pos(), 0);
    }

    #[test]
    fn level_designation() {
        let bounds = [8.0, 16.0, 32.0, 64.0];
        assert_eq!(designated_level(&BBox::new(0.0, 0.0, 10.0, 16.0), &bounds, 5), 0);
        assert_eq!(designated_level(&BBox::new(0.0, 0.0, 17.0, 16.0), &bounds, 5), 1);
        assert_eq!(designated_level(&BBox::new(0.0, 0.0, 200.0, 16.0), &bounds, 5), 4);
    }

    #[test]
    fn tiny_gt_falls_back_to_nearest_location() {
        let geometry = PyramidGeometry::new(32, 32);
        // misses every location centre on all levels
        let gts = [GroundTruthBox::new(2.5, 2.5, 3.5, 3.5, 1)];
        let map = assign_anchor_free(&geometry, &gts, &MatcherConfig::default()).unwrap();
        assert_eq!(map.num_pos(), 1);
        let unit = map.units.iter().position(|u| u.is_some()).unwrap();
        assert_eq!(geometry.locate(unit).0, 0);
        let t = map.units[unit].unwrap().target;
        assert!(((t.l + t.r) - 1.0).abs() < 1e-12);
        assert_eq!(geometry.point(unit), (2.0, 2.0));
    }

    /// Brute-force scan: every location against every gt.
    fn scan_oracle(geometry: &PyramidGeometry, gts: &[GroundTruthBox], cfg: &MatcherConfig) -> Vec<Option<usize>> {
        let n = geometry.num_levels();
        let levels: Vec<Option<usize>> = gts
            .iter()
            .map(|g| {
                let home = designated_level(&g.bbox, &cfg.free_size_bounds, n);
                let mut order: Vec<usize> = (0..=home).rev().collect();
                order.extend(home + 1..n);
                order.into_iter().find(|&k| {
                    (0..geometry.num_locations()).any(|u| {
                        let (lk, _, _) = geometry.locate(u);
                        let (x, y) = geometry.point(u);
                        lk == k && g.bbox.contains(x, y)
                    })
                })
            })
            .collect();
        let nearest: Vec<Option<usize>> = gts
            .iter()
            .zip(&levels)
            .map(|(g, level)| {
                level.is_none().then(|| {
                    let (cx, cy) = g.bbox.center();
                    let p2 = geometry.levels[0].num_locations();
                    (0..p2)
                        .min_by(|&a, &b| {
                            let d = |u: usize| {
                                let (x, y) = geometry.point(u);
                                (x - cx).powi(2) + (y - cy).powi(2)
                            };
                            d(a).total_cmp(&d(b))
                        })
                        .unwrap()
                })
            })
            .collect();
        let mut out = vec![None; geometry.num_locations()];
        for u in 0..geometry.num_locations() {
            let (lk, _, _) = geometry.locate(u);
            let (x, y) = geometry.point(u);
            let mut best: Option<usize> = None;
            for (g, gt) in gts.iter().enumerate() {
                let claims = (levels[g] == Some(lk) && gt.bbox.contains(x, y)) || nearest[g] == Some(u);
                if claims && best.is_none_or(|b| gt.area() < gts[b].area()) {
                    best = Some(g);
                }
            }
            out[u] = best;
        }
        out
    }

    #[test]
    fn equals_scan_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geometry = PyramidGeometry::new(96, 80);
        let cfg = MatcherConfig::default();
        for _ in 0..40 {
            let gts: Vec<GroundTruthBox> = (0..rng.random_range(0..12))
                .map(|i| {
                    let w = rng.random_range(4.0..70.0);
                    let h = rng.random_range(4.0..70.0);
                    let x0 = rng.random_range(-5.0..80.0);
                    let y0 = rng.random_range(-5.0..96.0);
                    GroundTruthBox::new(x0, y0, x0 + w, y0 + h, 1 + i % 4)
                })
                .collect();
            let map = assign_anchor_free(&geometry, &gts, &cfg).unwrap();
            let expected = scan_oracle(&geometry, &gts, &cfg);
            for u in 0..map.len() {
                assert_eq!(map.units[u].map(|a| a.gt), expected[u], "location {u}");
            }
        }
    }
}
