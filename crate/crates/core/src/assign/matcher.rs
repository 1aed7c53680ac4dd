use super::{AssignError, Assignment, AssignmentMap, MatcherConfig, RegressionTarget, Source};
use super::geometry::Anchor;
use crate::boxes::GroundTruthBox;

/// IoU matching: an anchor is positive iff the IoU with its best ground truth
/// (lowest index on ties) strictly exceeds `pos_iou_threshold`.
pub fn match_anchors(
    anchors: &[Anchor],
    gts: &[GroundTruthBox],
    cfg: &MatcherConfig,
) -> Result<AssignmentMap, AssignError> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(AssignError::NoAnchors);
    }
    let mut map = AssignmentMap::empty(anchors.len(), gts.len());
    if gts.is_empty() {
        return Ok(map);
    }
    for (unit, anchor) in anchors.iter().enumerate() {
        let ab = anchor.bbox();
        let mut best = (0.0, usize::MAX);
        for (g, gt) in gts.iter().enumerate() {
            // cheap reject before the division
            if gt.bbox.x0 >= ab.x1 || gt.bbox.x1 <= ab.x0 || gt.bbox.y0 >= ab.y1 || gt.bbox.y1 <= ab.y0 {
                continue;
            }
            let iou = ab.iou_unchecked(&gt.bbox);
            if iou > best.0 {
                best = (iou, g);
            }
        }
        if best.1 != usize::MAX && best.0 > cfg.pos_iou_threshold {
            let gt = &gts[best.1];
            map.units[unit] = Some(Assignment {
                class: gt.class,
                gt: best.1,
                target: RegressionTarget::new(
                    anchor.cx - gt.bbox.x0,
                    anchor.cy - gt.bbox.y0,
                    gt.bbox.x1 - anchor.cx,
                    gt.bbox.y1 - anchor.cy,
                ),
                source: Source::AnchorIou,
            });
        }
    }
    Ok(map)
}
