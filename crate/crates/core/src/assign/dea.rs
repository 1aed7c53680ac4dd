use super::{AnchorSet, AssignError, Assignment, AssignmentMap, MatcherConfig, RegressionTarget, Source};
use crate::boxes::GroundTruthBox;

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`; zero for points on or
/// outside the border.
pub fn centerness(t: &RegressionTarget) -> f64 {
    if t.min() <= 0.0 {
        return 0.0;
    }
    ((t.l.min(t.r) / t.l.max(t.r)) * (t.t.min(t.b) / t.t.max(t.b))).sqrt()
}

/// What the rescue pass did, per ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnhanceReport {
    /// Rescued anchors per ground truth.
    pub rescued: Vec<usize>,
    /// Ground truths left without any positive anchor.
    pub uncovered: Vec<usize>,
}

/// Rescue merge. For every ground truth without a positive anchor in
/// `anchor_map`, take its anchor-free positive locations ranked by centerness
/// (lowest index on ties) and mark the base-shape anchor centred at each of
/// the top `rescue_k` positive for it. When a base anchor is already taken,
/// the other anchors at that location are tried in slot order.
pub fn dea_enhance(
    anchor_map: &AssignmentMap,
    free_map: &AssignmentMap,
    anchors: &AnchorSet,
    gts: &[GroundTruthBox],
    cfg: &MatcherConfig,
) -> Result<(AssignmentMap, EnhanceReport), AssignError> {
    cfg.validate()?;
    if anchor_map.num_gts != gts.len() || free_map.num_gts != gts.len() {
        return Err(AssignError::GtMismatch(anchor_map.num_gts, free_map.num_gts));
    }
    let mut out = anchor_map.clone();
    let mut report = EnhanceReport {
        rescued: vec![0; gts.len()],
        uncovered: Vec::new(),
    };
    let covered = anchor_map.positives_per_gt();
    let mut candidates: Vec<Vec<(f64, usize)>> = vec![Vec::new(); gts.len()];
    for (unit, a) in free_map.units.iter().enumerate() {
        if let Some(a) = a {
            if covered[a.gt] == 0 {
                candidates[a.gt].push((centerness(&a.target), unit));
            }
        }
    }
    for (g, gt) in gts.iter().enumerate() {
        if covered[g] > 0 {
            continue;
        }
        let list = &mut candidates[g];
        // stable sort keeps index order among equal scores
        list.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut taken = 0;
        for &(_, location) in list.iter() {
            if taken == cfg.rescue_k {
                break;
            }
            let slots = std::iter::once(anchors.base_slot).chain((0..anchors.per_location).filter(|&s| s != anchors.base_slot));
            for slot in slots {
                let idx = anchors.index_at(location, slot);
                if out.units[idx].is_none() {
                    let anchor = &anchors.anchors[idx];
                    out.units[idx] = Some(Assignment {
                        class: gt.class,
                        gt: g,
                        target: RegressionTarget::new(
                            anchor.cx - gt.bbox.x0,
                            anchor.cy - gt.bbox.y0,
                            gt.bbox.x1 - anchor.cx,
                            gt.bbox.y1 - anchor.cy,
                        ),
                        source: Source::DeaRescue,
                    });
                    taken += 1;
                    break;
                }
            }
        }
        report.rescued[g] = taken;
        if taken == 0 {
            report.uncovered.push(g);
        }
    }
    Ok((out, report))
}
