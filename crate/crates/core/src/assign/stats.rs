use std::fmt::Write as _;

use super::{AssignmentMap, Source};
use crate::boxes::GroundTruthBox;

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub gt_id: usize,
    pub area: f64,
    pub n_pos_anchor: usize,
    pub n_pos_free: usize,
    pub n_rescued: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSummary {
    pub rows: Vec<CoverageRow>,
    /// Share of ground truths with no IoU-matched anchor.
    pub uncovered_before: f64,
    /// Share with no positive anchor after the rescue pass.
    pub uncovered_after: f64,
    /// `(upper edge, n_gt, n_uncovered_before, n_uncovered_after)` per area
    /// bucket; the last bucket is unbounded.
    pub buckets: Vec<(f64, usize, usize, usize)>,
}

pub const AREA_BUCKETS: [f64; 6] = [32.0, 64.0, 128.0, 256.0, 512.0, 1024.0];

/// Per-gt positive counts. `enhanced` is the anchor map after rescue (pass
/// `anchor_map` again when rescue is disabled).
pub fn coverage_stats(
    anchor_map: &AssignmentMap,
    free_map: &AssignmentMap,
    enhanced: &AssignmentMap,
    gts: &[GroundTruthBox],
) -> CoverageSummary {
    let anchor = anchor_map.positives_per_gt();
    let free = free_map.positives_per_gt();
    let mut rescued = vec![0; gts.len()];
    for a in enhanced.units.iter().flatten() {
        if a.source == Source::DeaRescue {
            rescued[a.gt] += 1;
        }
    }
    let rows: Vec<CoverageRow> = gts
        .iter()
        .enumerate()
        .map(|(g, gt)| CoverageRow {
            gt_id: g,
            area: gt.area(),
            n_pos_anchor: anchor[g],
            n_pos_free: free[g],
            n_rescued: rescued[g],
        })
        .collect();
    summarize(rows)
}

/// Aggregates rows, possibly pooled over many images.
pub(crate) fn summarize(rows: Vec<CoverageRow>) -> CoverageSummary {
    let n = rows.len().max(1) as f64;
    let before = rows.iter().filter(|r| r.n_pos_anchor == 0).count();
    let after = rows.iter().filter(|r| r.n_pos_anchor + r.n_rescued == 0).count();
    let mut buckets: Vec<(f64, usize, usize, usize)> = AREA_BUCKETS
        .iter()
        .copied()
        .chain(std::iter::once(f64::INFINITY))
        .map(|edge| (edge, 0, 0, 0))
        .collect();
    for r in &rows {
        let b = buckets.iter().position(|b| r.area < b.0).unwrap_or(buckets.len() - 1);
        buckets[b].1 += 1;
        if r.n_pos_anchor == 0 {
            buckets[b].2 += 1;
        }
        if r.n_pos_anchor + r.n_rescued == 0 {
            buckets[b].3 += 1;
        }
    }
    CoverageSummary {
        uncovered_before: before as f64 / n,
        uncovered_after: after as f64 / n,
        rows,
        buckets,
    }
}

impl CoverageSummary {
    pub fn merge(summaries: impl IntoIterator<Item = CoverageSummary>) -> CoverageSummary {
        let mut rows = Vec::new();
        for s in summaries {
            let base = rows.len();
            rows.extend(s.rows.into_iter().map(|mut r| {
                r.gt_id += base;
                r
            }));
        }
        summarize(rows)
    }

    /// `gt_id,area,n_pos_anchor,n_pos_free,n_rescued`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gt_id,area,n_pos_anchor,n_pos_free,n_rescued\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.gt_id, r.area, r.n_pos_anchor, r.n_pos_free, r.n_rescued);
        }
        out
    }

    /// `lo-hi` for the half-open area range of a bucket, `lo+` for the last.
    pub fn bucket_label(edge_index: usize) -> String {
        let lo = if edge_index == 0 { 0.0 } else { AREA_BUCKETS[edge_index - 1] };
        match AREA_BUCKETS.get(edge_index) {
            Some(hi) => format!("{lo}-{hi}"),
            None => format!("{lo}+"),
        }
    }
}
