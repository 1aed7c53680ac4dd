//! Average precision, mAP, area-range AP and the pyramid-level mismatch
//! diagnostic.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::detector::Detection;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("{0} detection lists for {1} images")]
    Misaligned(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApStyle {
    /// Exact area under the interpolated precision envelope.
    AllPoint,
    /// Mean interpolated precision at recall 0, 0.1, ..., 1.
    Voc07,
}

/// Ground-truth level rule `clamp(floor(k0 + log2(sqrt(area) / canonical)))`
/// over absolute levels 2..=6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MismatchConfig {
    pub k0: f64,
    pub canonical: f64,
}

impl Default for MismatchConfig {
    fn default() -> Self {
        Self {
            k0: 4.0,
            canonical: 32.0,
        }
    }
}

impl MismatchConfig {
    /// Level index, 0 for P2.
    pub fn gt_level(&self, area: f64) -> usize {
        let k = (self.k0 + (area.sqrt() / self.canonical).log2()).floor();
        (k.clamp(2.0, 6.0) - 2.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ap_style: ApStyle,
    /// Upper area bound of the small-object bucket.
    pub small_area: f64,
    pub mismatch: MismatchConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            ap_style: ApStyle::AllPoint,
            small_area: 128.0,
            mismatch: MismatchConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(EvalError::Config(format!("iou_threshold must lie in (0, 1], got {}", self.iou_threshold)));
        }
        if !(self.small_area > 0.0) || !(self.mismatch.canonical > 0.0) {
            return Err(EvalError::Config("small_area and canonical must be positive".into()));
        }
        Ok(())
    }
}

/// Indices ordered by descending score, lowest index first on ties.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Outcome of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: bool,
    /// Ground truth with the highest IoU when that IoU reaches the threshold.
    pub gt: Option<usize>,
}

/// Greedy matching in score order. Each detection looks at the ground truth
/// it overlaps most (lowest index on ties); it is a true positive if that IoU
/// reaches `iou_threshold` and the ground truth is still free. Results are
/// aligned with `boxes`.
pub fn match_detections(boxes: &[BBox], scores: &[f64], gts: &[BBox], iou_threshold: f64) -> Vec<MatchResult> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![MatchResult { tp: false, gt: None }; boxes.len()];
    for d in rank_by_score(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let iou = boxes[d].iou_unchecked(gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= iou_threshold {
                out[d] = MatchResult { tp: !taken[g], gt: Some(g) };
                taken[g] = true;
            }
        }
    }
    out
}

/// `(recall, precision)` after each ranked detection.
pub fn precision_recall(flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// AP of ranked TP/FP flags against `n_gt` objects; 0 when there are none.
pub fn average_precision(flags: &[bool], n_gt: usize, style: ApStyle) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let pr = precision_recall(flags, n_gt);
    match style {
        ApStyle::AllPoint => {
            let mut envelope: Vec<f64> = pr.iter().map(|p| p.1).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (i, &(r, _)) in pr.iter().enumerate() {
                if r > prev_recall {
                    ap += (r - prev_recall) * envelope[i];
                    prev_recall = r;
                }
            }
            ap
        }
        ApStyle::Voc07 => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    pr.iter().filter(|p| p.0 >= t).map(|p| p.1).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Unweighted mean over classes that have at least one ground truth.
pub fn mean_ap(per_class: &[ClassAp]) -> f64 {
    let with_gt: Vec<f64> = per_class.iter().filter(|c| c.n_gt > 0).map(|c| c.ap).collect();
    if with_gt.is_empty() {
        0.0
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: u32,
    pub n_gt: usize,
    pub n_det: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    /// AP restricted to objects below `small_area`.
    pub small: Vec<ClassAp>,
    pub small_map: f64,
    /// Ranked `(recall, precision)` per class.
    pub curves: Vec<Vec<(f64, f64)>>,
}

/// Per-class ranked outcome over a whole dataset.
struct ClassRanking {
    /// `(image, detection index)` in rank order.
    order: Vec<(usize, usize)>,
    results: Vec<MatchResult>,
}

fn rank_class(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], class: u32, thr: f64) -> ClassRanking {
    let mut per_image: Vec<Vec<MatchResult>> = Vec::with_capacity(dets.len());
    let mut pool: Vec<(usize, usize, f64)> = Vec::new();
    for (i, (d, g)) in dets.iter().zip(gts).enumerate() {
        let idx: Vec<usize> = (0..d.len()).filter(|&j| d[j].class == class).collect();
        let boxes: Vec<BBox> = idx.iter().map(|&j| d[j].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&j| d[j].score).collect();
        let gboxes: Vec<BBox> = g.iter().filter(|x| x.class == class).map(|x| x.bbox).collect();
        let m = match_detections(&boxes, &scores, &gboxes, thr);
        let mut full = vec![MatchResult { tp: false, gt: None }; d.len()];
        for (k, &j) in idx.iter().enumerate() {
            full[j] = m[k];
            pool.push((i, j, d[j].score));
        }
        per_image.push(full);
    }
    // global order: score, then image, then index within the image
    pool.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    ClassRanking {
        results: pool.iter().map(|&(i, j, _)| per_image[i][j]).collect(),
        order: pool.iter().map(|&(i, j, _)| (i, j)).collect(),
    }
}

/// Evaluates detections against ground truth over a dataset.
///
/// The small bucket counts only objects with area below `small_area`.
/// Detections attributed to larger objects are ignored there, as are
/// unmatched detections whose own box is not small.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if dets.len() != gts.len() {
        return Err(EvalError::Misaligned(dets.len(), gts.len()));
    }
    let mut per_class = Vec::new();
    let mut small = Vec::new();
    let mut curves = Vec::new();
    for class in 1..=num_classes as u32 {
        let ranking = rank_class(dets, gts, class, cfg.iou_threshold);
        let class_gts: Vec<Vec<&GroundTruthBox>> = gts.iter().map(|g| g.iter().filter(|x| x.class == class).collect()).collect();
        let n_gt: usize = class_gts.iter().map(Vec::len).sum();
        let flags: Vec<bool> = ranking.results.iter().map(|m| m.tp).collect();
        per_class.push(ClassAp {
            class,
            n_gt,
            n_det: flags.len(),
            ap: average_precision(&flags, n_gt, cfg.ap_style),
        });
        curves.push(precision_recall(&flags, n_gt));

        let is_small = |a: f64| a < cfg.small_area;
        let n_small = class_gts.iter().flatten().filter(|g| is_small(g.area())).count();
        let mut small_flags = Vec::new();
        for (&(i, j), m) in ranking.order.iter().zip(&ranking.results) {
            let counted = match m.gt {
                Some(g) => is_small(class_gts[i][g].area()),
                None => is_small(dets[i][j].bbox.area()),
            };
            if counted {
                small_flags.push(m.tp);
            }
        }
        small.push(ClassAp {
            class,
            n_gt: n_small,
            n_det: small_flags.len(),
            ap: average_precision(&small_flags, n_small, cfg.ap_style),
        });
    }
    Ok(EvalReport {
        map: mean_ap(&per_class),
        small_map: mean_ap(&small),
        per_class,
        small,
        curves,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRate {
    pub level: usize,
    pub instances: usize,
    pub errors: usize,
    pub rate: f64,
}

/// For every detected object, the level of its highest-scoring true
/// positive is compared with the object's rule level. Rates are per rule
/// level (P2..P6); a level with no detected objects has rate 0.
pub fn mismatch_error_rate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<Vec<LevelRate>, EvalError> {
    cfg.validate()?;
    if dets.len() != gts.len() {
        return Err(EvalError::Misaligned(dets.len(), gts.len()));
    }
    let mut rates: Vec<LevelRate> = (0..5)
        .map(|level| LevelRate {
            level,
            instances: 0,
            errors: 0,
            rate: 0.0,
        })
        .collect();
    for class in 1..=num_classes as u32 {
        let ranking = rank_class(dets, gts, class, cfg.iou_threshold);
        let class_gts: Vec<Vec<&GroundTruthBox>> = gts.iter().map(|g| g.iter().filter(|x| x.class == class).collect()).collect();
        // first true positive in rank order is the highest-scoring one
        let mut selected: Vec<Vec<Option<usize>>> = class_gts.iter().map(|g| vec![None; g.len()]).collect();
        for (&(i, j), m) in ranking.order.iter().zip(&ranking.results) {
            if let (true, Some(g)) = (m.tp, m.gt) {
                selected[i][g].get_or_insert(dets[i][j].level);
            }
        }
        for (i, img) in class_gts.iter().enumerate() {
            for (g, gt) in img.iter().enumerate() {
                if let Some(level) = selected[i][g] {
                    let want = cfg.mismatch.gt_level(gt.area());
                    rates[want].instances += 1;
                    rates[want].errors += (level != want) as usize;
                }
            }
        }
    }
    for r in &mut rates {
        r.rate = if r.instances == 0 { 0.0 } else { r.errors as f64 / r.instances as f64 };
    }
    Ok(rates)
}

/// `class,n_gt,n_det,ap` rows plus a closing `mAP` row.
pub fn results_csv(per_class: &[ClassAp], map: f64) -> String {
    let mut out = String::from("class,n_gt,n_det,ap\n");
    for c in per_class {
        let _ = writeln!(out, "{},{},{},{:.6}", c.class, c.n_gt, c.n_det, c.ap);
    }
    let _ = writeln!(out, "mAP,,,{map:.6}");
    out
}

pub fn mismatch_csv(rates: &[LevelRate]) -> String {
    let mut out = String::from("level,instances,errors,rate\n");
    for r in rates {
        let _ = writeln!(out, "P{},{},{},{:.6}", r.level + 2, r.instances, r.errors, r.rate);
    }
    out
}

#[cfg(test)]
mod tests;
