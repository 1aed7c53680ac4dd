use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Detector, Result};
use crate::autodiff::Array;
use crate::boxes::BBox;
use crate::losses::{decode_anchor_offsets, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// 1-based class id.
    pub class: u32,
    pub score: f64,
    /// Pyramid level that produced the box, 0 for P2.
    pub level: usize,
}

/// Orders by descending score, then ascending index.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy suppression: walk boxes by descending score (lowest index first on
/// ties) and keep a box unless it overlaps a kept one with IoU above
/// `iou_thresh`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in rank(scores) {
        if keep.iter().all(|&j| boxes[i].iou_unchecked(&boxes[j]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

impl Detector {
    /// Decoded, class-wise suppressed detections for one `(C, H, W)` image.
    pub fn infer(&self, image: &Array) -> Result<Vec<Detection>> {
        let (free_cls, free_reg, anchor_cls, anchor_reg) = self.forward_values(image)?;
        let cfg = &self.config;
        let k = cfg.num_classes;
        let frame = BBox::new(0.0, 0.0, cfg.input_size as f64, cfg.input_size as f64);
        let mut cands: Vec<Detection> = Vec::new();
        let mut push = |bbox: BBox, class: usize, logit: f64, level: usize| {
            let score = sigmoid(logit);
            if score <= cfg.score_thresh {
                return;
            }
            if let Some(bbox) = bbox.clip(&frame) {
                cands.push(Detection {
                    bbox,
                    class: class as u32 + 1,
                    score,
                    level,
                });
            }
        };
        let slots = self.anchors.per_location;
        let mut unit_base = 0;
        for (level, lv) in self.geometry.levels.iter().enumerate() {
            let hw = lv.num_locations();
            let offset = self.geometry.level_offset(level);
            for loc in 0..hw {
                if cfg.free_branch_inference {
                    let (px, py) = self.geometry.point(offset + loc);
                    let r = |j: usize| free_reg[level].data()[j * hw + loc];
                    let bbox = BBox::new(px - r(0), py - r(1), px + r(2), py + r(3));
                    for c in 0..k {
                        push(bbox, c, free_cls[level].data()[c * hw + loc], level);
                    }
                }
                for slot in 0..slots {
                    let anchor = self.anchors.anchors[unit_base + loc * slots + slot].bbox();
                    let d = [0, 1, 2, 3].map(|j| anchor_reg[level].data()[(slot * 4 + j) * hw + loc]);
                    let bbox = decode_anchor_offsets(&anchor, d);
                    for c in 0..k {
                        push(bbox, c, anchor_cls[level].data()[(slot * k + c) * hw + loc], level);
                    }
                }
            }
            unit_base += hw * slots;
        }
        let scores: Vec<f64> = cands.iter().map(|d| d.score).collect();
        let mut top: Vec<Detection> = rank(&scores).into_iter().take(cfg.pre_nms_top_n).map(|i| cands[i]).collect();
        let mut kept = Vec::new();
        for class in 1..=k as u32 {
            let group: Vec<Detection> = top.iter().filter(|d| d.class == class).copied().collect();
            let boxes: Vec<BBox> = group.iter().map(|d| d.bbox).collect();
            let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
            kept.extend(nms(&boxes, &scores, cfg.nms_iou).into_iter().map(|i| group[i]));
        }
        top.clear();
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        Ok(rank(&scores).into_iter().take(cfg.max_detections).map(|i| kept[i]).collect())
    }

    /// [`Detector::infer`] over many images on `pool`, in input order.
    pub fn infer_many(&self, images: &[Array], pool: &rayon::ThreadPool) -> Result<Vec<Vec<Detection>>> {
        pool.install(|| images.par_iter().map(|im| self.infer(im)).collect())
    }
}
