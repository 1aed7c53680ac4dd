//! Focal classification loss, IoU regression loss, and their N_pos-normalised
//! combination over a dense head.

use serde::{Deserialize, Serialize};

use crate::assign::{AnchorSet, AssignmentMap, RegressionTarget};
use crate::autodiff::{AutodiffError, CustomOp, Tensor};
use crate::boxes::BBox;

/// Floor applied to IoU before the log.
pub const IOU_FLOOR: f64 = 1e-6;
/// Lower clamp on predicted distances.
pub const DIST_EPS: f64 = 1e-9;
const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("degenerate regression target {0:?}")]
    Target(RegressionTarget),
    #[error("head outputs and assignment disagree: {0}")]
    Misaligned(String),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the regression term.
    pub lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the anchor branch relative to the anchor-free branch.
    pub anchor_branch_weight: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            anchor_branch_weight: 1.0,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda > 0.0) {
            return Err(LossError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(LossError::Config(format!("gamma must be >= 0, got {}", self.focal_gamma)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(LossError::Config(format!("alpha must lie in (0, 1), got {}", self.focal_alpha)));
        }
        if !(self.anchor_branch_weight >= 0.0) || !(self.smooth_l1_beta > 0.0) {
            return Err(LossError::Config("anchor weight must be >= 0 and beta > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_term: f64,
    pub reg_term: f64,
    pub n_pos: usize,
    pub total: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `-alpha_t (1 - p_t)^gamma ln(p_t)` on a probability.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(LossError::Probability(p));
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, at) = if positive { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    Ok(-at * (1.0 - pt).powf(gamma) * pt.ln())
}

/// Focal loss and its derivative with respect to the logit.
pub fn focal_from_logit(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if positive {
        let sp = softplus(-z);
        let qg = q.powf(gamma);
        (alpha * qg * sp, -alpha * qg * (gamma * p * sp + q))
    } else {
        let sp = softplus(z);
        let pg = p.powf(gamma);
        ((1.0 - alpha) * pg * sp, (1.0 - alpha) * pg * (gamma * q * sp + p))
    }
}

/// IoU of two boxes sharing an anchor point, given as `(l, t, r, b)`
/// distances, with the gradient of `-ln(IoU)` with respect to `pred`.
fn iou_loss_ltrb(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let p = pred.map(|v| v.max(DIST_EPS));
    let clamped = [0, 1, 2, 3].map(|i| pred[i] < DIST_EPS);
    let t = target;
    let area_p = (p[0] + p[2]) * (p[1] + p[3]);
    let area_t = (t[0] + t[2]) * (t[1] + t[3]);
    let iw = p[0].min(t[0]) + p[2].min(t[2]);
    let ih = p[1].min(t[1]) + p[3].min(t[3]);
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };
    let union = area_p + area_t - inter;
    let iou = inter / union;
    if iou < IOU_FLOOR {
        return (-IOU_FLOOR.ln(), [0.0; 4]);
    }
    // L = ln U - ln I
    let d_inter = -1.0 / inter - 1.0 / union;
    let d_area = 1.0 / union;
    let mut g = [0.0; 4];
    // horizontal components: l (0), r (2)
    for i in [0, 2] {
        g[i] = d_area * (p[1] + p[3]) + if p[i] < t[i] { d_inter * ih } else { 0.0 };
    }
    for i in [1, 3] {
        g[i] = d_area * (p[0] + p[2]) + if p[i] < t[i] { d_inter * iw } else { 0.0 };
    }
    for i in 0..4 {
        if clamped[i] {
            g[i] = 0.0;
        }
    }
    (-iou.ln(), g)
}

fn check_target(t: &RegressionTarget) -> Result<(), LossError> {
    let ok = t.to_array().iter().all(|v| v.is_finite()) && t.l + t.r > 0.0 && t.t + t.b > 0.0;
    if ok {
        Ok(())
    } else {
        Err(LossError::Target(*t))
    }
}

/// UnitBox loss `-ln(IoU)` between boxes that share their anchor point.
pub fn iou_loss(pred: &RegressionTarget, target: &RegressionTarget) -> Result<f64, LossError> {
    check_target(target)?;
    Ok(iou_loss_ltrb(pred.to_array(), target.to_array()).0)
}

fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    let a = d.abs();
    if a < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (a - 0.5 * beta, d.signum())
    }
}

/// Anchor-branch regression encoding of a box relative to an anchor:
/// `(dx/w, dy/h, ln(gw/w), ln(gh/h))`.
pub fn encode_anchor_offsets(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

/// Largest log-scale applied when decoding, as in common detectors.
pub const MAX_LOG_SCALE: f64 = 4.135166556742356; // ln(1000 / 16)

pub fn decode_anchor_offsets(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let cx = ax + d[0] * anchor.width();
    let cy = ay + d[1] * anchor.height();
    let w = anchor.width() * d[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.height() * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

struct FocalSum {
    dlogits: Vec<f64>,
}

impl CustomOp for FocalSum {
    fn name(&self) -> &'static str {
        "focal_sum"
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.dlogits.iter().map(|d| d * grad_out[0]).collect())]
    }
}

/// Sum of sigmoid focal losses over every logit; `targets` holds 0/1 per logit.
pub fn focal_loss_sum<'g>(logits: &Tensor<'g>, targets: &[bool], alpha: f64, gamma: f64) -> Result<Tensor<'g>, LossError> {
    let (total, dlogits) = {
        let z = logits.data();
        if z.len() != targets.len() {
            return Err(LossError::Misaligned(format!("{} logits vs {} targets", z.len(), targets.len())));
        }
        let mut total = 0.0;
        let mut dlogits = Vec::with_capacity(z.len());
        for (&zi, &t) in z.iter().zip(targets) {
            let (l, d) = focal_from_logit(zi, t, alpha, gamma);
            total += l;
            dlogits.push(d);
        }
        (total, dlogits)
    };
    Ok(logits.graph().custom(&[*logits], vec![], vec![total], Box::new(FocalSum { dlogits }))?)
}

struct PairwiseSum {
    name: &'static str,
    len: usize,
    index: Vec<[usize; 4]>,
    grads: Vec<[f64; 4]>,
}

impl CustomOp for PairwiseSum {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.len];
        for (idx, gr) in self.index.iter().zip(&self.grads) {
            for j in 0..4 {
                g[idx[j]] += gr[j] * grad_out[0];
            }
        }
        vec![Some(g)]
    }
}

fn gather4(values: &[f64], idx: &[usize; 4]) -> Result<[f64; 4], LossError> {
    let mut out = [0.0; 4];
    for j in 0..4 {
        out[j] = *values
            .get(idx[j])
            .ok_or_else(|| LossError::Misaligned(format!("index {} beyond {} predictions", idx[j], values.len())))?;
    }
    Ok(out)
}

/// Sum of `-ln(IoU)` over the positions `index`, where `pred` holds positive
/// `(l, t, r, b)` distances.
pub fn iou_loss_sum<'g>(pred: &Tensor<'g>, index: Vec<[usize; 4]>, targets: &[RegressionTarget]) -> Result<Tensor<'g>, LossError> {
    let (total, grads) = {
        let p = pred.data();
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(index.len());
        for (idx, t) in index.iter().zip(targets) {
            check_target(t)?;
            let (l, g) = iou_loss_ltrb(gather4(&p, idx)?, t.to_array());
            total += l;
            grads.push(g);
        }
        (total, grads)
    };
    let op = PairwiseSum {
        name: "iou_loss_sum",
        len: pred.numel(),
        index,
        grads,
    };
    Ok(pred.graph().custom(&[*pred], vec![], vec![total], Box::new(op))?)
}

/// Sum of smooth-L1 distances between `pred` at `index` and `targets`.
pub fn smooth_l1_sum<'g>(pred: &Tensor<'g>, index: Vec<[usize; 4]>, targets: &[[f64; 4]], beta: f64) -> Result<Tensor<'g>, LossError> {
    let (total, grads) = {
        let p = pred.data();
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(index.len());
        for (idx, t) in index.iter().zip(targets) {
            let pv = gather4(&p, idx)?;
            let mut g = [0.0; 4];
            for j in 0..4 {
                let (l, d) = smooth_l1(pv[j] - t[j], beta);
                total += l;
                g[j] = d;
            }
            grads.push(g);
        }
        (total, grads)
    };
    let op = PairwiseSum {
        name: "smooth_l1_sum",
        len: pred.numel(),
        index,
        grads,
    };
    Ok(pred.graph().custom(&[*pred], vec![], vec![total], Box::new(op))?)
}

/// Dense head outputs of one branch, one entry per pyramid level.
///
/// `cls[k]` is `(slots * K, H, W)` logits and `reg[k]` is `(slots * 4, H, W)`,
/// where `slots` is 1 for the anchor-free branch and the anchors per location
/// for the anchor branch. Channel `slot * K + c` scores class `c + 1`.
#[derive(Debug, Clone)]
pub struct BranchOutputs<'g> {
    pub cls: Vec<Tensor<'g>>,
    pub reg: Vec<Tensor<'g>>,
}

/// How a branch's regression channels are interpreted.
#[derive(Debug, Clone, Copy)]
pub enum RegressionKind<'a> {
    /// Positive `(l, t, r, b)` distances scored with the IoU loss.
    Distances,
    /// Offsets relative to anchors scored with smooth L1.
    AnchorOffsets(&'a AnchorSet),
}

/// Loss for one branch: focal over every unit plus the regression
/// loss over positives, both divided by `max(N_pos, 1)`.
pub fn branch_loss<'g>(
    outputs: &BranchOutputs<'g>,
    map: &AssignmentMap,
    num_classes: usize,
    kind: RegressionKind<'_>,
    cfg: &LossConfig,
) -> Result<(Tensor<'g>, LossBreakdown), LossError> {
    cfg.validate()?;
    if outputs.cls.len() != outputs.reg.len() || outputs.cls.is_empty() {
        return Err(LossError::Misaligned("cls/reg level counts differ".into()));
    }
    let mut unit_base = 0;
    let mut cls_sum: Option<Tensor<'g>> = None;
    let mut reg_sum: Option<Tensor<'g>> = None;
    for (cls, reg) in outputs.cls.iter().zip(&outputs.reg) {
        let cshape = cls.shape();
        let rshape = reg.shape();
        if cshape.len() != 3 || rshape.len() != 3 || cshape[1..] != rshape[1..] || cshape[0] % num_classes != 0 {
            return Err(LossError::Misaligned(format!("cls {cshape:?} vs reg {rshape:?}")));
        }
        let slots = cshape[0] / num_classes;
        if rshape[0] != 4 * slots {
            return Err(LossError::Misaligned(format!("reg has {} channels for {slots} slots", rshape[0])));
        }
        let hw = cshape[1] * cshape[2];
        let units = hw * slots;
        if unit_base + units > map.len() {
            return Err(LossError::Misaligned(format!("{} units in map, outputs need more", map.len())));
        }
        let mut targets = vec![false; cls.numel()];
        let mut index = Vec::new();
        let mut dist_targets = Vec::new();
        let mut offset_targets = Vec::new();
        for loc in 0..hw {
            for slot in 0..slots {
                let unit = unit_base + loc * slots + slot;
                let Some(a) = map.units[unit] else { continue };
                let c = a.class as usize;
                if c == 0 || c > num_classes {
                    return Err(LossError::Misaligned(format!("class {c} outside 1..={num_classes}")));
                }
                targets[(slot * num_classes + c - 1) * hw + loc] = true;
                index.push([0, 1, 2, 3].map(|j| (slot * 4 + j) * hw + loc));
                match kind {
                    RegressionKind::Distances => dist_targets.push(a.target),
                    RegressionKind::AnchorOffsets(set) => {
                        let anchor = set.anchors[unit];
                        let gt = crate::assign::decode_targets(anchor.cx, anchor.cy, &a.target);
                        offset_targets.push(encode_anchor_offsets(&anchor.bbox(), &gt));
                    }
                }
            }
        }
        let c = focal_loss_sum(cls, &targets, cfg.focal_alpha, cfg.focal_gamma)?;
        cls_sum = Some(match cls_sum {
            Some(s) => s.add(&c)?,
            None => c,
        });
        let r = match kind {
            RegressionKind::Distances => iou_loss_sum(reg, index, &dist_targets)?,
            RegressionKind::AnchorOffsets(_) => smooth_l1_sum(reg, index, &offset_targets, cfg.smooth_l1_beta)?,
        };
        reg_sum = Some(match reg_sum {
            Some(s) => s.add(&r)?,
            None => r,
        });
        unit_base += units;
    }
    if unit_base != map.len() {
        return Err(LossError::Misaligned(format!("outputs cover {unit_base} units, map has {}", map.len())));
    }
    let n_pos = map.num_pos();
    let norm = 1.0 / n_pos.max(1) as f64;
    let cls_term = cls_sum.expect("at least one level").scale(norm);
    let reg_term = reg_sum.expect("at least one level").scale(norm);
    let total = cls_term.add(&reg_term.scale(cfg.lambda))?;
    let breakdown = LossBreakdown {
        cls_term: cls_term.item(),
        reg_term: reg_term.item(),
        n_pos,
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// The anchor-free objective: focal classification over all locations plus
/// `lambda` times the IoU loss over positive locations, normalised by N_pos.
pub fn multitask_loss<'g>(
    outputs: &BranchOutputs<'g>,
    map: &AssignmentMap,
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<(Tensor<'g>, LossBreakdown), LossError> {
    branch_loss(outputs, map, num_classes, RegressionKind::Distances, cfg)
}
