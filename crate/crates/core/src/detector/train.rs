use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Detector, Result};
use crate::assign::{assign_anchor_free, dea_enhance, match_anchors, AssignmentMap};
use crate::autodiff::{Array, Graph, Tensor};
use crate::boxes::GroundTruthBox;
use crate::losses::{branch_loss, BranchOutputs, LossBreakdown, LossConfig, RegressionKind};

/// One image, scaled to `[0, 1]`, with its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Array,
    pub gts: Vec<GroundTruthBox>,
}

/// A sample with both assignment maps fixed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Array,
    pub anchor_map: AssignmentMap,
    pub free_map: AssignmentMap,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub n_pos: f64,
    pub total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,cls_loss,reg_loss,n_pos,total";

    pub fn csv_row(&self) -> String {
        format!("{},{:.9},{:.9},{},{:.9}", self.step, self.cls_loss, self.reg_loss, self.n_pos, self.total)
    }
}

/// Computes the anchor-branch map (rescued when DEA is on) and the
/// anchor-free map for one sample.
pub fn prepare_sample(detector: &Detector, sample: &TrainSample) -> Result<PreparedSample> {
    let cfg = &detector.matcher;
    let anchor_map = match_anchors(&detector.anchors.anchors, &sample.gts, cfg)?;
    let free_map = assign_anchor_free(&detector.geometry, &sample.gts, cfg)?;
    let anchor_map = if detector.config.dea_enabled {
        dea_enhance(&anchor_map, &free_map, &detector.anchors, &sample.gts, cfg)?.0
    } else {
        anchor_map
    };
    Ok(PreparedSample {
        image: sample.image.clone(),
        anchor_map,
        free_map,
    })
}

fn sum_breakdowns(a: LossBreakdown, b: LossBreakdown, weight: f64) -> LossBreakdown {
    LossBreakdown {
        cls_term: a.cls_term + weight * b.cls_term,
        reg_term: a.reg_term + weight * b.reg_term,
        n_pos: a.n_pos + b.n_pos,
        total: a.total + weight * b.total,
    }
}

impl Detector {
    /// Twin-branch loss of one image: the anchor-free objective plus the
    /// weighted anchor-branch objective.
    pub fn image_loss<'g>(
        &self,
        outputs: (&BranchOutputs<'g>, &BranchOutputs<'g>),
        sample: &PreparedSample,
        cfg: &LossConfig,
    ) -> Result<(Tensor<'g>, LossBreakdown)> {
        let k = self.config.num_classes;
        let (free, anchor) = outputs;
        let (lf, bf) = branch_loss(free, &sample.free_map, k, RegressionKind::Distances, cfg)?;
        let (la, ba) = branch_loss(anchor, &sample.anchor_map, k, RegressionKind::AnchorOffsets(&self.anchors), cfg)?;
        let total = lf.add(&la.scale(cfg.anchor_branch_weight))?;
        Ok((total, sum_breakdowns(bf, ba, cfg.anchor_branch_weight)))
    }

    fn image_gradients(&self, sample: &PreparedSample, cfg: &LossConfig, scale: f64) -> Result<(Vec<Array>, LossBreakdown)> {
        let g = Graph::new();
        let p = self.params.bind(&g);
        let out = self.forward(&p, &g.constant(sample.image.clone()))?;
        let (loss, breakdown) = self.image_loss((&out.free, &out.anchor), sample, cfg)?;
        loss.scale(scale).backward()?;
        Ok((p.grads(), breakdown))
    }
}

/// SGD with momentum over `detector.config.steps` mini-batches. Per-image
/// gradients are computed on `pool` and reduced in batch order, so results
/// do not depend on the thread count.
pub fn train(
    detector: &mut Detector,
    data: &[PreparedSample],
    cfg: &LossConfig,
    pool: &rayon::ThreadPool,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(super::DetectorError::Input("empty training set".into()));
    }
    let dc = detector.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(dc.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity: Vec<Array> = detector.params.values().iter().map(|v| Array::zeros(v.shape())).collect();
    let mut logs = Vec::with_capacity(dc.steps);
    let batch = dc.batch_size.min(data.len());
    for _ in 0..dc.steps {
        let mut picks = Vec::with_capacity(batch);
        while picks.len() < batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            picks.push(order.pop().expect("refilled"));
        }
        let scale = 1.0 / batch as f64;
        let det: &Detector = detector;
        let results: Vec<Result<(Vec<Array>, LossBreakdown)>> =
            pool.install(|| picks.par_iter().map(|&i| det.image_gradients(&data[i], cfg, scale)).collect());
        let mut grads: Vec<Array> = velocity.iter().map(|v| Array::zeros(v.shape())).collect();
        let mut log = StepLog {
            step: detector.step + 1,
            cls_loss: 0.0,
            reg_loss: 0.0,
            n_pos: 0.0,
            total: 0.0,
        };
        for r in results {
            let (g, b) = r?;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, v)| *a += v);
            }
            log.cls_loss += b.cls_term * scale;
            log.reg_loss += b.reg_term * scale;
            log.n_pos += b.n_pos as f64 * scale;
            log.total += b.total * scale;
        }
        if dc.weight_decay > 0.0 {
            for (g, p) in grads.iter_mut().zip(detector.params.values()) {
                g.data_mut().iter_mut().zip(p.data()).for_each(|(gv, pv)| *gv += dc.weight_decay * pv);
            }
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let clip = if dc.clip_norm > 0.0 && norm > dc.clip_norm { dc.clip_norm / norm } else { 1.0 };
        for ((v, g), p) in velocity.iter_mut().zip(&grads).zip(detector.params.values_mut()) {
            for ((vv, gv), pv) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vv = dc.momentum * *vv + clip * gv;
                *pv -= dc.learning_rate * *vv;
            }
        }
        detector.step += 1;
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}
