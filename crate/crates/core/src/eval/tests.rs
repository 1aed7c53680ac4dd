use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn det(x0: f64, y0: f64, x1: f64, y1: f64, class: u32, score: f64, level: usize) -> Detection {
    Detection {
        bbox: BBox::new(x0, y0, x1, y1),
        class,
        score,
        level,
    }
}

#[test]
fn single_overlap_is_true_positive() {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
    let d = BBox::new(0.0, 0.0, 10.0, 8.0);
    assert!((d.iou_unchecked(&gt) - 0.8).abs() < 1e-12);
    assert_eq!(match_detections(&[d], &[0.9], &[gt], 0.5), vec![MatchResult { tp: true, gt: Some(0) }]);
}

#[test]
fn duplicate_is_false_positive() {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
    let m = match_detections(&[gt, gt], &[0.7, 0.9], &[gt], 0.5);
    assert!(m[1].tp);
    assert!(!m[0].tp);
    // ties go to the lower index
    let m = match_detections(&[gt, gt], &[0.9, 0.9], &[gt], 0.5);
    assert!(m[0].tp && !m[1].tp);
}

/// Direct characterisation: a detection is a true positive iff its best
/// ground truth clears the threshold and no better-ranked detection has the
/// same best ground truth above the threshold.
fn match_oracle(boxes: &[BBox], scores: &[f64], gts: &[BBox], thr: f64) -> Vec<bool> {
    let best = |d: usize| -> Option<usize> {
        let mut b = None;
        let mut b_iou = f64::NEG_INFINITY;
        for (g, gt) in gts.iter().enumerate() {
            let iou = boxes[d].iou_unchecked(gt);
            if iou > b_iou {
                b_iou = iou;
                b = Some(g);
            }
        }
        b.filter(|_| b_iou >= thr)
    };
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    (0..boxes.len())
        .map(|i| match best(i) {
            None => false,
            Some(g) => !(0..boxes.len()).any(|j| j != i && ahead(j, i) && best(j) == Some(g)),
        })
        .collect()
}

fn random_box(rng: &mut impl Rng) -> BBox {
    BBox::from_center(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), rng.random_range(3.0..20.0), rng.random_range(3.0..20.0))
}

#[test]
fn matching_equals_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let gts: Vec<BBox> = (0..rng.random_range(0..6)).map(|_| random_box(&mut rng)).collect();
        let mut boxes: Vec<BBox> = (0..rng.random_range(0..10)).map(|_| random_box(&mut rng)).collect();
        // jittered copies so that true positives actually occur
        for g in &gts {
            if rng.random_bool(0.7) {
                boxes.push(g.translate(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
            }
        }
        let scores: Vec<f64> = boxes.iter().map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let thr = rng.random_range(0.2..0.8);
        let got: Vec<bool> = match_detections(&boxes, &scores, &gts, thr).iter().map(|m| m.tp).collect();
        assert_eq!(got, match_oracle(&boxes, &scores, &gts, thr));
    }
}

#[test]
fn ap_examples() {
    for style in [ApStyle::AllPoint, ApStyle::Voc07] {
        assert_eq!(average_precision(&[true], 1, style), 1.0);
        assert_eq!(average_precision(&[], 1, style), 0.0);
        assert_eq!(average_precision(&[], 0, style), 0.0);
    }
    assert!((average_precision(&[false, true], 1, ApStyle::AllPoint) - 0.5).abs() < 1e-12);
    // precision 1 at recall 0.5, then 2/3 at recall 1.0
    assert!((average_precision(&[true, false, true], 2, ApStyle::AllPoint) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    // voc07: recalls 0..0.5 at precision 1, 0.6..1.0 at 2/3
    let v = average_precision(&[true, false, true], 2, ApStyle::Voc07);
    assert!((v - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
}

#[test]
fn mean_ap_skips_empty_classes() {
    let c = |class, n_gt, ap| ClassAp { class, n_gt, n_det: 0, ap };
    assert_eq!(mean_ap(&[c(1, 2, 0.5), c(2, 0, 0.0), c(3, 1, 1.0)]), 0.75);
    assert_eq!(mean_ap(&[]), 0.0);
}

proptest! {
    #[test]
    fn ap_bounded_and_monotone_in_false_positives(
        flags in proptest::collection::vec(any::<bool>(), 0..30),
        extra in 0usize..5,
        pick in any::<prop::sample::Index>(),
    ) {
        let n_gt = flags.iter().filter(|&&f| f).count() + extra;
        for style in [ApStyle::AllPoint, ApStyle::Voc07] {
            let ap = average_precision(&flags, n_gt, style);
            prop_assert!((0.0..=1.0).contains(&ap));
            let fps: Vec<usize> = (0..flags.len()).filter(|&i| !flags[i]).collect();
            if !fps.is_empty() {
                let drop = fps[pick.index(fps.len())];
                let mut fewer = flags.clone();
                fewer.remove(drop);
                prop_assert!(average_precision(&fewer, n_gt, style) >= ap - 1e-12);
            }
        }
    }

    #[test]
    fn perfect_ranking_ap_equals_recall(tp in 0usize..20, missed in 0usize..5, fps in 0usize..5) {
        prop_assume!(tp + missed > 0);
        let mut flags = vec![true; tp];
        flags.extend(vec![false; fps]);
        let ap = average_precision(&flags, tp + missed, ApStyle::AllPoint);
        prop_assert!((ap - tp as f64 / (tp + missed) as f64).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_ignores_class_order(aps in proptest::collection::vec((0usize..3, 0.0f64..1.0), 1..8), seed in any::<u64>()) {
        let classes: Vec<ClassAp> = aps.iter().enumerate().map(|(i, &(n, ap))| ClassAp { class: i as u32 + 1, n_gt: n, n_det: 0, ap }).collect();
        let mut shuffled = classes.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((mean_ap(&classes) - mean_ap(&shuffled)).abs() < 1e-12);
    }
}

#[test]
fn small_bucket_ignores_large_objects() {
    let gts = vec![vec![GroundTruthBox::new(0.0, 0.0, 8.0, 8.0, 1), GroundTruthBox::new(20.0, 20.0, 60.0, 60.0, 1)]];
    let dets = vec![vec![
        det(20.0, 20.0, 60.0, 60.0, 1, 0.9, 3),
        det(70.0, 70.0, 110.0, 110.0, 1, 0.8, 3),
        det(0.0, 0.0, 8.0, 8.0, 1, 0.7, 0),
    ]];
    let r = evaluate(&dets, &gts, 1, &EvalConfig::default()).unwrap();
    // overall: TP, FP, TP over 2 objects
    assert!((r.map - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    // small: the large TP and the large unmatched box are both ignored
    assert_eq!(r.small[0].n_gt, 1);
    assert_eq!(r.small[0].n_det, 1);
    assert_eq!(r.small_map, 1.0);
}

#[test]
fn evaluate_rejects_misaligned_and_bad_config() {
    assert!(matches!(evaluate(&[vec![]], &[], 1, &EvalConfig::default()), Err(EvalError::Misaligned(1, 0))));
    let cfg = EvalConfig {
        iou_threshold: 0.0,
        ..Default::default()
    };
    assert!(matches!(evaluate(&[], &[], 1, &cfg), Err(EvalError::Config(_))));
}

#[test]
fn gt_level_rule() {
    let m = MismatchConfig::default();
    assert_eq!(m.gt_level(32.0 * 32.0), 2);
    assert_eq!(m.gt_level(16.0 * 16.0), 1);
    assert_eq!(m.gt_level(15.9 * 15.9), 0);
    assert_eq!(m.gt_level(1.0), 0);
    assert_eq!(m.gt_level(64.0 * 64.0), 3);
    assert_eq!(m.gt_level(1e9), 4);
}

#[test]
fn mismatch_examples() {
    let cfg = EvalConfig::default();
    let gts = vec![vec![GroundTruthBox::new(0.0, 0.0, 40.0, 40.0, 1), GroundTruthBox::new(50.0, 50.0, 60.0, 60.0, 2)]];
    let exact = vec![vec![det(0.0, 0.0, 40.0, 40.0, 1, 0.9, 2), det(50.0, 50.0, 60.0, 60.0, 2, 0.9, 0)]];
    let r = mismatch_error_rate(&exact, &gts, 2, &cfg).unwrap();
    assert!(r.iter().all(|l| l.rate == 0.0));
    assert_eq!(r[2].instances, 1);
    assert_eq!(r[0].instances, 1);

    let wrong = vec![vec![det(0.0, 0.0, 40.0, 40.0, 1, 0.9, 0)]];
    let r = mismatch_error_rate(&wrong, &gts, 2, &cfg).unwrap();
    assert_eq!(r[2].rate, 1.0);
    assert_eq!(r[0].instances, 0);
}

/// Per-object recomputation straight from the definition.
fn mismatch_oracle(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], num_classes: u32, cfg: &EvalConfig) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 0); 5];
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        let _ = img;
        for class in 1..=num_classes {
            let idx: Vec<usize> = (0..d.len()).filter(|&j| d[j].class == class).collect();
            let gidx: Vec<usize> = (0..g.len()).filter(|&j| g[j].class == class).collect();
            let boxes: Vec<BBox> = idx.iter().map(|&j| d[j].bbox).collect();
            let scores: Vec<f64> = idx.iter().map(|&j| d[j].score).collect();
            let gboxes: Vec<BBox> = gidx.iter().map(|&j| g[j].bbox).collect();
            let tp = match_oracle(&boxes, &scores, &gboxes, cfg.iou_threshold);
            for (gi, gt) in gboxes.iter().enumerate() {
                // true positives belonging to this object, best score first
                let mut mine: Vec<usize> = (0..boxes.len())
                    .filter(|&k| {
                        tp[k]
                            && (0..gboxes.len())
                                .max_by(|&a, &b| boxes[k].iou_unchecked(&gboxes[a]).total_cmp(&boxes[k].iou_unchecked(&gboxes[b])).then(b.cmp(&a)))
                                == Some(gi)
                    })
                    .collect();
                mine.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                if let Some(&k) = mine.first() {
                    let want = cfg.mismatch.gt_level(gt.area());
                    out[want].0 += 1;
                    out[want].1 += (d[idx[k]].level != want) as usize;
                }
            }
        }
    }
    out
}

#[test]
fn mismatch_equals_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = EvalConfig::default();
    for _ in 0..100 {
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..3 {
            let g: Vec<GroundTruthBox> = (0..rng.random_range(0..5))
                .map(|_| {
                    let s = rng.random_range(4.0..90.0);
                    let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                    GroundTruthBox::new(x, y, x + s, y + s * rng.random_range(0.7..1.3), rng.random_range(1..=2))
                })
                .collect();
            let mut d: Vec<Detection> = Vec::new();
            for gt in &g {
                for _ in 0..rng.random_range(0..3) {
                    let b = gt.bbox.translate(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                    d.push(Detection {
                        bbox: b,
                        class: if rng.random_bool(0.9) { gt.class } else { 3 - gt.class },
                        score: rng.random_range(0..6) as f64 / 5.0,
                        level: rng.random_range(0..5),
                    });
                }
            }
            for _ in 0..rng.random_range(0..3) {
                d.push(Detection {
                    bbox: random_box(&mut rng),
                    class: rng.random_range(1..=2),
                    score: rng.random_range(0.0..1.0),
                    level: rng.random_range(0..5),
                });
            }
            gts.push(g);
            dets.push(d);
        }
        let got = mismatch_error_rate(&dets, &gts, 2, &cfg).unwrap();
        let want = mismatch_oracle(&dets, &gts, 2, &cfg);
        for (l, (n, e)) in got.iter().zip(want) {
            assert_eq!((l.instances, l.errors), (n, e));
        }
    }
}

#[test]
fn csv_layouts() {
    let rows = [ClassAp { class: 1, n_gt: 3, n_det: 5, ap: 0.5 }];
    assert_eq!(results_csv(&rows, 0.5), "class,n_gt,n_det,ap\n1,3,5,0.500000\nmAP,,,0.500000\n");
    let rates = [LevelRate { level: 0, instances: 2, errors: 1, rate: 0.5 }];
    assert_eq!(mismatch_csv(&rates), "level,instances,errors,rate\nP2,2,1,0.500000\n");
}
