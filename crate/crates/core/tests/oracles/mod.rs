//! Brute-force reference implementations. Each one is written from the
//! definition with plain loops and shares no code with the library beyond
//! the plain data types.

#![allow(dead_code)]

use pyramidforge::assign::Anchor;
use pyramidforge::boxes::{BBox, GroundTruthBox};

pub fn area(b: &BBox) -> f64 {
    (b.x1 - b.x0) * (b.y1 - b.y0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `(gt, l, t, r, b)` of a positive unit.
pub type Label = Option<(usize, [f64; 4])>;

fn ltrb(x: f64, y: f64, b: &BBox) -> [f64; 4] {
    [x - b.x0, y - b.y0, b.x1 - x, b.y1 - y]
}

/// Every anchor against every gt; best IoU wins, earlier gt on ties.
pub fn match_anchors(anchors: &[Anchor], gts: &[GroundTruthBox], threshold: f64) -> Vec<Label> {
    anchors
        .iter()
        .map(|a| {
            let ab = BBox::new(a.cx - a.width / 2.0, a.cy - a.height / 2.0, a.cx + a.width / 2.0, a.cy + a.height / 2.0);
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(&ab, &gt.bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v > threshold => Some((g, ltrb(a.cx, a.cy, &gts[g].bbox))),
                _ => None,
            }
        })
        .collect()
}

/// Locations of a pyramid as `(level, px, py)` in flat index order.
pub fn locations(image: usize, strides: &[usize]) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for (k, &s) in strides.iter().enumerate() {
        let n = image.div_ceil(s);
        for y in 0..n {
            for x in 0..n {
                out.push((k, (s / 2 + x * s) as f64, (s / 2 + y * s) as f64));
            }
        }
    }
    out
}

/// Point assignment by scanning every location for every gt.
pub fn assign_anchor_free(image: usize, strides: &[usize], gts: &[GroundTruthBox], bounds: &[f64]) -> Vec<Label> {
    let locs = locations(image, strides);
    let levels = strides.len();
    let mut claims: Vec<Vec<usize>> = vec![Vec::new(); locs.len()];
    for (g, gt) in gts.iter().enumerate() {
        let b = &gt.bbox;
        let scale = (b.x1 - b.x0).max(b.y1 - b.y0) / 2.0;
        let mut home = levels - 1;
        for (k, &bound) in bounds.iter().enumerate() {
            if scale <= bound {
                home = k.min(levels - 1);
                break;
            }
        }
        let mut order: Vec<usize> = (0..=home).rev().collect();
        order.extend(home + 1..levels);
        let mut claimed = Vec::new();
        for level in order {
            for (i, &(k, px, py)) in locs.iter().enumerate() {
                if k == level && px >= b.x0 && px <= b.x1 && py >= b.y0 && py <= b.y1 {
                    claimed.push(i);
                }
            }
            if !claimed.is_empty() {
                break;
            }
        }
        if claimed.is_empty() {
            let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
            let mut best = (f64::INFINITY, 0);
            for (i, &(k, px, py)) in locs.iter().enumerate() {
                let d = (px - cx).powi(2) + (py - cy).powi(2);
                if k == 0 && d < best.0 {
                    best = (d, i);
                }
            }
            claimed.push(best.1);
        }
        for i in claimed {
            claims[i].push(g);
        }
    }
    claims
        .iter()
        .zip(&locs)
        .map(|(owners, &(_, px, py))| {
            let mut best: Option<usize> = None;
            for &g in owners {
                if best.is_none_or(|b| area(&gts[g].bbox) < area(&gts[b].bbox)) {
                    best = Some(g);
                }
            }
            best.map(|g| (g, ltrb(px, py, &gts[g].bbox)))
        })
        .collect()
}

/// `(C, H, W)` row-major map.
#[derive(Debug, Clone)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// `out[o] = sum_i w[o][i] * x[i]` per pixel; `w` is `cout x cin` row-major.
pub fn conv1x1(x: &Map, w: &[f64], cout: usize, bias: Option<&[f64]>) -> Map {
    let mut data = vec![0.0; cout * x.h * x.w];
    for o in 0..cout {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = bias.map_or(0.0, |b| b[o]);
                for i in 0..x.c {
                    s += w[o * x.c + i] * x.at(i, y, xx);
                }
                data[(o * x.h + y) * x.w + xx] = s;
            }
        }
    }
    Map { c: cout, h: x.h, w: x.w, data }
}

/// Channel attention written out with explicit dot products. `proj` holds
/// `(q, k, v)` weights or `None` for identity.
pub fn cst(x: &Map, heads: usize, proj: Option<(&[f64], &[f64], &[f64])>, scaled: bool, residual: bool) -> Map {
    let (q, k, v) = match proj {
        Some((wq, wk, wv)) => (conv1x1(x, wq, x.c, None), conv1x1(x, wk, x.c, None), conv1x1(x, wv, x.c, None)),
        None => (x.clone(), x.clone(), x.clone()),
    };
    let hw = x.h * x.w;
    let d = x.c / heads;
    let mut out = vec![0.0; x.c * hw];
    for n in 0..heads {
        for i in 0..d {
            let ci = n * d + i;
            let mut sims = Vec::with_capacity(d);
            for j in 0..d {
                let cj = n * d + j;
                let mut s = 0.0;
                for p in 0..hw {
                    s += q.data[ci * hw + p] * k.data[cj * hw + p];
                }
                if scaled {
                    s /= (hw as f64).sqrt();
                }
                sims.push(s);
            }
            let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for p in 0..hw {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += e[j] / z * v.data[(n * d + j) * hw + p];
                }
                out[ci * hw + p] = acc + if residual { x.data[ci * hw + p] } else { 0.0 };
            }
        }
    }
    Map { c: x.c, h: x.h, w: x.w, data: out }
}

/// Bilinear sample of a single-channel `h x w` plane at output pixel
/// `(oy, ox)` of an `oh x ow` grid, pixel centres aligned at half offsets.
pub fn sample(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize, oy: usize, ox: usize) -> f64 {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, if hi == lo { 0.0 } else { s - lo as f64 })
    };
    let (y0, y1, fy) = coord(oy, h, oh);
    let (x0, x1, fx) = coord(ox, w, ow);
    let p = |y: usize, x: usize| plane[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
}

/// Scale attention: returns the rescaled levels and the five slot weights.
pub fn psst(levels: &[Map], reduce_w: &[f64], reduce_b: f64, heads: usize, proj: (&[f64], &[f64], &[f64]), scaled: bool) -> (Vec<Map>, Vec<f64>) {
    let (h, w) = (levels[0].h, levels[0].w);
    let mut stacked = Vec::with_capacity(levels.len() * h * w);
    for l in levels {
        let reduced = conv1x1(l, reduce_w, 1, Some(&[reduce_b]));
        for y in 0..h {
            for x in 0..w {
                stacked.push(sample(&reduced.data, l.h, l.w, h, w, y, x));
            }
        }
    }
    let slots = Map {
        c: levels.len(),
        h,
        w,
        data: stacked,
    };
    let attended = cst(&slots, heads, Some(proj), scaled, false);
    let weights: Vec<f64> = (0..levels.len())
        .map(|k| attended.data[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    let out = levels
        .iter()
        .zip(&weights)
        .map(|(l, &s)| Map {
            data: l.data.iter().map(|v| v * s).collect(),
            ..l.clone()
        })
        .collect();
    (out, weights)
}

/// Checks the defining property of greedy suppression: a box is kept iff no
/// kept box ranked ahead of it overlaps it above the threshold.
pub fn nms_consistent(boxes: &[BBox], scores: &[f64], threshold: f64, kept: &[usize]) -> bool {
    let n = boxes.len();
    let ahead = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut is_kept = vec![false; n];
    for &k in kept {
        if k >= n || is_kept[k] {
            return false;
        }
        is_kept[k] = true;
    }
    for i in 0..n {
        let blocked = (0..n).any(|j| j != i && is_kept[j] && ahead(j, i) && iou(&boxes[i], &boxes[j]) > threshold);
        if is_kept[i] == blocked {
            return false;
        }
    }
    // visiting order
    kept.windows(2).all(|p| ahead(p[0], p[1]))
}

/// Detection matching in rank order: argmax-IoU gt, TP iff above threshold
/// and that gt is still free. Results are aligned with `boxes`.
pub fn match_detections(boxes: &[BBox], scores: &[f64], gts: &[BBox], threshold: f64) -> Vec<(bool, Option<usize>)> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    for i in 0..order.len() {
        for j in 0..order.len() - 1 - i {
            let (a, b) = (order[j], order[j + 1]);
            if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                order.swap(j, j + 1);
            }
        }
    }
    let mut taken = vec![false; gts.len()];
    let mut out = vec![(false, None); boxes.len()];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&boxes[d], gt);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= threshold => {
                out[d] = (!taken[g], Some(g));
                taken[g] = true;
            }
            _ => {}
        }
    }
    out
}

/// All-point AP: `(1/n_gt) * sum over TP ranks k of max_{j >= k} precision_j`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0.0;
    let prec: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            if f {
                tp += 1.0;
            }
            tp / (i + 1) as f64
        })
        .collect();
    let mut sum = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            sum += prec[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    sum / n_gt as f64
}
