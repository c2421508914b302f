//! Detection metrics: IoU, greedy matching, all-point average precision and
//! the precision/recall/mAP@0.5 report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Finite coordinates with `x1 < x2` and `y1 < y2`.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageMatch {
    /// True positive flag per detection, in input order.
    pub tp: Vec<bool>,
    /// Index of the ground-truth box matched by each detection.
    pub matched_gt: Vec<Option<usize>>,
    /// Whether each ground-truth box was matched.
    pub gt_hit: Vec<bool>,
}

impl ImageMatch {
    pub fn true_positives(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.tp.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_hit.iter().filter(|&&h| !h).count()
    }
}

/// Detection indices by descending score; equal scores keep input order.
pub fn rank_by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching: visiting detections from the highest score down, each one
/// claims the still-unmatched ground truth of its class with the highest IoU,
/// provided that IoU reaches `iou_thr`.
pub fn match_and_count(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> ImageMatch {
    let mut out = ImageMatch {
        tp: vec![false; dets.len()],
        matched_gt: vec![None; dets.len()],
        gt_hit: vec![false; gts.len()],
    };
    for di in rank_by_score(dets) {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if out.gt_hit[gi] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            assert!(!out.gt_hit[gi], "ground truth {gi} matched twice");
            out.gt_hit[gi] = true;
            out.tp[di] = true;
            out.matched_gt[di] = Some(gi);
        }
    }
    out
}

pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

pub fn recall(tp: usize, num_gt: usize) -> f64 {
    if num_gt == 0 {
        0.0
    } else {
        tp as f64 / num_gt as f64
    }
}

/// All-point interpolated AP: the area under the precision envelope of the
/// score-ranked PR curve. `None` when the class has no ground truth.
pub fn average_precision(scored: &[(f64, bool)], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut recalls = Vec::with_capacity(order.len());
    let mut precisions = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        }
        recalls.push(tp as f64 / gt_count as f64);
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recalls.iter().zip(&precisions) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    /// Operating point for precision, recall and the TP/FP/FN counts.
    pub score_threshold: f64,
    pub classes: Vec<ClassReport>,
    pub precision: f64,
    pub recall: f64,
    /// Mean AP over classes with at least one ground-truth box.
    pub map50: Option<f64>,
    /// No detections and no ground truth anywhere.
    pub empty: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: &'static str = "class,num_gt,tp,fp,fn,precision,recall,ap";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let fmt_opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{}",
                c.name,
                c.num_gt,
                c.tp,
                c.fp,
                c.fn_,
                c.precision,
                c.recall,
                fmt_opt(c.ap)
            );
        }
        let (tp, fp, fn_, gt) = self.classes.iter().fold((0, 0, 0, 0), |a, c| {
            (a.0 + c.tp, a.1 + c.fp, a.2 + c.fn_, a.3 + c.num_gt)
        });
        let _ = writeln!(
            s,
            "all,{gt},{tp},{fp},{fn_},{:.6},{:.6},{}",
            self.precision,
            self.recall,
            fmt_opt(self.map50)
        );
        s
    }
}

#[derive(Clone, Debug, Default)]
struct ClassAccum {
    scored: Vec<(f64, bool)>,
    num_gt: usize,
    tp: usize,
    fp: usize,
}

/// Accumulates per-image matches into an [`EvalReport`].
#[derive(Clone, Debug)]
pub struct MapEvaluator {
    class_names: Vec<String>,
    iou_threshold: f64,
    score_threshold: f64,
    per_class: Vec<ClassAccum>,
}

impl MapEvaluator {
    pub fn new(class_names: Vec<String>, iou_threshold: f64, score_threshold: f64) -> Self {
        let per_class = vec![ClassAccum::default(); class_names.len()];
        MapEvaluator {
            class_names,
            iou_threshold,
            score_threshold,
            per_class,
        }
    }

    /// Detections below the operating threshold still enter the PR curve.
    pub fn add_image(&mut self, dets: &[Detection], gts: &[GroundTruth]) {
        let m = match_and_count(dets, gts, self.iou_threshold);
        for g in gts {
            self.per_class[g.class_id].num_gt += 1;
        }
        for (d, &tp) in dets.iter().zip(&m.tp) {
            let acc = &mut self.per_class[d.class_id];
            acc.scored.push((d.score, tp));
            if d.score >= self.score_threshold {
                if tp {
                    acc.tp += 1;
                } else {
                    acc.fp += 1;
                }
            }
        }
    }

    pub fn report(&self) -> EvalReport {
        let classes: Vec<ClassReport> = self
            .per_class
            .iter()
            .enumerate()
            .map(|(i, a)| ClassReport {
                class_id: i,
                name: self.class_names[i].clone(),
                num_gt: a.num_gt,
                tp: a.tp,
                fp: a.fp,
                fn_: a.num_gt - a.tp,
                precision: precision(a.tp, a.fp),
                recall: recall(a.tp, a.num_gt),
                ap: average_precision(&a.scored, a.num_gt),
            })
            .collect();
        let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
        let map50 = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        let tp: usize = classes.iter().map(|c| c.tp).sum();
        let fp: usize = classes.iter().map(|c| c.fp).sum();
        let gt: usize = classes.iter().map(|c| c.num_gt).sum();
        let dets: usize = self.per_class.iter().map(|a| a.scored.len()).sum();
        EvalReport {
            iou_threshold: self.iou_threshold,
            score_threshold: self.score_threshold,
            precision: precision(tp, fp),
            recall: recall(tp, gt),
            map50,
            empty: gt == 0 && dets == 0,
            classes,
        }
    }
}
