//! Turning raw head maps into scored boxes.

use crate::metrics::{iou, rank_by_score, BBox, Detection};
use crate::ops::elementwise::sigmoid_scalar;
use crate::tensor::{Element, Tensor};

use super::STRIDES;

/// Every (cell, class) pair of every level as an unclipped detection, in
/// level, row, column, class order. Boxes may be degenerate.
pub fn decode_candidates<T: Element>(maps: &[Tensor<T>; 3], num_classes: usize) -> Vec<Vec<Detection>> {
    let n = maps[0].shape()[0];
    (0..n)
        .map(|img| {
            let mut out = Vec::new();
            for (map, &s) in maps.iter().zip(&STRIDES) {
                let [_, _, h, w] = map.shape();
                let s = s as f64;
                for y in 0..h {
                    for x in 0..w {
                        let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                        let off = |k: usize| map.at(img, num_classes + k, y, x).as_f64().max(0.0) * s;
                        let bbox = BBox::new(cx - off(0), cy - off(1), cx + off(2), cy + off(3));
                        for c in 0..num_classes {
                            out.push(Detection {
                                bbox,
                                class_id: c,
                                score: sigmoid_scalar(map.at(img, c, y, x).as_f64()),
                            });
                        }
                    }
                }
            }
            out
        })
        .collect()
}

/// Greedy per-class suppression: a box is dropped when it overlaps an
/// already kept, higher-scoring box of its class by more than `iou_thr`.
/// The survivors are returned by descending score.
pub fn nms(dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in rank_by_score(&dets) {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_thr)
        {
            kept.push(d);
        }
    }
    kept
}

/// Scores below `score_thr` are dropped, boxes are clipped to the image and
/// degenerate ones discarded, then per-class NMS runs.
pub fn decode<T: Element>(
    maps: &[Tensor<T>; 3],
    image_hw: (usize, usize),
    num_classes: usize,
    score_thr: f64,
    nms_iou: f64,
) -> Vec<Vec<Detection>> {
    let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
    decode_candidates(maps, num_classes)
        .into_iter()
        .map(|cands| {
            let dets = cands
                .into_iter()
                .filter(|d| d.score >= score_thr)
                .map(|d| Detection {
                    bbox: d.bbox.clip(w, h),
                    ..d
                })
                .filter(|d| d.bbox.is_valid())
                .collect();
            nms(dets, nms_iou)
        })
        .collect()
}
