//! Center-cell target assignment and the dense detection loss.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::ops::elementwise::sigmoid_scalar;
use crate::tensor::{Element, Tensor};

use super::{HeadConfig, STRIDES};

/// Head level (0, 1, 2 for strides 8, 16, 32) whose stride is nearest to the
/// box's square-root area on a log2 scale.
pub fn assign_level(b: &BBox) -> usize {
    let l = b.area().sqrt().log2().round();
    (l.clamp(3.0, 5.0) as usize) - 3
}

/// A cell responsible for one ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub class_id: usize,
    /// `(l, t, r, b)` distances from the cell center in units of the stride,
    /// clamped at zero.
    pub target: [f64; 4],
    pub gt_index: usize,
    area: f64,
}

/// Per level, per `(image, row, column)` cell, the assigned box if any.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub batch: usize,
    pub extents: [(usize, usize); 3],
    pub cells: [Vec<Option<Positive>>; 3],
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    fn index(&self, level: usize, img: usize, y: usize, x: usize) -> usize {
        let (h, w) = self.extents[level];
        (img * h + y) * w + x
    }

    pub fn get(&self, level: usize, img: usize, y: usize, x: usize) -> Option<Positive> {
        self.cells[level][self.index(level, img, y, x)]
    }
}

/// Assigns every box to the cell containing its center on its level. When two
/// boxes land on one cell the smaller one keeps it.
pub fn assign(gts: &[Vec<GroundTruth>], image_hw: (usize, usize), num_classes: usize) -> Result<Assignment> {
    let (h, w) = image_hw;
    let extents = STRIDES.map(|s| (h / s, w / s));
    let batch = gts.len();
    let mut a = Assignment {
        batch,
        extents,
        cells: extents.map(|(eh, ew)| vec![None; batch * eh * ew]),
    };
    for (img, boxes) in gts.iter().enumerate() {
        for (gi, g) in boxes.iter().enumerate() {
            if !g.bbox.is_valid() {
                return Err(Error::Validation(format!("image {img} box {gi} has no area: {:?}", g.bbox)));
            }
            if g.class_id >= num_classes {
                return Err(Error::Validation(format!(
                    "image {img} box {gi} has class {} but the head predicts {num_classes}",
                    g.class_id
                )));
            }
            let level = assign_level(&g.bbox);
            let s = STRIDES[level] as f64;
            let (eh, ew) = extents[level];
            if eh == 0 || ew == 0 {
                continue;
            }
            let (cx, cy) = g.bbox.center();
            let x = ((cx / s).floor().max(0.0) as usize).min(ew - 1);
            let y = ((cy / s).floor().max(0.0) as usize).min(eh - 1);
            let (ccx, ccy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            let target = [
                (ccx - g.bbox.x1) / s,
                (ccy - g.bbox.y1) / s,
                (g.bbox.x2 - ccx) / s,
                (g.bbox.y2 - ccy) / s,
            ]
            .map(|v| v.max(0.0));
            let p = Positive {
                class_id: g.class_id,
                target,
                gt_index: gi,
                area: g.bbox.area(),
            };
            let idx = a.index(level, img, y, x);
            let slot = &mut a.cells[level][idx];
            if slot.map_or(true, |old| p.area < old.area) {
                *slot = Some(p);
            }
        }
    }
    Ok(a)
}

/// Scalar loss terms, already divided by `max(1, num_positive)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub num_positive: usize,
}

fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid_scalar(z) - y)
}

fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Binary cross-entropy over every cell and class plus smooth-L1 on the raw
/// `(l, t, r, b)` channels of positive cells, both normalized by the number
/// of positives (at least one). Gradients are computed here and attached to
/// the tape as a single fused node.
pub fn detection_loss<T: Element>(
    tape: &mut Tape<T>,
    maps: [Var; 3],
    gts: &[Vec<GroundTruth>],
    image_hw: (usize, usize),
    cfg: &HeadConfig,
) -> Result<(Var, LossBreakdown)> {
    let nc = cfg.num_classes;
    let a = assign(gts, image_hw, nc)?;
    for (level, &m) in maps.iter().enumerate() {
        let shape = tape.shape(m);
        let (eh, ew) = a.extents[level];
        if shape != [a.batch, nc + 4, eh, ew] {
            return Err(crate::error::shape_err(
                "detection_loss",
                format!("level {level} map {shape:?} vs expected {:?}", [a.batch, nc + 4, eh, ew]),
            ));
        }
    }
    let num_pos = a.num_positive();
    let norm = num_pos.max(1) as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    let mut inputs = Vec::with_capacity(3);
    for (level, &m) in maps.iter().enumerate() {
        let map = tape.value(m);
        let mut grad = Tensor::<T>::zeros(map.shape());
        let (eh, ew) = a.extents[level];
        for img in 0..a.batch {
            for y in 0..eh {
                for x in 0..ew {
                    let pos = a.get(level, img, y, x);
                    for c in 0..nc {
                        let target = if pos.is_some_and(|p| p.class_id == c) { 1.0 } else { 0.0 };
                        let (l, g) = bce_with_logits(map.at(img, c, y, x).as_f64(), target);
                        cls += l;
                        *grad.at_mut(img, c, y, x) = T::of(g / norm);
                    }
                    if let Some(p) = pos {
                        for k in 0..4 {
                            let d = map.at(img, nc + k, y, x).as_f64() - p.target[k];
                            let (l, g) = smooth_l1(d, cfg.smooth_l1_beta);
                            reg += l;
                            *grad.at_mut(img, nc + k, y, x) = T::of(cfg.reg_weight * g / norm);
                        }
                    }
                }
            }
        }
        inputs.push((m, grad));
    }
    let cls = cls / norm;
    let reg = reg / norm;
    let total = cls + cfg.reg_weight * reg;
    let v = tape.fused_scalar(T::of(total), inputs)?;
    Ok((
        v,
        LossBreakdown {
            total,
            cls,
            reg,
            num_positive: num_pos,
        },
    ))
}

/// Raw head maps that decode back to `gts`: `+logit` at each positive cell
/// and class, `-logit` elsewhere, offsets equal to the regression targets.
pub fn encode_maps<T: Element>(
    gts: &[Vec<GroundTruth>],
    image_hw: (usize, usize),
    num_classes: usize,
    logit: f64,
) -> Result<[Tensor<T>; 3]> {
    let a = assign(gts, image_hw, num_classes)?;
    let mut maps = a
        .extents
        .map(|(eh, ew)| Tensor::full([a.batch, num_classes + 4, eh, ew], T::zero()));
    for (level, map) in maps.iter_mut().enumerate() {
        let (eh, ew) = a.extents[level];
        for img in 0..a.batch {
            for y in 0..eh {
                for x in 0..ew {
                    let pos = a.get(level, img, y, x);
                    for c in 0..num_classes {
                        let hit = pos.is_some_and(|p| p.class_id == c);
                        *map.at_mut(img, c, y, x) = T::of(if hit { logit } else { -logit });
                    }
                    if let Some(p) = pos {
                        for k in 0..4 {
                            *map.at_mut(img, num_classes + k, y, x) = T::of(p.target[k]);
                        }
                    }
                }
            }
        }
    }
    Ok(maps)
}
