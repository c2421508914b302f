//! Mini-batch training and validation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{BBox, EvalReport, GroundTruth, MapEvaluator};
use crate::nn::{Ctx, Mode};
use crate::ops::elementwise::concat;
use crate::tensor::{Element, Tensor};

use super::checkpoint::TrainState;
use super::loss::{detection_loss, LossBreakdown};
use super::{decode, AdamW, Detector};

/// Metrics of one finished epoch. `map50` is `None` when the validation split
/// holds no boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss_total,loss_cls,loss_reg,precision,recall,map50";

    pub fn csv_row(&self) -> String {
        let map = self.map50.map(|m| format!("{m:.17e}")).unwrap_or_default();
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{map}",
            self.epoch, self.loss_total, self.loss_cls, self.loss_reg, self.precision, self.recall
        )
    }
}

/// Stacks samples into one `[N, 3, H, W]` batch.
pub fn stack<T: Element>(samples: &[&Sample<T>]) -> Result<Tensor<T>> {
    let images: Vec<&Tensor<T>> = samples.iter().map(|s| &s.image).collect();
    concat(&images, 0)
}

/// Mirrors an image and its boxes left-right (`horizontal`) or top-bottom.
pub fn flip<T: Element>(s: &Sample<T>, horizontal: bool) -> Sample<T> {
    let [n, c, h, w] = s.image.shape();
    let mut image = Tensor::zeros(s.image.shape());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                    *image.at_mut(b, ch, y, x) = s.image.at(b, ch, sy, sx);
                }
            }
        }
    }
    let (wf, hf) = (w as f64, h as f64);
    let gts = s
        .gts
        .iter()
        .map(|g| {
            let b = g.bbox;
            let bbox = if horizontal {
                BBox::new(wf - b.x2, b.y1, wf - b.x1, b.y2)
            } else {
                BBox::new(b.x1, hf - b.y2, b.x2, hf - b.y1)
            };
            GroundTruth { bbox, ..*g }
        })
        .collect();
    Sample {
        name: s.name.clone(),
        image,
        gts,
    }
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<T: Element>(det: &mut Detector<T>, opt: &mut AdamW<T>, batch: &[&Sample<T>]) -> Result<LossBreakdown> {
    let images = stack(batch)?;
    det.net.backbone.check_input(images.shape())?;
    let [_, _, h, w] = images.shape();
    let gts: Vec<Vec<GroundTruth>> = batch.iter().map(|s| s.gts.clone()).collect();
    det.store.zero_grad();
    let mut ctx = Ctx::new(&mut det.store, Mode::Train);
    let x = ctx.input(images);
    let maps = det.net.forward(&mut ctx, x)?;
    let (loss, parts) = detection_loss(&mut ctx.tape, maps, &gts, (h, w), &det.config.head)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    ctx.backward(loss)?;
    opt.step(&mut det.store)?;
    Ok(parts)
}

/// Validation metrics. Every candidate scoring at least `head.min_score`
/// enters the PR curve; precision and recall use `head.score_threshold`.
pub fn evaluate<T: Element>(det: &mut Detector<T>, samples: &[Sample<T>], class_names: &[String]) -> Result<EvalReport> {
    let head = det.config.head.clone();
    let mut eval = MapEvaluator::new(class_names.to_vec(), 0.5, head.score_threshold);
    for chunk in samples.chunks(det.config.train.batch_size) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let images = stack(&refs)?;
        let [_, _, h, w] = images.shape();
        let maps = det.forward_maps(&images, Mode::Eval)?;
        let dets = decode(&maps, (h, w), head.num_classes, head.min_score, head.nms_iou);
        for (s, d) in chunk.iter().zip(&dets) {
            eval.add_image(d, &s.gts);
        }
    }
    Ok(eval.report())
}

/// Runs epochs `state.epochs_done + 1 ..= train.epochs`, calling `on_epoch`
/// after each. Shuffling and flips draw from a stream keyed by seed and
/// epoch, so a resumed run continues exactly where it stopped.
pub fn fit<T: Element>(
    det: &mut Detector<T>,
    state: &mut TrainState<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    class_names: &[String],
    mut on_epoch: impl FnMut(&EpochLog, &Detector<T>, &TrainState<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let cfg = det.config.clone();
    let mut logs = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in state.epochs_done as usize + 1..=cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut cls, mut reg) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for idx in order.chunks(cfg.train.batch_size) {
            let owned: Vec<Sample<T>> = idx
                .iter()
                .map(|&i| {
                    let mut s = train[i].clone();
                    if cfg.data.hflip && rng.gen_bool(0.5) {
                        s = flip(&s, true);
                    }
                    if cfg.data.vflip && rng.gen_bool(0.5) {
                        s = flip(&s, false);
                    }
                    s
                })
                .collect();
            let batch: Vec<&Sample<T>> = owned.iter().collect();
            let parts = train_step(det, &mut state.optimizer, &batch)?;
            total += parts.total;
            cls += parts.cls;
            reg += parts.reg;
            batches += 1;
        }
        state.epochs_done = epoch as u64;
        let report = evaluate(det, val, class_names)?;
        let n = batches as f64;
        let log = EpochLog {
            epoch,
            loss_total: total / n,
            loss_cls: cls / n,
            loss_reg: reg / n,
            precision: report.precision,
            recall: report.recall,
            map50: report.map50,
        };
        on_epoch(&log, det, state)?;
        logs.push(log);
        if let Some(patience) = cfg.train.early_stop_patience {
            let m = report.map50.unwrap_or(0.0);
            if m > best {
                best = m;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(logs)
}
