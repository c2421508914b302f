//! Independent scalar-loop references shared by the integration tests.
#![allow(dead_code)]

use mrcdet::metrics::{BBox, Detection, GroundTruth};
use mrcdet::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod checks;

pub type T4 = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: [usize; 4], rng: &mut ChaCha8Rng) -> T4 {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

pub fn max_abs(a: &T4, b: &T4) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn get(x: &T4, n: usize, c: usize, h: isize, w: isize) -> f64 {
    let [_, _, hh, ww] = x.shape();
    if h < 0 || w < 0 || h as usize >= hh || w as usize >= ww {
        0.0
    } else {
        x.at(n, c, h as usize, w as usize)
    }
}

pub fn conv2d(x: &T4, w: &T4, b: Option<&T4>, stride: usize, pad: (usize, usize), groups: usize) -> T4 {
    let [n, cin, h, wd] = x.shape();
    let [cout, cig, kh, kw] = w.shape();
    assert_eq!(cig * groups, cin);
    let ho = (h + 2 * pad.0 - kh) / stride + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride + 1;
    let cog = cout / groups;
    let mut y = Tensor::zeros([n, cout, ho, wo]);
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride + kx) as isize - pad.1 as isize;
                                acc += get(x, ni, g * cig + ci, iy, ix) * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                    *y.at_mut(ni, co, oy, ox) = acc;
                }
            }
        }
    }
    y
}

/// Scatter-accumulate transposed convolution; `w` is `[Cin, Cout, k, k]`.
pub fn conv_transpose2d(x: &T4, w: &T4, b: Option<&T4>, stride: usize, pad: usize, out_pad: usize) -> T4 {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, kh, kw] = w.shape();
    let ho = (h - 1) * stride + kh + out_pad - 2 * pad;
    let wo = (wd - 1) * stride + kw + out_pad - 2 * pad;
    let mut y = Tensor::zeros([n, cout, ho, wo]);
    for ni in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                                    *y.at_mut(ni, co, oy as usize, ox as usize) += x.at(ni, ci, iy, ix) * w.at(ci, co, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        *y.at_mut(ni, co, oy, ox) += b.data()[co];
                    }
                }
            }
        }
    }
    y
}

/// Mean over W, `[N, C, H, 1]`.
pub fn pool_width(x: &T4) -> T4 {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, h, 1]);
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let mut s = 0.0;
                for wi in 0..w {
                    s += x.at(ni, ci, hi, wi);
                }
                *y.at_mut(ni, ci, hi, 0) = s / w as f64;
            }
        }
    }
    y
}

/// Mean over H, `[N, C, 1, W]`.
pub fn pool_height(x: &T4) -> T4 {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 1, w]);
    for ni in 0..n {
        for ci in 0..c {
            for wi in 0..w {
                let mut s = 0.0;
                for hi in 0..h {
                    s += x.at(ni, ci, hi, wi);
                }
                *y.at_mut(ni, ci, 0, wi) = s / h as f64;
            }
        }
    }
    y
}

pub fn global_avg_pool(x: &T4) -> T4 {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 1, 1]);
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    s += x.at(ni, ci, hi, wi);
                }
            }
            *y.at_mut(ni, ci, 0, 0) = s / (h * w) as f64;
        }
    }
    y
}

/// Square window, zero padding counted in the divisor.
pub fn avg_pool2d(x: &T4, k: usize, stride: usize, pad: usize) -> T4 {
    let [n, c, h, w] = x.shape();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros([n, c, ho, wo]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            s += get(x, ni, ci, iy, ix);
                        }
                    }
                    *y.at_mut(ni, ci, oy, ox) = s / (k * k) as f64;
                }
            }
        }
    }
    y
}

pub fn map(x: &T4, f: impl Fn(f64) -> f64) -> T4 {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = f(*v);
    }
    y
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn idx_with(shape: [usize; 4], flat: usize) -> [usize; 4] {
    let [_, c, h, w] = shape;
    [flat / (c * h * w), flat / (h * w) % c, flat / w % h, flat % w]
}

pub fn softmax(x: &T4, axis: usize) -> T4 {
    let shape = x.shape();
    let mut y = Tensor::zeros(shape);
    for flat in 0..x.numel() {
        let i = idx_with(shape, flat);
        let mut z = 0.0;
        for k in 0..shape[axis] {
            let mut j = i;
            j[axis] = k;
            z += x.at(j[0], j[1], j[2], j[3]).exp();
        }
        *y.at_mut(i[0], i[1], i[2], i[3]) = x.at(i[0], i[1], i[2], i[3]).exp() / z;
    }
    y
}

pub fn broadcast(a: &T4, b: &T4, f: impl Fn(f64, f64) -> f64) -> T4 {
    let (sa, sb) = (a.shape(), b.shape());
    let shape: [usize; 4] = std::array::from_fn(|i| sa[i].max(sb[i]));
    let pick = |s: [usize; 4], i: [usize; 4]| -> [usize; 4] { std::array::from_fn(|k| if s[k] == 1 { 0 } else { i[k] }) };
    let mut y = Tensor::zeros(shape);
    for flat in 0..y.numel() {
        let i = idx_with(shape, flat);
        let ia = pick(sa, i);
        let ib = pick(sb, i);
        *y.at_mut(i[0], i[1], i[2], i[3]) = f(a.at(ia[0], ia[1], ia[2], ia[3]), b.at(ib[0], ib[1], ib[2], ib[3]));
    }
    y
}

pub fn batch_norm_train(x: &T4, gamma: &T4, beta: &T4, eps: f64) -> T4 {
    let [n, c, h, w] = x.shape();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let count = (n * h * w) as f64;
    for ci in 0..c {
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    mean[ci] += x.at(ni, ci, hi, wi);
                }
            }
        }
        mean[ci] /= count;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    var[ci] += (x.at(ni, ci, hi, wi) - mean[ci]).powi(2);
                }
            }
        }
        var[ci] /= count;
    }
    affine(x, gamma, beta, &mean, &var, eps)
}

pub fn batch_norm_eval(x: &T4, gamma: &T4, beta: &T4, mean: &T4, var: &T4, eps: f64) -> T4 {
    affine(x, gamma, beta, mean.data(), var.data(), eps)
}

fn affine(x: &T4, gamma: &T4, beta: &T4, mean: &[f64], var: &[f64], eps: f64) -> T4 {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let xh = (x.at(ni, ci, hi, wi) - mean[ci]) / (var[ci] + eps).sqrt();
                    *y.at_mut(ni, ci, hi, wi) = gamma.data()[ci] * xh + beta.data()[ci];
                }
            }
        }
    }
    y
}

pub fn group_norm(x: &T4, groups: usize, gamma: &T4, beta: &T4, eps: f64) -> T4 {
    let [n, c, h, w] = x.shape();
    let cg = c / groups;
    let mut y = Tensor::zeros(x.shape());
    for ni in 0..n {
        for g in 0..groups {
            let cells = || (g * cg..(g + 1) * cg).flat_map(move |ci| (0..h).flat_map(move |hi| (0..w).map(move |wi| (ci, hi, wi))));
            let count = (cg * h * w) as f64;
            let mean = cells().map(|(ci, hi, wi)| x.at(ni, ci, hi, wi)).sum::<f64>() / count;
            let var = cells().map(|(ci, hi, wi)| (x.at(ni, ci, hi, wi) - mean).powi(2)).sum::<f64>() / count;
            for (ci, hi, wi) in cells() {
                let xh = (x.at(ni, ci, hi, wi) - mean) / (var + eps).sqrt();
                *y.at_mut(ni, ci, hi, wi) = gamma.data()[ci] * xh + beta.data()[ci];
            }
        }
    }
    y
}

pub fn concat(xs: &[&T4], axis: usize) -> T4 {
    let mut shape = xs[0].shape();
    shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut y = Tensor::zeros(shape);
    let mut base = 0;
    for x in xs {
        for flat in 0..x.numel() {
            let mut i = idx_with(x.shape(), flat);
            let v = x.at(i[0], i[1], i[2], i[3]);
            i[axis] += base;
            *y.at_mut(i[0], i[1], i[2], i[3]) = v;
        }
        base += x.shape()[axis];
    }
    y
}

pub fn slice(x: &T4, axis: usize, start: usize, len: usize) -> T4 {
    let mut shape = x.shape();
    shape[axis] = len;
    let mut y = Tensor::zeros(shape);
    for flat in 0..y.numel() {
        let i = idx_with(shape, flat);
        let mut j = i;
        j[axis] += start;
        *y.at_mut(i[0], i[1], i[2], i[3]) = x.at(j[0], j[1], j[2], j[3]);
    }
    y
}

pub fn bmm(a: &T4, b: &T4) -> T4 {
    let [n, c, p, k] = a.shape();
    let m = b.shape()[3];
    let mut y = Tensor::zeros([n, c, p, m]);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..p {
                for j in 0..m {
                    let mut s = 0.0;
                    for q in 0..k {
                        s += a.at(ni, ci, i, q) * b.at(ni, ci, q, j);
                    }
                    *y.at_mut(ni, ci, i, j) = s;
                }
            }
        }
    }
    y
}

/// Channel group `g` of every sample stacked on the batch axis:
/// `[N, C, H, W] -> [N*G, C/G, H, W]`.
pub fn group_split(x: &T4, groups: usize) -> T4 {
    let [n, c, h, w] = x.shape();
    let cg = c / groups;
    let mut y = Tensor::zeros([n * groups, cg, h, w]);
    for ni in 0..n {
        for g in 0..groups {
            for ci in 0..cg {
                for hi in 0..h {
                    for wi in 0..w {
                        *y.at_mut(ni * groups + g, ci, hi, wi) = x.at(ni, g * cg + ci, hi, wi);
                    }
                }
            }
        }
    }
    y
}

pub fn group_merge(y: &T4, groups: usize) -> T4 {
    let [ng, cg, h, w] = y.shape();
    let n = ng / groups;
    let mut x = Tensor::zeros([n, cg * groups, h, w]);
    for ni in 0..n {
        for g in 0..groups {
            for ci in 0..cg {
                for hi in 0..h {
                    for wi in 0..w {
                        *x.at_mut(ni, g * cg + ci, hi, wi) = y.at(ni * groups + g, ci, hi, wi);
                    }
                }
            }
        }
    }
    x
}

/// Named parameter lookup.
pub struct Params<'a>(pub &'a ParamStore<f64>);

impl Params<'_> {
    pub fn get(&self, name: &str) -> &T4 {
        let id = self.0.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.0.value(id)
    }

    fn conv(&self, name: &str, x: &T4, stride: usize, pad: (usize, usize), groups: usize) -> T4 {
        let b = self.0.id(&format!("{name}.bias")).map(|id| self.0.value(id));
        conv2d(x, self.get(&format!("{name}.weight")), b, stride, pad, groups)
    }

    /// Eval-mode conv 3x3 (no bias), batch norm, ReLU.
    pub fn cbr(&self, name: &str, x: &T4, stride: usize) -> T4 {
        let y = self.conv(&format!("{name}.conv"), x, stride, (1, 1), 1);
        let bn = |s: &str| self.get(&format!("{name}.bn.{s}"));
        let y = batch_norm_eval(&y, bn("gamma"), bn("beta"), bn("running_mean"), bn("running_var"), 1e-5);
        map(&y, relu)
    }

    pub fn dca(&self, name: &str, x: &T4, groups: usize, eps: f64) -> T4 {
        let [_, _, h, w] = x.shape();
        let xg = group_split(x, groups);
        let [ng, cg, _, _] = xg.shape();
        let ph = pool_width(&xg);
        let pw = pool_height(&xg);
        let wt = self.get(&format!("{name}.conv_hw.weight"));
        let bs = self.get(&format!("{name}.conv_hw.bias"));
        let mix = |v: &T4| conv2d(v, wt, Some(bs), 1, (0, 0), 1);
        let gh = map(&mix(&ph), sigmoid);
        let gw = map(&mix(&pw), sigmoid);
        let x1 = broadcast(&broadcast(&xg, &gh, |a, b| a * b), &gw, |a, b| a * b);
        let x2 = self.conv(&format!("{name}.conv3"), &xg, 1, (1, 1), 1);
        let gn = |k: &str, v: &T4| group_norm(v, 1, self.get(&format!("{name}.{k}.gamma")), self.get(&format!("{name}.{k}.beta")), eps);
        let w1 = softmax(&global_avg_pool(&gn("gn1", &x1)), 1);
        let w2 = softmax(&global_avg_pool(&gn("gn2", &x2)), 1);
        let mut out = Tensor::zeros(xg.shape());
        for b in 0..ng {
            for hi in 0..h {
                for wi in 0..w {
                    let mut m = 0.0;
                    for c in 0..cg {
                        m += w1.at(b, c, 0, 0) * x2.at(b, c, hi, wi) + w2.at(b, c, 0, 0) * x1.at(b, c, hi, wi);
                    }
                    let s = sigmoid(m);
                    for c in 0..cg {
                        *out.at_mut(b, c, hi, wi) = xg.at(b, c, hi, wi) * s;
                    }
                }
            }
        }
        group_merge(&out, groups)
    }

    /// Eval-mode multi-scale residual unit.
    pub fn msru(&self, name: &str, x: &T4, split: usize, groups: usize) -> T4 {
        let c = x.shape()[1];
        let y = self.cbr(&format!("{name}.cbr1"), x, 1);
        let y = self.cbr(&format!("{name}.cbr2"), &y, 1);
        let r1 = broadcast(x, &y, |a, b| a + b);
        let a = slice(&r1, 1, 0, split);
        let b = slice(&r1, 1, split, c - split);
        let a = self.conv(&format!("{name}.conv_s1"), &a, 1, (1, 1), 1);
        let f = concat(&[&a, &b], 1);
        let f = self.conv(&format!("{name}.conv_expand"), &f, 1, (0, 0), 1);
        let f = self.conv(&format!("{name}.conv_project"), &f, 1, (0, 0), 1);
        let att = self.dca(&format!("{name}.dca"), &f, groups, 1e-5);
        broadcast(&r1, &att, |a, b| a + b)
    }

    pub fn lssm(&self, name: &str, x: &T4, k: usize) -> T4 {
        let p = k / 2;
        let gh = map(&self.conv(&format!("{name}.conv_h"), &pool_width(x), 1, (p, 0), 1), sigmoid);
        let gw = map(&self.conv(&format!("{name}.conv_w"), &pool_height(x), 1, (0, p), 1), sigmoid);
        broadcast(&broadcast(x, &gh, |a, b| a * b), &gw, |a, b| a * b)
    }

    /// Feature aggregation with LSSM screening.
    pub fn sfa(&self, name: &str, high: &T4, low: &T4, k: usize) -> T4 {
        let up = conv_transpose2d(
            high,
            self.get(&format!("{name}.upconv.weight")),
            Some(self.get(&format!("{name}.upconv.bias"))),
            2,
            1,
            1,
        );
        let l = self.lssm(&format!("{name}.screen_low"), low, k);
        let l = map(&self.conv(&format!("{name}.align"), &l, 1, (0, 0), 1), sigmoid);
        let hs = self.lssm(&format!("{name}.screen_high"), &up, k);
        let g = broadcast(&hs, &l, |a, b| a * b);
        broadcast(&g, &up, |a, b| a + b)
    }
}

pub fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> GroundTruth {
    GroundTruth {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id,
    }
}

pub fn det(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id,
        score,
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Enumerates every partial one-to-one assignment of detections to
/// same-class ground truth at IoU >= `thr` and returns the TP flags of the
/// one whose per-detection choices, read in descending score order, are
/// lexicographically best (higher IoU first, then lower ground-truth index,
/// any match beating none).
pub fn exhaustive_match(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut best: Option<(Vec<(f64, isize)>, Vec<Option<usize>>)> = None;
    let mut choice = vec![None; dets.len()];
    fn rec(
        k: usize,
        order: &[usize],
        dets: &[Detection],
        gts: &[GroundTruth],
        thr: f64,
        used: &mut Vec<bool>,
        choice: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<(f64, isize)>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let key: Vec<(f64, isize)> = order
                .iter()
                .map(|&d| match choice[d] {
                    Some(g) => (box_iou(&dets[d].bbox, &gts[g].bbox), -(g as isize)),
                    None => (-1.0, 0),
                })
                .collect();
            let better = match best {
                None => true,
                Some((bk, _)) => key.partial_cmp(bk) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((key, choice.clone()));
            }
            return;
        }
        let d = order[k];
        choice[d] = None;
        rec(k + 1, order, dets, gts, thr, used, choice, best);
        for g in 0..gts.len() {
            if !used[g] && gts[g].class_id == dets[d].class_id && box_iou(&dets[d].bbox, &gts[g].bbox) >= thr {
                used[g] = true;
                choice[d] = Some(g);
                rec(k + 1, order, dets, gts, thr, used, choice, best);
                used[g] = false;
                choice[d] = None;
            }
        }
    }
    let mut used = vec![false; gts.len()];
    rec(0, &order, dets, gts, thr, &mut used, &mut choice, &mut best);
    best.unwrap().1.iter().map(Option::is_some).collect()
}

/// AP by sweeping every score threshold: each cut gives a (recall,
/// precision) point; AP sums, over the distinct recall levels, the recall
/// increment times the best precision reached at that recall or beyond.
pub fn pr_sweep_ap(scored: &[(f64, bool)], gt_count: usize) -> f64 {
    let mut points = Vec::new();
    for &(t, _) in scored {
        let kept: Vec<_> = scored.iter().filter(|(s, _)| *s >= t).collect();
        let tp = kept.iter().filter(|(_, hit)| *hit).count() as f64;
        points.push((tp / gt_count as f64, tp / kept.len() as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Learnable parameters and FLOPs of one component, written out by hand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

fn c(params: u64, flops: u64) -> Cost {
    Cost { params, flops }
}

/// Spreadsheet-style cost of the default desk model (C0 = 32, one MSRU per
/// stage, 8 DCA groups, split 1/2, expansion 2, width 64, LSSM k = 1, three
/// classes) on one 64x64 RGB image.
pub fn desk_model_cost() -> (Cost, Cost, Cost) {
    // conv 3x3 without bias + BN + ReLU at output extent hw
    let cbr = |cin: u64, cout: u64, hw: u64| c(cout * cin * 9 + 2 * cout, 2 * cout * cin * 9 * hw + 2 * cout * hw);
    let msru = |ch: u64, h: u64, w: u64| {
        let hw = h * w;
        let s1 = ch / 2;
        let cg = ch / 8;
        let ng = 8;
        let mut t = cbr(ch, ch, hw) + cbr(ch, ch, hw);
        t = t + c(0, ch * hw); // r1
        t = t + c(s1 * s1 * 9 + s1, 2 * s1 * s1 * 9 * hw);
        t = t + c(2 * ch * ch + 2 * ch, 2 * 2 * ch * ch * hw);
        t = t + c(2 * ch * ch + ch, 2 * ch * 2 * ch * hw);
        // DCA
        t = t + c(0, ch * h + ch * w); // strips
        t = t + c(cg * cg + cg, 2 * ch * (h + w) * cg); // conv_hw
        t = t + c(0, ch * h + ch * w); // sigmoids
        t = t + c(0, 2 * ch * hw); // x1
        t = t + c(cg * cg * 9 + cg, 2 * ch * hw * cg * 9); // conv3
        t = t + c(4 * cg, 2 * ch * hw); // gn1, gn2
        t = t + c(0, 2 * ch); // pooling
        t = t + c(0, 2 * ch); // softmax
        t = t + c(0, 2 * 2 * ng * hw * cg); // two bmm
        t = t + c(0, ng * hw); // add
        t = t + c(0, ng * hw); // sigmoid
        t = t + c(0, ch * hw); // gate
        t + c(0, ch * hw) // residual
    };
    let backbone = cbr(3, 32, 32 * 32)
        + cbr(32, 32, 16 * 16)
        + cbr(32, 64, 8 * 8)
        + msru(64, 8, 8)
        + cbr(64, 128, 4 * 4)
        + msru(128, 4, 4)
        + cbr(128, 256, 2 * 2)
        + msru(256, 2, 2);

    let cf = 64;
    let lssm = |ch: u64, h: u64, w: u64| {
        c(2 * (ch * ch + ch), ch * h + ch * w + 2 * ch * ch * h + 2 * ch * ch * w + ch * h + ch * w + 2 * ch * h * w)
    };
    let sfa = |clow: u64, h: u64, w: u64| {
        let hw = h * w;
        c(cf * cf * 9 + cf, 2 * cf * hw * cf * 9)
            + lssm(clow, h, w)
            + c(clow * cf + cf, 2 * cf * clow * hw)
            + c(0, cf * hw)
            + lssm(cf, h, w)
            + c(0, 2 * cf * hw)
    };
    let neck = c(256 * cf + cf, 2 * cf * 256 * 4) + sfa(128, 4, 4) + sfa(64, 8, 8);

    let head = [64u64, 16, 4]
        .into_iter()
        .map(|hw| c(cf * 7 + 7, 2 * 7 * cf * hw))
        .fold(Cost::default(), |a, b| a + b);
    (backbone, neck, head)
}

/// Uniform draw in `lo..hi`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..hi)
}

/// Learnable parameters of one attention block over `ch` channels at the
/// default knob values (LSSM k = 1, SE reduction 16, SGE up to 8 groups,
/// CAA strip kernel 11).
pub fn attention_params(kind: &str, ch: u64) -> u64 {
    match kind {
        "lssm" => 2 * (ch * ch + ch),
        "se" => {
            let h = (ch / 16).max(1);
            2 * ch * h + h + ch
        }
        "sge" => 2 * (1..=ch.min(8)).rev().find(|g| ch % g == 0).unwrap(),
        "caa" => 2 * (ch * ch + ch) + 2 * (11 * ch + ch),
        _ => panic!("unknown attention kind {kind}"),
    }
}

/// Attention parameters held by the neck: each fusion step screens the
/// upsampled map (width channels) and the lateral map.
pub fn neck_attention_params(kind: &str, width: u64, lateral: [u64; 2]) -> u64 {
    lateral.iter().map(|&c| attention_params(kind, width) + attention_params(kind, c)).sum()
}
