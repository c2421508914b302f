//! Averaging reductions: directional strips, global pooling and windowed
//! average pooling.

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Spatial axis reduced by a directional pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Average over H, giving `[N, C, 1, W]`.
    Height,
    /// Average over W, giving `[N, C, H, 1]`.
    Width,
}

pub fn pool_directional<T: Element>(x: &Tensor<T>, axis: PoolAxis) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    match axis {
        PoolAxis::Width => {
            if w == 0 {
                return Err(shape_err("pool_directional", format!("cannot average empty width of {:?}", x.shape())));
            }
            let inv = T::of(1.0 / w as f64);
            let mut out = Tensor::zeros([n, c, h, 1]);
            for (o, row) in out.data_mut().iter_mut().zip(x.data().chunks_exact(w)) {
                *o = row.iter().copied().sum::<T>() * inv;
            }
            Ok(out)
        }
        PoolAxis::Height => {
            if h == 0 {
                return Err(shape_err("pool_directional", format!("cannot average empty height of {:?}", x.shape())));
            }
            let inv = T::of(1.0 / h as f64);
            let mut out = Tensor::zeros([n, c, 1, w]);
            if w == 0 {
                return Ok(out);
            }
            for (o, plane) in out.data_mut().chunks_exact_mut(w).zip(x.data().chunks_exact(h * w)) {
                for row in plane.chunks_exact(w) {
                    for (a, &b) in o.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                for a in o.iter_mut() {
                    *a *= inv;
                }
            }
            Ok(out)
        }
    }
}

pub fn pool_directional_backward<T: Element>(x_shape: [usize; 4], axis: PoolAxis, dout: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = x_shape;
    let mut dx = Tensor::zeros(x_shape);
    if dx.is_empty() {
        return dx;
    }
    match axis {
        PoolAxis::Width => {
            let inv = T::of(1.0 / w as f64);
            for (row, &g) in dx.data_mut().chunks_exact_mut(w).zip(dout.data()) {
                row.fill(g * inv);
            }
        }
        PoolAxis::Height => {
            let inv = T::of(1.0 / h as f64);
            for (plane, g) in dx.data_mut().chunks_exact_mut(h * w).zip(dout.data().chunks_exact(w)) {
                for row in plane.chunks_exact_mut(w) {
                    for (a, &b) in row.iter_mut().zip(g) {
                        *a = b * inv;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h * w == 0 {
        return Err(shape_err("global_avg_pool", format!("empty spatial extent in {:?}", x.shape())));
    }
    let inv = T::of(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for (o, plane) in out.data_mut().iter_mut().zip(x.data().chunks_exact(h * w)) {
        *o = plane.iter().copied().sum::<T>() * inv;
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Element>(x_shape: [usize; 4], dout: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = x_shape;
    let mut dx = Tensor::zeros(x_shape);
    if dx.is_empty() {
        return dx;
    }
    let inv = T::of(1.0 / (h * w) as f64);
    for (plane, &g) in dx.data_mut().chunks_exact_mut(h * w).zip(dout.data()) {
        plane.fill(g * inv);
    }
    dx
}

/// Square-window average pooling with zero padding counted in the divisor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AvgPoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl AvgPoolGeom {
    pub fn out_extent(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if self.stride == 0 || padded < self.kernel {
            None
        } else {
            Some((padded - self.kernel) / self.stride + 1)
        }
    }

    fn range(&self, o: usize, len: usize) -> std::ops::Range<usize> {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = start + self.kernel as isize;
        (start.max(0) as usize)..(end.min(len as isize).max(0) as usize)
    }
}

pub fn avg_pool2d<T: Element>(x: &Tensor<T>, geom: &AvgPoolGeom) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let (Some(ho), Some(wo)) = (geom.out_extent(h), geom.out_extent(w)) else {
        return Err(shape_err("avg_pool2d", format!("window {geom:?} does not fit {:?}", x.shape())));
    };
    let inv = T::of(1.0 / (geom.kernel * geom.kernel) as f64);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..][..h * w];
        let dst = &mut out.data_mut()[p * ho * wo..][..ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut s = T::zero();
                for ih in geom.range(oh, h) {
                    for iw in geom.range(ow, w) {
                        s += src[ih * w + iw];
                    }
                }
                dst[oh * wo + ow] = s * inv;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_backward<T: Element>(x_shape: [usize; 4], geom: &AvgPoolGeom, dout: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let [_, _, ho, wo] = dout.shape();
    let inv = T::of(1.0 / (geom.kernel * geom.kernel) as f64);
    let mut dx = Tensor::zeros(x_shape);
    for p in 0..n * c {
        let g = &dout.data()[p * ho * wo..][..ho * wo];
        let dst = &mut dx.data_mut()[p * h * w..][..h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let v = g[oh * wo + ow] * inv;
                for ih in geom.range(oh, h) {
                    for iw in geom.range(ow, w) {
                        dst[ih * w + iw] += v;
                    }
                }
            }
        }
    }
    dx
}
