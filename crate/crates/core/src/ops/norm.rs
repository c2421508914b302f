//! Batch and group normalization.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Values saved by a normalization forward pass for its backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    /// One entry per channel (batch norm) or per (sample, group) (group norm).
    pub inv_std: Vec<T>,
}

pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance of the batch.
    pub var: Vec<T>,
    pub count: usize,
}

fn check_affine<T: Element>(op: &'static str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(shape_err(
            op,
            format!("{c} channels but gamma {:?} / beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

/// Normalizes with the batch's own statistics. Returns the output, the
/// backward cache and the statistics used.
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>, BatchStats<T>)> {
    let [n, c, h, w] = x.shape();
    check_affine("batch_norm", c, gamma, beta)?;
    let plane = h * w;
    let count = n * plane;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    if count > 0 {
        let inv_count = T::of(1.0 / count as f64);
        for ci in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                s += x.data()[(ni * c + ci) * plane..][..plane].iter().copied().sum::<T>();
            }
            let m = s * inv_count;
            let mut sq = T::zero();
            for ni in 0..n {
                for &v in &x.data()[(ni * c + ci) * plane..][..plane] {
                    sq += (v - m) * (v - m);
                }
            }
            mean[ci] = m;
            var[ci] = sq * inv_count;
            inv_std[ci] = T::one() / (var[ci] + T::of(eps)).sqrt();
        }
    }
    let (y, xhat) = affine_per_channel(x, gamma, beta, &mean, &inv_std);
    Ok((y, NormCache { xhat, inv_std }, BatchStats { mean, var, count }))
}

/// Normalizes with fixed running statistics.
pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = x.shape()[1];
    check_affine("batch_norm", c, gamma, beta)?;
    check_affine("batch_norm", c, running_mean, running_var)?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + T::of(eps)).sqrt())
        .collect();
    let (y, xhat) = affine_per_channel(x, gamma, beta, running_mean.data(), &inv_std);
    Ok((y, NormCache { xhat, inv_std }))
}

fn affine_per_channel<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let (g, b, m, s) = (gamma.data()[ci], beta.data()[ci], mean[ci], inv_std[ci]);
            for i in off..off + plane {
                let xh = (x.data()[i] - m) * s;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    (y, xhat)
}

pub struct AffineNormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

fn affine_param_grads<T: Element>(dy: &Tensor<T>, xhat: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dy.shape();
    let plane = h * w;
    let mut dgamma = Tensor::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1]);
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let mut sg = T::zero();
            let mut sb = T::zero();
            for i in off..off + plane {
                sg += dy.data()[i] * xhat.data()[i];
                sb += dy.data()[i];
            }
            dgamma.data_mut()[ci] += sg;
            dbeta.data_mut()[ci] += sb;
        }
    }
    (dgamma, dbeta)
}

pub fn batch_norm_train_backward<T: Element>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
) -> AffineNormGrads<T> {
    let [n, c, h, w] = dy.shape();
    let plane = h * w;
    let count = n * plane;
    let (dgamma, dbeta) = affine_param_grads(dy, &cache.xhat);
    let mut dx = Tensor::zeros(dy.shape());
    if count > 0 {
        let m = T::of(count as f64);
        for ci in 0..c {
            let k = gamma.data()[ci] * cache.inv_std[ci] / m;
            let (sb, sg) = (dbeta.data()[ci], dgamma.data()[ci]);
            for ni in 0..n {
                let off = (ni * c + ci) * plane;
                for i in off..off + plane {
                    dx.data_mut()[i] = k * (m * dy.data()[i] - sb - cache.xhat.data()[i] * sg);
                }
            }
        }
    }
    AffineNormGrads { dx, dgamma, dbeta }
}

pub fn batch_norm_eval_backward<T: Element>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
) -> AffineNormGrads<T> {
    let [n, c, h, w] = dy.shape();
    let plane = h * w;
    let (dgamma, dbeta) = affine_param_grads(dy, &cache.xhat);
    let mut dx = Tensor::zeros(dy.shape());
    for ni in 0..n {
        for ci in 0..c {
            let k = gamma.data()[ci] * cache.inv_std[ci];
            let off = (ni * c + ci) * plane;
            for i in off..off + plane {
                dx.data_mut()[i] = k * dy.data()[i];
            }
        }
    }
    AffineNormGrads { dx, dgamma, dbeta }
}

pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let [n, c, h, w] = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} channels are not divisible into {groups} groups")));
    }
    check_affine("group_norm", c, gamma, beta)?;
    let span = c / groups * h * w;
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); n * groups];
    if span == 0 {
        return Ok((y, NormCache { xhat, inv_std }));
    }
    let inv_span = T::of(1.0 / span as f64);
    for (gi, chunk) in x.data().chunks_exact(span).enumerate() {
        let mean = chunk.iter().copied().sum::<T>() * inv_span;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_span;
        let s = T::one() / (var + T::of(eps)).sqrt();
        inv_std[gi] = s;
        let base = gi * span;
        let c0 = (gi % groups) * (c / groups);
        for (j, &v) in chunk.iter().enumerate() {
            let ci = c0 + j / plane;
            let xh = (v - mean) * s;
            xhat.data_mut()[base + j] = xh;
            y.data_mut()[base + j] = gamma.data()[ci] * xh + beta.data()[ci];
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

pub fn group_norm_backward<T: Element>(
    dy: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
) -> AffineNormGrads<T> {
    let [_, c, h, w] = dy.shape();
    let span = c / groups * h * w;
    let plane = h * w;
    let (dgamma, dbeta) = affine_param_grads(dy, &cache.xhat);
    let mut dx = Tensor::zeros(dy.shape());
    if span == 0 {
        return AffineNormGrads { dx, dgamma, dbeta };
    }
    let m = T::of(span as f64);
    let mut dxhat = vec![T::zero(); span];
    for gi in 0..dy.numel() / span {
        let base = gi * span;
        let c0 = (gi % groups) * (c / groups);
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..span {
            let d = dy.data()[base + j] * gamma.data()[c0 + j / plane];
            dxhat[j] = d;
            s1 += d;
            s2 += d * cache.xhat.data()[base + j];
        }
        let k = cache.inv_std[gi] / m;
        for j in 0..span {
            dx.data_mut()[base + j] = k * (m * dxhat[j] - s1 - cache.xhat.data()[base + j] * s2);
        }
    }
    AffineNormGrads { dx, dgamma, dbeta }
}
