//! Tape-free tensor kernels. Each forward kernel has a matching backward
//! kernel; the autograd tape composes them.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;

pub use conv::ConvGeom;
pub use pool::{AvgPoolGeom, PoolAxis};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Shape after folding `groups` channel groups into the batch axis.
pub fn grouped_shape(shape: Shape, groups: usize) -> Result<Shape> {
    let [n, c, h, w] = shape;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "{c} channels cannot be split into {groups} groups"
        )));
    }
    Ok([n * groups, c / groups, h, w])
}

/// `[N, C, H, W] -> [N*G, C/G, H, W]`; group `g` of sample `n` holds channels
/// `g*C/G .. (g+1)*C/G`. Pure relabelling of the row-major buffer.
pub fn reshape_group<T: Element>(x: Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let shape = grouped_shape(x.shape(), groups)?;
    x.reshape(shape)
}

pub fn ungroup<T: Element>(x: Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let [ng, cg, h, w] = x.shape();
    if groups == 0 || ng % groups != 0 {
        return Err(Error::Config(format!(
            "batch extent {ng} is not a multiple of {groups} groups"
        )));
    }
    x.reshape([ng / groups, cg * groups, h, w])
}
