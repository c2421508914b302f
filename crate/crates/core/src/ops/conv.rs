//! Convolution kernels built on im2col/col2im and a strided gemm.
//!
//! Weight layouts follow the usual conventions: `[Cout, Cin/groups, kh, kw]`
//! for convolution and `[Cin, Cout, kh, kw]` for transposed convolution.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Stride, zero padding and channel grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom {
            stride,
            pad_h: pad,
            pad_w: pad,
            groups: 1,
        }
    }

    pub fn with_pad(stride: usize, pad_h: usize, pad_w: usize) -> Self {
        ConvGeom {
            stride,
            pad_h,
            pad_w,
            groups: 1,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        if self.groups == 0 {
            return Err(Error::Config("convolution groups must be positive".into()));
        }
        Ok(())
    }
}

/// Output extent of a strided window sweep, or `None` when the window does
/// not fit even once.
fn conv_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

pub fn conv2d_out_shape(x: Shape, w: Shape, geom: &ConvGeom) -> Result<Shape> {
    geom.validate()?;
    let [n, cin, h, wd] = x;
    let [cout, cin_g, kh, kw] = w;
    if cin_g * geom.groups != cin || cout % geom.groups != 0 {
        return Err(shape_err(
            "conv2d",
            format!("input {x:?} incompatible with weight {w:?} at groups={}", geom.groups),
        ));
    }
    let ho = conv_extent(h, geom.pad_h, kh, geom.stride);
    let wo = conv_extent(wd, geom.pad_w, kw, geom.stride);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok([n, cout, ho, wo]),
        _ => Err(shape_err(
            "conv2d",
            format!("kernel {w:?} does not fit input {x:?} with padding ({}, {})", geom.pad_h, geom.pad_w),
        )),
    }
}

pub fn conv_transpose2d_out_shape(x: Shape, w: Shape, geom: &ConvGeom, out_pad: usize) -> Result<Shape> {
    geom.validate()?;
    if geom.groups != 1 {
        return Err(Error::Config("grouped transposed convolution is not supported".into()));
    }
    let [n, cin, h, wd] = x;
    let [wcin, cout, kh, kw] = w;
    if wcin != cin {
        return Err(shape_err(
            "conv_transpose2d",
            format!("input {x:?} incompatible with weight {w:?}"),
        ));
    }
    if out_pad >= geom.stride {
        return Err(Error::Config(format!(
            "output padding {out_pad} must be smaller than stride {}",
            geom.stride
        )));
    }
    let extent = |len: usize, pad: usize, k: usize| -> Option<usize> {
        if len == 0 {
            return None;
        }
        let full = (len - 1) * geom.stride + k + out_pad;
        full.checked_sub(2 * pad).filter(|&v| v > 0)
    };
    match (extent(h, geom.pad_h, kh), extent(wd, geom.pad_w, kw)) {
        (Some(ho), Some(wo)) => Ok([n, cout, ho, wo]),
        _ => Err(shape_err(
            "conv_transpose2d",
            format!("input {x:?} with kernel {w:?} yields a non-positive output size"),
        )),
    }
}

struct Window {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
}

impl Window {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Source row for output row `oh` and kernel row `i`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            None
        }
    }

    fn im2col<T: Element>(&self, img: &[T], col: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            let plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oh in 0..self.out_h {
                        let drow = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        match self.src(oh, i, self.pad_h, self.in_h) {
                            None => drow.fill(T::zero()),
                            Some(ih) => {
                                let srow = &plane[ih * self.in_w..(ih + 1) * self.in_w];
                                for (ow, d) in drow.iter_mut().enumerate() {
                                    *d = match self.src(ow, j, self.pad_w, self.in_w) {
                                        Some(iw) => srow[iw],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back into an image buffer.
    fn col2im<T: Element>(&self, col: &[T], img: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oh in 0..self.out_h {
                        let Some(ih) = self.src(oh, i, self.pad_h, self.in_h) else {
                            continue;
                        };
                        for ow in 0..self.out_w {
                            if let Some(iw) = self.src(ow, j, self.pad_w, self.in_w) {
                                plane[ih * self.in_w + iw] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major gemm on contiguous matrices, optionally transposing either operand.
#[allow(clippy::too_many_arguments)]
fn mm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Result<Tensor<T>> {
    let out_shape = conv2d_out_shape(x.shape(), w.shape(), geom)?;
    if let Some(b) = b {
        if b.numel() != out_shape[1] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} does not match {} output channels", b.shape(), out_shape[1]),
            ));
        }
    }
    let [n, cin, h, wd] = x.shape();
    let [_, cout, ho, wo] = out_shape;
    let [_, cin_g, kh, kw] = w.shape();
    let g = geom.groups;
    let cout_g = cout / g;
    let win = Window {
        channels: cin_g,
        in_h: h,
        in_w: wd,
        kh,
        kw,
        out_h: ho,
        out_w: wo,
        stride: geom.stride,
        pad_h: geom.pad_h,
        pad_w: geom.pad_w,
    };
    let mut out = Tensor::zeros(out_shape);
    let identity = win.is_identity();
    let mut col = vec![T::zero(); if identity { 0 } else { win.col_rows() * win.col_cols() }];
    let in_plane = cin_g * h * wd;
    let out_plane = cout_g * ho * wo;
    let w_group = cout_g * win.col_rows();
    for ni in 0..n {
        for gi in 0..g {
            let img = &x.data()[(ni * cin + gi * cin_g) * h * wd..][..in_plane];
            let cm: &[T] = if identity {
                img
            } else {
                win.im2col(img, &mut col);
                &col
            };
            let dst = &mut out.data_mut()[(ni * cout + gi * cout_g) * ho * wo..][..out_plane];
            mm(
                cout_g,
                win.col_rows(),
                win.col_cols(),
                &w.data()[gi * w_group..][..w_group],
                false,
                cm,
                false,
                dst,
                false,
            );
        }
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data());
    }
    Ok(out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    geom: &ConvGeom,
    dout: &Tensor<T>,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, ho, wo] = dout.shape();
    let [_, cin_g, kh, kw] = w.shape();
    let g = geom.groups;
    let cout_g = cout / g;
    let win = Window {
        channels: cin_g,
        in_h: h,
        in_w: wd,
        kh,
        kw,
        out_h: ho,
        out_w: wo,
        stride: geom.stride,
        pad_h: geom.pad_h,
        pad_w: geom.pad_w,
    };
    let identity = win.is_identity();
    let rows = win.col_rows();
    let cols = win.col_cols();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut col = vec![T::zero(); if identity { 0 } else { rows * cols }];
    let mut dcol = vec![T::zero(); rows * cols];
    let in_plane = cin_g * h * wd;
    let out_plane = cout_g * ho * wo;
    let w_group = cout_g * rows;
    for ni in 0..n {
        for gi in 0..g {
            let img_off = (ni * cin + gi * cin_g) * h * wd;
            let img = &x.data()[img_off..][..in_plane];
            let go = &dout.data()[(ni * cout + gi * cout_g) * ho * wo..][..out_plane];
            let cm: &[T] = if identity {
                img
            } else {
                win.im2col(img, &mut col);
                &col
            };
            // dW_g += dOut_g [cout_g x cols] @ col^T [cols x rows]
            mm(
                cout_g,
                cols,
                rows,
                go,
                false,
                cm,
                true,
                &mut dw.data_mut()[gi * w_group..][..w_group],
                true,
            );
            // dcol = W_g^T [rows x cout_g] @ dOut_g [cout_g x cols]
            let wg = &w.data()[gi * w_group..][..w_group];
            if identity {
                let dst = &mut dx.data_mut()[img_off..][..in_plane];
                mm(rows, cout_g, cols, wg, true, go, false, dst, true);
            } else {
                mm(rows, cout_g, cols, wg, true, go, false, &mut dcol, false);
                win.col2im(&dcol, &mut dx.data_mut()[img_off..][..in_plane]);
            }
        }
    }
    let db = has_bias.then(|| channel_sums(dout));
    ConvGrads { dx, dw, db }
}

pub fn conv_transpose2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: &ConvGeom,
    out_pad: usize,
) -> Result<Tensor<T>> {
    let out_shape = conv_transpose2d_out_shape(x.shape(), w.shape(), geom, out_pad)?;
    if let Some(b) = b {
        if b.numel() != out_shape[1] {
            return Err(shape_err(
                "conv_transpose2d",
                format!("bias {:?} does not match {} output channels", b.shape(), out_shape[1]),
            ));
        }
    }
    let [n, cin, h, wd] = x.shape();
    let [_, cout, ho, wo] = out_shape;
    let [_, _, kh, kw] = w.shape();
    // The transposed convolution is the adjoint of a convolution that maps
    // the (ho, wo) output image onto the (h, wd) input grid.
    let win = Window {
        channels: cout,
        in_h: ho,
        in_w: wo,
        kh,
        kw,
        out_h: h,
        out_w: wd,
        stride: geom.stride,
        pad_h: geom.pad_h,
        pad_w: geom.pad_w,
    };
    let rows = win.col_rows();
    let cols = win.col_cols();
    let mut out = Tensor::zeros(out_shape);
    let mut col = vec![T::zero(); rows * cols];
    for ni in 0..n {
        let xi = &x.data()[ni * cin * h * wd..][..cin * h * wd];
        // col [rows x cols] = W^T [rows x cin] @ x [cin x cols]
        mm(rows, cin, cols, w.data(), true, xi, false, &mut col, false);
        win.col2im(&col, &mut out.data_mut()[ni * cout * ho * wo..][..cout * ho * wo]);
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data());
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    geom: &ConvGeom,
    dout: &Tensor<T>,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, ho, wo] = dout.shape();
    let [_, _, kh, kw] = w.shape();
    let win = Window {
        channels: cout,
        in_h: ho,
        in_w: wo,
        kh,
        kw,
        out_h: h,
        out_w: wd,
        stride: geom.stride,
        pad_h: geom.pad_h,
        pad_w: geom.pad_w,
    };
    let rows = win.col_rows();
    let cols = win.col_cols();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut col = vec![T::zero(); rows * cols];
    for ni in 0..n {
        let go = &dout.data()[ni * cout * ho * wo..][..cout * ho * wo];
        win.im2col(go, &mut col);
        let xi = &x.data()[ni * cin * h * wd..][..cin * h * wd];
        // dx [cin x cols] = W [cin x rows] @ col [rows x cols]
        mm(
            cin,
            rows,
            cols,
            w.data(),
            false,
            &col,
            false,
            &mut dx.data_mut()[ni * cin * h * wd..][..cin * h * wd],
            false,
        );
        // dW [cin x rows] += x [cin x cols] @ col^T [cols x rows]
        mm(cin, cols, rows, xi, false, &col, true, dw.data_mut(), true);
    }
    let db = has_bias.then(|| channel_sums(dout));
    ConvGrads { dx, dw, db }
}

fn add_channel_bias<T: Element>(out: &mut Tensor<T>, bias: &[T]) {
    let [n, c, h, w] = out.shape();
    let plane = h * w;
    let data = out.data_mut();
    for ni in 0..n {
        for (ci, &bv) in bias.iter().enumerate().take(c) {
            for v in &mut data[(ni * c + ci) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

/// Sum over batch and spatial axes, shaped `[1, C, 1, 1]`.
pub(crate) fn channel_sums<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for ni in 0..n {
        for ci in 0..c {
            let s: T = t.data()[(ni * c + ci) * plane..][..plane].iter().copied().sum();
            out.data_mut()[ci] += s;
        }
    }
    out
}
