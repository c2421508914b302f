//! Activations, broadcasting arithmetic, layout ops and batched matmul.

use crate::error::{shape_err, Result};
use crate::tensor::{numel, Element, Shape, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Logistic function, kept strictly inside (0, 1) even where it saturates.
#[inline]
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Splits a shape around `axis` into (outer, len, inner) element counts.
fn around(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 3 {
        return Err(shape_err(op, format!("axis {axis} out of range for a 4-D tensor")));
    }
    Ok(())
}

/// Softmax along `axis` with max subtraction.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("softmax", axis)?;
    let (outer, len, inner) = around(x.shape(), axis);
    if len == 0 && x.numel() > 0 {
        return Err(shape_err("softmax", "softmax axis has zero extent"));
    }
    let mut y = Tensor::zeros(x.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| x.data()[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..len {
                let e = (x.data()[idx(k)] - mx).exp();
                y.data_mut()[idx(k)] = e;
                z += e;
            }
            for k in 0..len {
                y.data_mut()[idx(k)] /= z;
            }
        }
    }
    Ok(y)
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = around(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| y.data()[idx(k)] * dy.data()[idx(k)]).sum();
            for k in 0..len {
                let j = idx(k);
                dx.data_mut()[j] = y.data()[j] * (dy.data()[j] - dot);
            }
        }
    }
    dx
}

pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    "broadcast",
                    format!("{a:?} and {b:?} differ on axis {i} and neither extent is 1"),
                ))
            }
        };
    }
    Ok(out)
}

fn bstrides(shape: Shape) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        s[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    s
}

/// Applies `f` elementwise with singleton-axis broadcasting.
pub fn broadcast_zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(shape, data);
    }
    let (sa, sb) = (bstrides(a.shape()), bstrides(b.shape()));
    let mut out = Vec::with_capacity(numel(&shape));
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for h in 0..shape[2] {
                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..shape[3] {
                    out.push(f(a.data()[ba + w * sa[3]], b.data()[bb + w * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Sums `t` down onto `shape`, collapsing every axis where `shape` is 1.
pub fn reduce_to<T: Element>(t: &Tensor<T>, shape: Shape) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let st = t.shape();
    let so = bstrides(shape);
    let mut out = Tensor::zeros(shape);
    let mut i = 0;
    for n in 0..st[0] {
        for c in 0..st[1] {
            for h in 0..st[2] {
                let base = n * so[0] + c * so[1] + h * so[2];
                for w in 0..st[3] {
                    out.data_mut()[base + w * so[3]] += t.data()[i];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    check_axis("concat", axis)?;
    let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?.shape();
    let mut shape = first;
    shape[axis] = 0;
    for x in xs {
        let s = x.shape();
        for i in 0..4 {
            if i != axis && s[i] != first[i] {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} and {first:?} disagree on axis {i}"),
                ));
            }
        }
        shape[axis] += s[axis];
    }
    let (outer, total, inner) = around(shape, axis);
    let mut out = Tensor::zeros(shape);
    let mut offset = 0;
    for x in xs {
        let len = x.shape()[axis];
        for o in 0..outer {
            let src = &x.data()[o * len * inner..][..len * inner];
            out.data_mut()[(o * total + offset) * inner..][..len * inner].copy_from_slice(src);
        }
        offset += len;
    }
    Ok(out)
}

/// Copies `len` entries of `axis` starting at `start`.
pub fn slice<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis("slice", axis)?;
    let mut shape = x.shape();
    if start + len > shape[axis] {
        return Err(shape_err(
            "slice",
            format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, total, inner) = around(x.shape(), axis);
    shape[axis] = len;
    let mut out = Tensor::zeros(shape);
    for o in 0..outer {
        let src = &x.data()[(o * total + start) * inner..][..len * inner];
        out.data_mut()[o * len * inner..][..len * inner].copy_from_slice(src);
    }
    Ok(out)
}

/// Adds `dy` into the `[start, start+len)` window of a zero tensor of `shape`.
pub fn slice_backward<T: Element>(shape: Shape, axis: usize, start: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (outer, total, inner) = around(shape, axis);
    let len = dy.shape()[axis];
    let mut dx = Tensor::zeros(shape);
    for o in 0..outer {
        let src = &dy.data()[o * len * inner..][..len * inner];
        dx.data_mut()[(o * total + start) * inner..][..len * inner].copy_from_slice(src);
    }
    dx
}

pub fn split<T: Element>(x: &Tensor<T>, sizes: &[usize], axis: usize) -> Result<Vec<Tensor<T>>> {
    check_axis("split", axis)?;
    if sizes.iter().sum::<usize>() != x.shape()[axis] {
        return Err(shape_err(
            "split",
            format!("sizes {sizes:?} do not sum to axis {axis} of {:?}", x.shape()),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = slice(x, axis, start, len);
            start += len;
            part
        })
        .collect()
}

/// Matrix product over the last two axes for every (N, C) pair.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, p, k] = a.shape();
    let [bn, bc, bk, m] = b.shape();
    if n != bn || c != bc || k != bk {
        return Err(shape_err(
            "batched_matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros([n, c, p, m]);
    for i in 0..n * c {
        T::gemm(
            p,
            k,
            m,
            T::one(),
            &a.data()[i * p * k..][..p * k],
            k as isize,
            1,
            &b.data()[i * k * m..][..k * m],
            m as isize,
            1,
            T::zero(),
            &mut out.data_mut()[i * p * m..][..p * m],
            m as isize,
            1,
        );
    }
    Ok(out)
}

pub fn bmm_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, p, k] = a.shape();
    let m = b.shape()[3];
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for i in 0..n * c {
        let g = &dy.data()[i * p * m..][..p * m];
        // da = dy [p x m] @ b^T [m x k]
        T::gemm(
            p,
            m,
            k,
            T::one(),
            g,
            m as isize,
            1,
            &b.data()[i * k * m..][..k * m],
            1,
            m as isize,
            T::zero(),
            &mut da.data_mut()[i * p * k..][..p * k],
            k as isize,
            1,
        );
        // db = a^T [k x p] @ dy [p x m]
        T::gemm(
            k,
            p,
            m,
            T::one(),
            &a.data()[i * p * k..][..p * k],
            1,
            k as isize,
            g,
            m as isize,
            1,
            T::zero(),
            &mut db.data_mut()[i * k * m..][..k * m],
            m as isize,
            1,
        );
    }
    (da, db)
}
