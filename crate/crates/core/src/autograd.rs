//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every forward call records its output value plus whatever the backward
//! kernel needs. `Tape::backward` replays the records in reverse exactly once.

use crate::error::{shape_err, Error, Result};
use crate::ops::conv::{self, ConvGeom};
use crate::ops::elementwise as ew;
use crate::ops::norm::{self, BatchStats, NormCache};
use crate::ops::pool::{self, AvgPoolGeom, PoolAxis};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// FLOP charge of a recorded op under the `FLOPs = 2 x MACs` convention
/// (elementwise, pooling and normalization ops cost one per output element).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCost {
    pub flops: u64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Pool { x: Var, axis: PoolAxis },
    GlobalAvgPool { x: Var },
    AvgPool2d { x: Var, geom: AvgPoolGeom },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T>, train: bool },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: NormCache<T> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: T },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Bmm { a: Var, b: Var },
    Reshape { x: Var },
    WeightedSum { x: Var, weights: Tensor<T> },
    /// Scalar output whose input gradients were computed during forward.
    Fused { inputs: Vec<(Var, Tensor<T>)> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    cost: OpCost,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Total FLOPs of every recorded op.
    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.cost.flops).sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, flops: u64) -> Result<Var> {
        if self.consumed {
            return Err(Error::Usage("cannot record on a tape that was already replayed".into()));
        }
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = self.inputs_of(&op).iter().all(|v| self.nodes[v.0].value.is_finite());
            assert!(!inputs_finite, "forward op {op:?} produced non-finite output from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
            cost: OpCost { flops },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Pool { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::AvgPool2d { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x, .. }
            | Op::Scale { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } | Op::GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Add { a, b } | Op::Mul { a, b } | Op::Bmm { a, b } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Fused { inputs } => inputs.iter().map(|(v, _)| *v).collect(),
        }
    }

    /// Records a constant or input tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, 0).expect("leaf on live tape")
    }

    /// Records a parameter value; its gradient is routed back to `id`.
    pub fn param_leaf(&mut self, value: Tensor<T>, id: ParamId) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let [_, cin_g, kh, kw] = self.shape(w);
        let flops = 2 * (out.numel() * cin_g * kh * kw) as u64;
        self.push(out, Op::Conv2d { x, w, b, geom }, flops)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_pad: usize,
    ) -> Result<Var> {
        let out = conv::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
            out_pad,
        )?;
        // Charged on output extents: 2 * Cout * Cin * kh * kw * H' * W'.
        let [cin, _, kh, kw] = self.shape(w);
        let flops = 2 * (out.numel() * cin * kh * kw) as u64;
        self.push(out, Op::ConvTranspose2d { x, w, b, geom }, flops)
    }

    pub fn pool(&mut self, x: Var, axis: PoolAxis) -> Result<Var> {
        let out = pool::pool_directional(self.value(x), axis)?;
        let flops = out.numel() as u64;
        self.push(out, Op::Pool { x, axis }, flops)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avg_pool(self.value(x))?;
        let flops = out.numel() as u64;
        self.push(out, Op::GlobalAvgPool { x }, flops)
    }

    pub fn avg_pool2d(&mut self, x: Var, geom: AvgPoolGeom) -> Result<Var> {
        let out = pool::avg_pool2d(self.value(x), &geom)?;
        let flops = out.numel() as u64;
        self.push(out, Op::AvgPool2d { x, geom }, flops)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ew::relu(self.value(x));
        let flops = out.numel() as u64;
        self.push(out, Op::Relu { x }, flops)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ew::sigmoid(self.value(x));
        let flops = out.numel() as u64;
        self.push(out, Op::Sigmoid { x }, flops)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ew::softmax(self.value(x), axis)?;
        let flops = out.numel() as u64;
        self.push(out, Op::Softmax { x, axis }, flops)
    }

    /// Batch norm with batch statistics; the statistics are returned so the
    /// caller can update its running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (out, cache, stats) =
            norm::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let flops = out.numel() as u64;
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, cache, train: true }, flops)?;
        Ok((v, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (out, cache) = norm::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let flops = out.numel() as u64;
        self.push(out, Op::BatchNorm { x, gamma, beta, cache, train: false }, flops)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = norm::group_norm(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        let flops = out.numel() as u64;
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, cache }, flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ew::broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        let flops = out.numel() as u64;
        self.push(out, Op::Add { a, b }, flops)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ew::broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        let flops = out.numel() as u64;
        self.push(out, Op::Mul { a, b }, flops)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::of(k);
        let out = self.value(x).map(|v| v * k);
        let flops = out.numel() as u64;
        self.push(out, Op::Scale { x, k }, flops)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ew::concat(&vals, axis)?;
        self.push(out, Op::Concat { xs: xs.to_vec(), axis }, 0)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ew::slice(self.value(x), axis, start, len)?;
        self.push(out, Op::Slice { x, axis, start }, 0)
    }

    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let extent = self.shape(x).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return Err(shape_err(
                "split",
                format!("sizes {sizes:?} do not sum to axis {axis} of {:?}", self.shape(x)),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ew::bmm(self.value(a), self.value(b))?;
        let k = self.shape(a)[3];
        let flops = 2 * (out.numel() * k) as u64;
        self.push(out, Op::Bmm { a, b }, flops)
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape { x }, 0)
    }

    /// Scalar `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(shape_err(
                "weighted_sum",
                format!("weights {:?} vs input {:?}", weights.shape(), self.shape(x)),
            ));
        }
        let s: T = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::full([1, 1, 1, 1], s), Op::WeightedSum { x, weights }, 0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let w = Tensor::full(self.shape(x), T::one());
        self.weighted_sum(x, w)
    }

    /// Records a scalar whose gradient with respect to each input has already
    /// been computed (used by fused loss kernels).
    pub fn fused_scalar(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.shape() != self.shape(*v) {
                return Err(shape_err(
                    "fused_scalar",
                    format!("gradient {:?} vs input {:?}", g.shape(), self.shape(*v)),
                ));
            }
        }
        self.push(Tensor::full([1, 1, 1, 1], value), Op::Fused { inputs }, 0)
    }

    /// Replays the tape backwards from the scalar `loss`. A tape can be
    /// replayed once; afterwards it rejects both replay and recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("backward called on a consumed tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let count = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let params = self.nodes.iter().map(|n| n.param).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let r = conv::conv2d_backward(val(*x), val(*w), b.is_some(), geom, g);
                accumulate(grads, *x, r.dx);
                accumulate(grads, *w, r.dw);
                if let (Some(b), Some(db)) = (b, r.db) {
                    accumulate(grads, *b, db.reshape(val(*b).shape()).expect("bias grad"));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let r = conv::conv_transpose2d_backward(val(*x), val(*w), b.is_some(), geom, g);
                accumulate(grads, *x, r.dx);
                accumulate(grads, *w, r.dw);
                if let (Some(b), Some(db)) = (b, r.db) {
                    accumulate(grads, *b, db.reshape(val(*b).shape()).expect("bias grad"));
                }
            }
            Op::Pool { x, axis } => {
                accumulate(grads, *x, pool::pool_directional_backward(val(*x).shape(), *axis, g));
            }
            Op::GlobalAvgPool { x } => {
                accumulate(grads, *x, pool::global_avg_pool_backward(val(*x).shape(), g));
            }
            Op::AvgPool2d { x, geom } => {
                accumulate(grads, *x, pool::avg_pool2d_backward(val(*x).shape(), geom, g));
            }
            Op::Relu { x } => accumulate(grads, *x, ew::relu_backward(val(*x), g)),
            Op::Sigmoid { x } => accumulate(grads, *x, ew::sigmoid_backward(&node.value, g)),
            Op::Softmax { x, axis } => {
                accumulate(grads, *x, ew::softmax_backward(&node.value, g, *axis));
            }
            Op::BatchNorm { x, gamma, beta, cache, train } => {
                let r = if *train {
                    norm::batch_norm_train_backward(g, val(*gamma), cache)
                } else {
                    norm::batch_norm_eval_backward(g, val(*gamma), cache)
                };
                accumulate(grads, *x, r.dx);
                accumulate(grads, *gamma, r.dgamma.reshape(val(*gamma).shape()).expect("gamma"));
                accumulate(grads, *beta, r.dbeta.reshape(val(*beta).shape()).expect("beta"));
            }
            Op::GroupNorm { x, gamma, beta, groups, cache } => {
                let r = norm::group_norm_backward(g, *groups, val(*gamma), cache);
                accumulate(grads, *x, r.dx);
                accumulate(grads, *gamma, r.dgamma.reshape(val(*gamma).shape()).expect("gamma"));
                accumulate(grads, *beta, r.dbeta.reshape(val(*beta).shape()).expect("beta"));
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, ew::reduce_to(g, val(*a).shape()));
                accumulate(grads, *b, ew::reduce_to(g, val(*b).shape()));
            }
            Op::Mul { a, b } => {
                let ga = ew::broadcast_zip(g, val(*b), |x, y| x * y).expect("broadcast");
                let gb = ew::broadcast_zip(g, val(*a), |x, y| x * y).expect("broadcast");
                accumulate(grads, *a, ew::reduce_to(&ga, val(*a).shape()));
                accumulate(grads, *b, ew::reduce_to(&gb, val(*b).shape()));
            }
            Op::Scale { x, k } => accumulate(grads, *x, g.map(|v| v * *k)),
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    accumulate(grads, x, ew::slice(g, *axis, start, len).expect("concat grad"));
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                accumulate(grads, *x, ew::slice_backward(val(*x).shape(), *axis, *start, g));
            }
            Op::Bmm { a, b } => {
                let (da, db) = ew::bmm_backward(val(*a), val(*b), g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, g.clone().reshape(val(*x).shape()).expect("reshape grad"));
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                accumulate(grads, *x, weights.map(|w| w * s));
            }
            Op::Fused { inputs } => {
                let s = g.data()[0];
                for (v, dg) in inputs {
                    accumulate(grads, *v, dg.map(|w| w * s));
                }
            }
        }
    }

    /// Per-op FLOP charges, in recording order.
    pub fn costs(&self) -> impl Iterator<Item = OpCost> + '_ {
        self.nodes.iter().map(|n| n.cost)
    }

    /// Which side of zero every relu input fell on, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of leaf values produced by one backward replay.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Option<ParamId>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter-leaf gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(id)) = (g, p) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }
}
