//! Parameterized layers shared by the backbone, neck and head.

use std::collections::HashMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::Result;
use crate::ops::ConvGeom;
use crate::params::{InitSpec, ParamId, ParamStore, Role};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optional backward) pass: a fresh tape bound to a
/// parameter store.
pub struct Ctx<'p, T: Element> {
    pub tape: Tape<T>,
    pub params: &'p mut ParamStore<T>,
    pub mode: Mode,
    bound: HashMap<ParamId, Var>,
}

impl<'p, T: Element> Ctx<'p, T> {
    pub fn new(params: &'p mut ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            mode,
            bound: HashMap::new(),
        }
    }

    /// Records a parameter on the tape (once per pass).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.param_leaf(self.params.value(id).clone(), id);
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Back-propagates `loss` and adds parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let grads = self.tape.backward(loss)?;
        grads.accumulate_into(self.params);
        Ok(grads)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl Conv2d {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Self> {
        let cin_g = in_channels / geom.groups.max(1);
        let fan_in = cin_g * kernel.0 * kernel.1;
        let weight = store.register(
            &join(name, "weight"),
            [out_channels, cin_g, kernel.0, kernel.1],
            InitSpec::Kaiming { fan_in },
            Role::Weight,
        )?;
        let bias = if bias {
            Some(store.register(&join(name, "bias"), [1, out_channels, 1, 1], InitSpec::Zero, Role::Bias)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
            kernel,
        })
    }

    /// Square kernel with "same" padding for odd sizes.
    pub fn same<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::new(store, name, in_channels, out_channels, (k, k), ConvGeom::new(stride, k / 2), bias)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self> {
        let weight = store.register(
            &join(name, "weight"),
            [in_channels, out_channels, k, k],
            InitSpec::Kaiming { fan_in: out_channels * k * k },
            Role::Weight,
        )?;
        let bias = store.register(&join(name, "bias"), [1, out_channels, 1, 1], InitSpec::Zero, Role::Bias)?;
        Ok(ConvTranspose2d {
            weight,
            bias: Some(bias),
            geom: ConvGeom::new(stride, pad),
            out_pad,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv_transpose2d(x, w, b, self.geom, self.out_pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let shape = [1, channels, 1, 1];
        Ok(BatchNorm2d {
            gamma: store.register(&join(name, "gamma"), shape, InitSpec::Constant(1.0), Role::NormScale)?,
            beta: store.register(&join(name, "beta"), shape, InitSpec::Zero, Role::NormShift)?,
            running_mean: store.register(&join(name, "running_mean"), shape, InitSpec::Zero, Role::Statistic)?,
            running_var: store.register(
                &join(name, "running_var"),
                shape,
                InitSpec::Constant(1.0),
                Role::Statistic,
            )?,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Eval => {
                let rm = ctx.params.value(self.running_mean).clone();
                let rv = ctx.params.value(self.running_var).clone();
                ctx.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, self.eps)
            }
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                if stats.count > 0 {
                    let m = T::of(self.momentum);
                    let keep = T::one() - m;
                    let unbias = if stats.count > 1 {
                        T::of(stats.count as f64 / (stats.count - 1) as f64)
                    } else {
                        T::one()
                    };
                    let rm = &mut ctx.params.get_mut(self.running_mean).value;
                    for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                        *r = keep * *r + m * b;
                    }
                    let rv = &mut ctx.params.get_mut(self.running_var).value;
                    for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                        *r = keep * *r + m * b * unbias;
                    }
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
        eps: f64,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(crate::Error::Config(format!(
                "group norm over {channels} channels cannot use {groups} groups"
            )));
        }
        let shape = [1, channels, 1, 1];
        Ok(GroupNorm {
            groups,
            gamma: store.register(&join(name, "gamma"), shape, InitSpec::Constant(1.0), Role::NormScale)?,
            beta: store.register(&join(name, "beta"), shape, InitSpec::Zero, Role::NormShift)?,
            eps,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        ctx.tape.group_norm(x, self.groups, gamma, beta, self.eps)
    }
}

/// Convolution, batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct Cbr {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Cbr {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Cbr {
            conv: Conv2d::same(store, &join(name, "conv"), in_channels, out_channels, k, stride, false)?,
            bn: BatchNorm2d::new(store, &join(name, "bn"), out_channels)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}
