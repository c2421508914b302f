//! Adaptive screening pyramid network: lightweight spatial screening,
//! selective feature aggregation and the top-down pyramid over S3/S4/S5.
//!
//! The screening step is a pluggable slot so other lightweight attention
//! modules can be swapped in for comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::mrdcb::Features;
use crate::nn::{join, Conv2d, ConvTranspose2d, Ctx};
use crate::ops::{AvgPoolGeom, ConvGeom, PoolAxis};
use crate::params::{InitSpec, ParamId, ParamStore, Role};
use crate::tensor::{Element, Tensor};

/// Attention modules that can occupy the screening slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Lssm,
    Se,
    Sge,
    Caa,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::Lssm,
        AttentionKind::Se,
        AttentionKind::Sge,
        AttentionKind::Caa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Lssm => "lssm",
            AttentionKind::Se => "se",
            AttentionKind::Sge => "sge",
            AttentionKind::Caa => "caa",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AttentionKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown attention kind {s:?}; registered kinds: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AspnConfig {
    /// Pyramid width C_f.
    pub width: usize,
    pub attention: AttentionKind,
    /// Kernel of the strip convolutions in LSSM (1 = pointwise).
    pub lssm_kernel: usize,
    pub se_reduction: usize,
    /// Upper bound on SGE groups; the largest divisor of C not above it is used.
    pub sge_groups: usize,
    pub caa_kernel: usize,
}

impl Default for AspnConfig {
    fn default() -> Self {
        AspnConfig {
            width: 64,
            attention: AttentionKind::Lssm,
            lssm_kernel: 1,
            se_reduction: 16,
            sge_groups: 8,
            caa_kernel: 11,
        }
    }
}

impl AspnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("pyramid width must be at least 1".into()));
        }
        for (name, k) in [("lssm_kernel", self.lssm_kernel), ("caa_kernel", self.caa_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.se_reduction == 0 || self.sge_groups == 0 {
            return Err(Error::Config("SE reduction and SGE groups must be positive".into()));
        }
        Ok(())
    }
}

/// Directional pooled gating: `Y = X * sigma(conv_h(pool_w X)) * sigma(conv_w(pool_h X))`.
#[derive(Clone, Debug)]
pub struct LssmBlock {
    pub channels: usize,
    /// Mixes channels along the `[H, 1]` strip.
    pub conv_h: Conv2d,
    /// Mixes channels along the `[1, W]` strip.
    pub conv_w: Conv2d,
}

/// Gates produced by one LSSM pass.
#[derive(Clone, Copy, Debug)]
pub struct LssmTrace {
    pub gate_h: Var,
    pub gate_w: Var,
}

impl LssmBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let pad = kernel / 2;
        Ok(LssmBlock {
            channels,
            conv_h: Conv2d::new(
                store,
                &join(name, "conv_h"),
                channels,
                channels,
                (kernel, 1),
                ConvGeom::with_pad(1, pad, 0),
                true,
            )?,
            conv_w: Conv2d::new(
                store,
                &join(name, "conv_w"),
                channels,
                channels,
                (1, kernel),
                ConvGeom::with_pad(1, 0, pad),
                true,
            )?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_traced(ctx, x).map(|(y, _)| y)
    }

    pub fn forward_traced<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, LssmTrace)> {
        let ph = ctx.tape.pool(x, PoolAxis::Width)?;
        let pw = ctx.tape.pool(x, PoolAxis::Height)?;
        let ch = self.conv_h.forward(ctx, ph)?;
        let cw = self.conv_w.forward(ctx, pw)?;
        let t = &mut ctx.tape;
        let gate_h = t.sigmoid(ch)?;
        let gate_w = t.sigmoid(cw)?;
        let y = t.mul(x, gate_h)?;
        let y = t.mul(y, gate_w)?;
        Ok((y, LssmTrace { gate_h, gate_w }))
    }
}

/// Squeeze-and-excitation: global pool, bottleneck of two 1x1 convs, sigmoid
/// channel scale.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl SeBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(SeBlock {
            reduce: Conv2d::same(store, &join(name, "reduce"), channels, hidden, 1, 1, true)?,
            expand: Conv2d::same(store, &join(name, "expand"), hidden, channels, 1, 1, true)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.global_avg_pool(x)?;
        let s = self.reduce.forward(ctx, s)?;
        let s = ctx.tape.relu(s)?;
        let s = self.expand.forward(ctx, s)?;
        let s = ctx.tape.sigmoid(s)?;
        ctx.tape.mul(x, s)
    }
}

/// Spatial group-wise enhancement. Within each channel group the similarity
/// between every position and the group's pooled descriptor is standardized
/// over space, scaled by a learned per-group affine and used as a sigmoid
/// spatial gate.
#[derive(Clone, Debug)]
pub struct SgeBlock {
    pub groups: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SgeBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, max_groups: usize) -> Result<Self> {
        let groups = (1..=max_groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Ok(SgeBlock {
            groups,
            weight: store.register(&join(name, "weight"), [1, groups, 1, 1], InitSpec::Zero, Role::Weight)?,
            bias: store.register(&join(name, "bias"), [1, groups, 1, 1], InitSpec::Constant(1.0), Role::Bias)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [n, c, h, w] = ctx.tape.shape(x);
        let g = self.groups;
        let cg = c / g;
        let weight = ctx.param(self.weight);
        let bias = ctx.param(self.bias);
        let t = &mut ctx.tape;
        let xg = t.reshape(x, [n * g, cg, h, w])?;
        let pooled = t.global_avg_pool(xg)?;
        let sim = t.mul(xg, pooled)?;
        // Channel sum via a fixed all-ones 1x1 kernel.
        let ones = t.leaf(Tensor::full([1, cg, 1, 1], T::one()));
        let sim = t.conv2d(sim, ones, None, ConvGeom::new(1, 0))?;
        let unit = t.leaf(Tensor::full([1, 1, 1, 1], T::one()));
        let zero = t.leaf(Tensor::zeros([1, 1, 1, 1]));
        let sim = t.group_norm(sim, 1, unit, zero, 1e-5)?;
        let sim = t.reshape(sim, [n, g, h, w])?;
        let sim = t.mul(sim, weight)?;
        let sim = t.add(sim, bias)?;
        let sim = t.reshape(sim, [n * g, 1, h, w])?;
        let gate = t.sigmoid(sim)?;
        let y = t.mul(xg, gate)?;
        t.reshape(y, [n, c, h, w])
    }
}

/// Context anchor attention: 7x7 average pooling, 1x1 conv, a pair of
/// depthwise strip convs (1xk then kx1), 1x1 conv and a sigmoid gate.
/// The normalization/activation wrappers of the original design are omitted.
#[derive(Clone, Debug)]
pub struct CaaBlock {
    pub conv1: Conv2d,
    pub strip_w: Conv2d,
    pub strip_h: Conv2d,
    pub conv2: Conv2d,
}

impl CaaBlock {
    pub const POOL: AvgPoolGeom = AvgPoolGeom {
        kernel: 7,
        stride: 1,
        pad: 3,
    };

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let pad = kernel / 2;
        Ok(CaaBlock {
            conv1: Conv2d::same(store, &join(name, "conv1"), channels, channels, 1, 1, true)?,
            strip_w: Conv2d::new(
                store,
                &join(name, "strip_w"),
                channels,
                channels,
                (1, kernel),
                ConvGeom::with_pad(1, 0, pad).grouped(channels),
                true,
            )?,
            strip_h: Conv2d::new(
                store,
                &join(name, "strip_h"),
                channels,
                channels,
                (kernel, 1),
                ConvGeom::with_pad(1, pad, 0).grouped(channels),
                true,
            )?,
            conv2: Conv2d::same(store, &join(name, "conv2"), channels, channels, 1, 1, true)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = ctx.tape.avg_pool2d(x, Self::POOL)?;
        let a = self.conv1.forward(ctx, a)?;
        let a = self.strip_w.forward(ctx, a)?;
        let a = self.strip_h.forward(ctx, a)?;
        let a = self.conv2.forward(ctx, a)?;
        let a = ctx.tape.sigmoid(a)?;
        ctx.tape.mul(x, a)
    }
}

/// A shape-preserving attention module in the screening slot.
#[derive(Clone, Debug)]
pub enum Attention {
    Lssm(LssmBlock),
    Se(SeBlock),
    Sge(SgeBlock),
    Caa(CaaBlock),
}

impl Attention {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, cfg: &AspnConfig) -> Result<Self> {
        Ok(match cfg.attention {
            AttentionKind::Lssm => Attention::Lssm(LssmBlock::new(store, name, channels, cfg.lssm_kernel)?),
            AttentionKind::Se => Attention::Se(SeBlock::new(store, name, channels, cfg.se_reduction)?),
            AttentionKind::Sge => Attention::Sge(SgeBlock::new(store, name, channels, cfg.sge_groups)?),
            AttentionKind::Caa => Attention::Caa(CaaBlock::new(store, name, channels, cfg.caa_kernel)?),
        })
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            Attention::Lssm(_) => AttentionKind::Lssm,
            Attention::Se(_) => AttentionKind::Se,
            Attention::Sge(_) => AttentionKind::Sge,
            Attention::Caa(_) => AttentionKind::Caa,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Attention::Lssm(b) => b.forward(ctx, x),
            Attention::Se(b) => b.forward(ctx, x),
            Attention::Sge(b) => b.forward(ctx, x),
            Attention::Caa(b) => b.forward(ctx, x),
        }
    }
}

/// Selective feature aggregation of an upsampled high-level map with a
/// screened low-level map.
#[derive(Clone, Debug)]
pub struct SfaBlock {
    pub upconv: ConvTranspose2d,
    pub align: Conv2d,
    pub screen_high: Attention,
    pub screen_low: Attention,
    pub out_channels: usize,
}

impl SfaBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        high_channels: usize,
        low_channels: usize,
        cfg: &AspnConfig,
    ) -> Result<Self> {
        let cf = cfg.width;
        Ok(SfaBlock {
            upconv: ConvTranspose2d::new(store, &join(name, "upconv"), high_channels, cf, 3, 2, 1, 1)?,
            align: Conv2d::same(store, &join(name, "align"), low_channels, cf, 1, 1, true)?,
            screen_high: Attention::new(store, &join(name, "screen_high"), cf, cfg)?,
            screen_low: Attention::new(store, &join(name, "screen_low"), low_channels, cfg)?,
            out_channels: cf,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x_high: Var, x_low: Var) -> Result<Var> {
        let up = self.upconv.forward(ctx, x_high)?;
        let (us, ls) = (ctx.tape.shape(up), ctx.tape.shape(x_low));
        if us[2..] != ls[2..] || us[0] != ls[0] {
            return Err(shape_err(
                "sfa",
                format!("upsampled high-level map {us:?} does not match low-level map {ls:?}"),
            ));
        }
        let low = self.screen_low.forward(ctx, x_low)?;
        let low = self.align.forward(ctx, low)?;
        let low = ctx.tape.sigmoid(low)?;
        let high = self.screen_high.forward(ctx, up)?;
        let gated = ctx.tape.mul(high, low)?;
        ctx.tape.add(gated, up)
    }
}

/// Pyramid outputs at strides 8, 16 and 32, each with C_f channels.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
}

impl Pyramid {
    pub fn levels(&self) -> [Var; 3] {
        [self.p3, self.p4, self.p5]
    }
}

#[derive(Clone, Debug)]
pub struct Aspn {
    pub cfg: AspnConfig,
    pub proj5: Conv2d,
    pub sfa4: SfaBlock,
    pub sfa3: SfaBlock,
}

impl Aspn {
    /// `in_channels` are the channel counts of S3, S4 and S5.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AspnConfig,
        in_channels: [usize; 3],
    ) -> Result<Self> {
        cfg.validate()?;
        let [c3, c4, c5] = in_channels;
        let cf = cfg.width;
        Ok(Aspn {
            proj5: Conv2d::same(store, &join(name, "proj5"), c5, cf, 1, 1, true)?,
            sfa4: SfaBlock::new(store, &join(name, "sfa4"), cf, c4, &cfg)?,
            sfa3: SfaBlock::new(store, &join(name, "sfa3"), cf, c3, &cfg)?,
            cfg,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, f: Features) -> Result<Pyramid> {
        let [s3, s4, s5] = [f.s3, f.s4, f.s5].map(|v| ctx.tape.shape(v));
        let dyadic = |lo: [usize; 4], hi: [usize; 4]| lo[2] == 2 * hi[2] && lo[3] == 2 * hi[3];
        if !dyadic(s4, s5) || !dyadic(s3, s4) {
            return Err(Error::Config(format!(
                "pyramid inputs must halve in size level to level, got {s3:?}, {s4:?}, {s5:?}"
            )));
        }
        let p5 = self.proj5.forward(ctx, f.s5)?;
        let p4 = self.sfa4.forward(ctx, p5, f.s4)?;
        let p3 = self.sfa3.forward(ctx, p4, f.s3)?;
        Ok(Pyramid { p3, p4, p5 })
    }
}
