//! Multi-residual directional coupled block: the multi-scale residual unit
//! wrapped around directional coupled attention, and the backbone built from
//! them.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{join, Cbr, Conv2d, Ctx, GroupNorm};
use crate::ops::{grouped_shape, PoolAxis};
use crate::params::ParamStore;
use crate::tensor::Element;

fn default_groups() -> usize {
    8
}
fn default_eps() -> f64 {
    1e-5
}
fn default_norm_groups() -> usize {
    1
}
fn default_split_ratio() -> f64 {
    0.5
}
fn default_expansion() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcaConfig {
    pub channels: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Groups used by the group norms acting on each `C/G` channel group.
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
}

impl DcaConfig {
    pub fn new(channels: usize, groups: usize) -> Self {
        DcaConfig {
            channels,
            groups,
            eps: default_eps(),
            norm_groups: default_norm_groups(),
        }
    }

    pub fn group_channels(&self) -> usize {
        self.channels / self.groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "DCA needs channels divisible by groups, got C={} G={}",
                self.channels, self.groups
            )));
        }
        let cg = self.group_channels();
        if self.norm_groups == 0 || cg % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "DCA group norm uses {} groups over {cg} channels",
                self.norm_groups
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("DCA eps must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate tensors of one DCA pass, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct DcaTrace {
    /// `sigma(X_H')`, shape `[N*G, C/G, H, 1]`.
    pub gate_h: Var,
    /// `sigma(X_W')`, shape `[N*G, C/G, 1, W]`.
    pub gate_w: Var,
    /// Softmax channel weights of the two branches, `[N*G, 1, 1, C/G]`.
    pub weights1: Var,
    pub weights2: Var,
    /// Final spatial attention map, `[N*G, 1, H, W]`.
    pub spatial: Var,
}

#[derive(Clone, Debug)]
pub struct DcaBlock {
    pub cfg: DcaConfig,
    pub conv_hw: Conv2d,
    pub conv3: Conv2d,
    pub gn1: GroupNorm,
    pub gn2: GroupNorm,
}

impl DcaBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: DcaConfig) -> Result<Self> {
        cfg.validate()?;
        let cg = cfg.group_channels();
        Ok(DcaBlock {
            conv_hw: Conv2d::same(store, &join(name, "conv_hw"), cg, cg, 1, 1, true)?,
            conv3: Conv2d::same(store, &join(name, "conv3"), cg, cg, 3, 1, true)?,
            gn1: GroupNorm::new(store, &join(name, "gn1"), cg, cfg.norm_groups, cfg.eps)?,
            gn2: GroupNorm::new(store, &join(name, "gn2"), cg, cfg.norm_groups, cfg.eps)?,
            cfg,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_traced(ctx, x).map(|(y, _)| y)
    }

    pub fn forward_traced<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, DcaTrace)> {
        let shape = ctx.tape.shape(x);
        if shape[1] != self.cfg.channels {
            return Err(Error::Config(format!(
                "DCA built for {} channels received {:?}",
                self.cfg.channels, shape
            )));
        }
        let g = self.cfg.groups;
        let [n, c, h, w] = shape;
        let gshape = grouped_shape(shape, g)?;
        let [ng, cg, _, _] = gshape;
        let t = &mut ctx.tape;

        // Group channels into the batch axis.
        let xg = t.reshape(x, gshape)?;

        // Directional strips, fused by one 1x1 conv over [H + W, 1].
        let strip_h = t.pool(xg, PoolAxis::Width)?;
        let strip_w = t.pool(xg, PoolAxis::Height)?;
        let strip_w = t.reshape(strip_w, [ng, cg, w, 1])?;
        let strips = t.concat(&[strip_h, strip_w], 2)?;
        let fused = self.conv_hw.forward(ctx, strips)?;
        let t = &mut ctx.tape;
        let parts = t.split(fused, &[h, w], 2)?;
        let gate_h = t.sigmoid(parts[0])?;
        let xw = t.reshape(parts[1], [ng, cg, 1, w])?;
        let gate_w = t.sigmoid(xw)?;
        let x1 = t.mul(xg, gate_h)?;
        let x1 = t.mul(x1, gate_w)?;

        // Local 3x3 branch.
        let x2 = self.conv3.forward(ctx, xg)?;

        // Channel weights from pooled, normalized branches.
        let n1 = self.gn1.forward(ctx, x1)?;
        let n2 = self.gn2.forward(ctx, x2)?;
        let t = &mut ctx.tape;
        let p1 = t.global_avg_pool(n1)?;
        let p2 = t.global_avg_pool(n2)?;
        let s1 = t.softmax(p1, 1)?;
        let s2 = t.softmax(p2, 1)?;
        let weights1 = t.reshape(s1, [ng, 1, 1, cg])?;
        let weights2 = t.reshape(s2, [ng, 1, 1, cg])?;

        // Cross-branch spatial map: W1 (x) X2 + W2 (x) X1.
        let x1f = t.reshape(x1, [ng, 1, cg, h * w])?;
        let x2f = t.reshape(x2, [ng, 1, cg, h * w])?;
        let m12 = t.bmm(weights1, x2f)?;
        let m21 = t.bmm(weights2, x1f)?;
        let m = t.add(m12, m21)?;
        let m = t.reshape(m, [ng, 1, h, w])?;
        let spatial = t.sigmoid(m)?;
        let out = t.mul(xg, spatial)?;
        let out = t.reshape(out, [n, c, h, w])?;
        Ok((
            out,
            DcaTrace {
                gate_h,
                gate_w,
                weights1,
                weights2,
                spatial,
            },
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsruConfig {
    pub channels: usize,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    pub dca: DcaConfig,
}

impl MsruConfig {
    pub fn new(channels: usize, groups: usize) -> Self {
        MsruConfig {
            channels,
            split_ratio: default_split_ratio(),
            expansion: default_expansion(),
            dca: DcaConfig::new(channels, groups),
        }
    }

    /// Channels routed through the extra 3x3 conv.
    pub fn split_channels(&self) -> usize {
        (self.split_ratio * self.channels as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let s1 = self.split_channels();
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) || s1 < 1 || s1 >= self.channels {
            return Err(Error::Config(format!(
                "split ratio {} leaves an empty half of {} channels",
                self.split_ratio, self.channels
            )));
        }
        if self.expansion < 1 {
            return Err(Error::Config("MSRU expansion must be at least 1".into()));
        }
        if self.dca.channels != self.channels {
            return Err(Error::Config(format!(
                "DCA channels {} differ from MSRU channels {}",
                self.dca.channels, self.channels
            )));
        }
        self.dca.validate()
    }
}

#[derive(Clone, Debug)]
pub struct MsruBlock {
    pub cfg: MsruConfig,
    pub cbr1: Cbr,
    pub cbr2: Cbr,
    pub conv_s1: Conv2d,
    pub conv_expand: Conv2d,
    pub conv_project: Conv2d,
    pub dca: DcaBlock,
}

impl MsruBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: MsruConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let s1 = cfg.split_channels();
        let e = cfg.expansion * c;
        Ok(MsruBlock {
            cbr1: Cbr::new(store, &join(name, "cbr1"), c, c, 3, 1)?,
            cbr2: Cbr::new(store, &join(name, "cbr2"), c, c, 3, 1)?,
            conv_s1: Conv2d::same(store, &join(name, "conv_s1"), s1, s1, 3, 1, true)?,
            conv_expand: Conv2d::same(store, &join(name, "conv_expand"), c, e, 1, 1, true)?,
            conv_project: Conv2d::same(store, &join(name, "conv_project"), e, c, 1, 1, true)?,
            dca: DcaBlock::new(store, &join(name, "dca"), cfg.dca.clone())?,
            cfg,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = self.cfg.channels;
        if ctx.tape.shape(x)[1] != c {
            return Err(Error::Config(format!(
                "MSRU built for {c} channels received {:?}",
                ctx.tape.shape(x)
            )));
        }
        let y = self.cbr1.forward(ctx, x)?;
        let y = self.cbr2.forward(ctx, y)?;
        let r1 = ctx.tape.add(x, y)?;
        let s1 = self.cfg.split_channels();
        let halves = ctx.tape.split(r1, &[s1, c - s1], 1)?;
        let f1 = self.conv_s1.forward(ctx, halves[0])?;
        let f_split = ctx.tape.concat(&[f1, halves[1]], 1)?;
        let f = self.conv_expand.forward(ctx, f_split)?;
        let f_interact = self.conv_project.forward(ctx, f)?;
        let att = self.dca.forward(ctx, f_interact)?;
        ctx.tape.add(r1, att)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Stem width C0; the stages emit 2*C0, 4*C0 and 8*C0 channels.
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub groups: usize,
    pub split_ratio: f64,
    pub expansion: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            base_channels: 32,
            blocks_per_stage: 1,
            groups: default_groups(),
            split_ratio: default_split_ratio(),
            expansion: default_expansion(),
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [2 * c, 4 * c, 8 * c]
    }

    pub fn msru(&self, channels: usize) -> MsruConfig {
        MsruConfig {
            channels,
            split_ratio: self.split_ratio,
            expansion: self.expansion,
            dca: DcaConfig::new(channels, self.groups),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        for c in self.out_channels() {
            self.msru(c).validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Cbr,
    pub blocks: Vec<MsruBlock>,
}

/// Multi-scale features at strides 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub s3: Var,
    pub s4: Var,
    pub s5: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: [Cbr; 2],
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub const STRIDE: usize = 32;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.base_channels;
        let stem = [
            Cbr::new(store, &join(name, "stem1"), cfg.in_channels, c0, 3, 2)?,
            Cbr::new(store, &join(name, "stem2"), c0, c0, 3, 2)?,
        ];
        let mut stages = Vec::with_capacity(3);
        let mut cin = c0;
        for (i, cout) in cfg.out_channels().into_iter().enumerate() {
            let sname = join(name, &format!("stage{}", i + 3));
            let down = Cbr::new(store, &join(&sname, "down"), cin, cout, 3, 2)?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| MsruBlock::new(store, &join(&sname, &format!("block{b}")), cfg.msru(cout)))
                .collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
            cin = cout;
        }
        Ok(Backbone { cfg, stem, stages })
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "backbone expects {} input channels, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        if h % Self::STRIDE != 0 || w % Self::STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "image extents {h}x{w} must be positive multiples of {}",
                Self::STRIDE
            )));
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Features> {
        self.check_input(ctx.tape.shape(image))?;
        let mut x = image;
        for cbr in &self.stem {
            x = cbr.forward(ctx, x)?;
        }
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            x = stage.down.forward(ctx, x)?;
            for block in &stage.blocks {
                x = block.forward(ctx, x)?;
            }
            outs.push(x);
        }
        Ok(Features {
            s3: outs[0],
            s4: outs[1],
            s5: outs[2],
        })
    }
}
