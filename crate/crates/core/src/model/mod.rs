//! The toy detector: backbone, pyramid neck and an anchor-free dense head,
//! with its loss, optimizer, checkpoint format and training loop.

pub mod checkpoint;
pub mod decode;
pub mod loss;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::aspn::Aspn;
use crate::autograd::Var;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mrdcb::Backbone;
use crate::nn::{Conv2d, Ctx, Mode};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub use decode::{decode, decode_candidates, nms};
pub use loss::{assign_level, detection_loss, encode_maps, LossBreakdown};
pub use optim::{AdamW, AdamWConfig};

/// Output strides of the three head levels.
pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Weight of the regression term.
    pub reg_weight: f64,
    pub smooth_l1_beta: f64,
    /// Lowest score kept when building precision-recall curves.
    pub min_score: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_classes: 3,
            score_threshold: 0.3,
            nms_iou: 0.5,
            reg_weight: 1.0,
            smooth_l1_beta: 0.1,
            min_score: 0.001,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("the head needs at least one class".into()));
        }
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_iou", self.nms_iou),
            ("min_score", self.min_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.reg_weight < 0.0 || self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config("reg_weight must be >= 0 and smooth_l1_beta > 0".into()));
        }
        Ok(())
    }

    /// Channels per head map: class logits followed by (l, t, r, b).
    pub fn out_channels(&self) -> usize {
        self.num_classes + 4
    }
}

/// One 1x1 prediction conv per pyramid level.
#[derive(Clone, Debug)]
pub struct DetectHead {
    pub levels: Vec<Conv2d>,
    pub num_classes: usize,
}

impl DetectHead {
    pub fn new<T: Element>(store: &mut ParamStore<T>, width: usize, cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = (3..=5)
            .map(|l| Conv2d::same(store, &format!("head.p{l}"), width, cfg.out_channels(), 1, 1, true))
            .collect::<Result<_>>()?;
        Ok(DetectHead {
            levels,
            num_classes: cfg.num_classes,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, pyramid: [Var; 3]) -> Result<[Var; 3]> {
        let mut out = [pyramid[0]; 3];
        for (o, (conv, &p)) in out.iter_mut().zip(self.levels.iter().zip(&pyramid)) {
            *o = conv.forward(ctx, p)?;
        }
        Ok(out)
    }
}

/// The layer structure, separate from the parameter values it reads.
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub aspn: Aspn,
    pub head: DetectHead,
}

impl Network {
    pub fn new<T: Element>(store: &mut ParamStore<T>, cfg: &ExperimentConfig) -> Result<Self> {
        let backbone = Backbone::new(store, "backbone", cfg.backbone.clone())?;
        let aspn = Aspn::new(store, "aspn", cfg.aspn.clone(), cfg.backbone.out_channels())?;
        let head = DetectHead::new(store, cfg.aspn.width, &cfg.head)?;
        Ok(Network { backbone, aspn, head })
    }

    /// Raw head maps `[N, classes + 4, H/s, W/s]` for strides 8, 16, 32.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<[Var; 3]> {
        let f = self.backbone.forward(ctx, images)?;
        let p = self.aspn.forward(ctx, f)?;
        self.head.forward(ctx, p.levels())
    }
}

/// A network together with its parameters and the configuration that built it.
#[derive(Clone, Debug)]
pub struct Detector<T: Element> {
    pub config: ExperimentConfig,
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Element> Detector<T> {
    /// Builds and initializes a model; the init stream is seeded from the
    /// training seed.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.train.seed);
        let net = Network::new(&mut store, &config)?;
        Ok(Detector { config, net, store })
    }

    pub fn class_count(&self) -> usize {
        self.config.head.num_classes
    }

    /// Forward pass returning owned head maps.
    pub fn forward_maps(&mut self, images: &Tensor<T>, mode: Mode) -> Result<[Tensor<T>; 3]> {
        self.net.backbone.check_input(images.shape())?;
        let mut ctx = Ctx::new(&mut self.store, mode);
        let x = ctx.input(images.clone());
        let maps = self.net.forward(&mut ctx, x)?;
        Ok(maps.map(|m| ctx.value(m).clone()))
    }

    /// Eval-mode detections per image at the configured operating threshold.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Vec<Vec<crate::metrics::Detection>>> {
        let [_, _, h, w] = images.shape();
        let maps = self.forward_maps(images, Mode::Eval)?;
        let head = &self.config.head;
        Ok(decode(&maps, (h, w), head.num_classes, head.score_threshold, head.nms_iou))
    }
}
