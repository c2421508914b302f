//! Parameter and FLOP accounting.
//!
//! FLOPs follow the 2 x MAC convention: a convolution costs
//! `2 * Cout * (Cin / groups) * kh * kw * H' * W'` per sample (bias free),
//! a transposed convolution is charged the same formula on its output
//! extents, and elementwise, pooling and normalization ops cost one FLOP per
//! output element. Counts are read off the tape of a real eval-mode forward.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Preset};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, Mode};
use crate::ops::{AvgPoolGeom, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::{Element, Shape, Tensor};

/// Learnable scalars; running statistics are excluded.
pub fn count_params<T: Element>(store: &ParamStore<T>) -> u64 {
    store.num_learnable() as u64
}

fn params_with_prefix<T: Element>(store: &ParamStore<T>, prefix: &str) -> u64 {
    store
        .iter()
        .filter(|(_, p)| p.role.learnable() && p.name.starts_with(prefix))
        .map(|(_, p)| p.numel() as u64)
        .sum()
}

/// FLOPs of one eval-mode forward at `input`.
pub fn count_flops<T: Element>(det: &mut Detector<T>, input: Shape) -> Result<u64> {
    Ok(model_costs(det, input)?.total().flops)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostTable {
    pub input: Shape,
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn total(&self) -> CostRow {
        CostRow {
            name: "total".into(),
            params: self.rows.iter().map(|r| r.params).sum(),
            flops: self.rows.iter().map(|r| r.flops).sum(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("input {:?}; FLOPs = 2 x MACs\n", self.input);
        let _ = writeln!(out, "{:<24} {:>14} {:>16}", "layer", "params", "flops");
        for r in self.rows.iter().chain(std::iter::once(&self.total())) {
            let _ = writeln!(out, "{:<24} {:>14} {:>16}", r.name, r.params, r.flops);
        }
        out
    }
}

/// Backbone, neck and head rows for one forward at `input`.
pub fn model_costs<T: Element>(det: &mut Detector<T>, input: Shape) -> Result<CostTable> {
    det.net.backbone.check_input(input)?;
    let net = det.net.clone();
    let mut ctx = Ctx::new(&mut det.store, Mode::Eval);
    let x = ctx.input(Tensor::zeros(input));
    let f = net.backbone.forward(&mut ctx, x)?;
    let after_backbone = ctx.tape.total_flops();
    let p = net.aspn.forward(&mut ctx, f)?;
    let after_neck = ctx.tape.total_flops();
    net.head.forward(&mut ctx, p.levels())?;
    let after_head = ctx.tape.total_flops();
    let store = &*ctx.params;
    Ok(CostTable {
        input,
        rows: vec![
            CostRow {
                name: "backbone".into(),
                params: params_with_prefix(store, "backbone."),
                flops: after_backbone,
            },
            CostRow {
                name: "aspn".into(),
                params: params_with_prefix(store, "aspn."),
                flops: after_neck - after_backbone,
            },
            CostRow {
                name: "head".into(),
                params: params_with_prefix(store, "head."),
                flops: after_head - after_neck,
            },
        ],
    })
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// One entry of a sequential layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "one")]
        groups: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        output_padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    AvgPool {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    fn label(&self, i: usize) -> String {
        let kind = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(String::from))
            .unwrap_or_default();
        format!("{i}:{kind}")
    }
}

/// `{"input": [N, C, H, W], "layers": [...]}`, run front to back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerList {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

pub fn layer_costs(list: &LayerList) -> Result<CostTable> {
    let mut store = ParamStore::<f64>::new(0);
    enum Built {
        Conv(Conv2d),
        Up(ConvTranspose2d),
        Bn(BatchNorm2d),
        Relu,
        Sigmoid,
        Pool(AvgPoolGeom),
        Gap,
    }
    let mut built = Vec::with_capacity(list.layers.len());
    let mut params = Vec::with_capacity(list.layers.len());
    for (i, l) in list.layers.iter().enumerate() {
        let before = count_params(&store);
        let name = format!("layer{i}");
        let b = match *l {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                groups,
                bias,
            } => {
                if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                    return Err(Error::Config(format!("layer {i}: channels do not divide into {groups} groups")));
                }
                let geom = ConvGeom::new(stride, padding).grouped(groups);
                Built::Conv(Conv2d::new(&mut store, &name, in_channels, out_channels, (kernel, kernel), geom, bias)?)
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            } => Built::Up(ConvTranspose2d::new(
                &mut store,
                &name,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            )?),
            LayerSpec::BatchNorm { channels } => Built::Bn(BatchNorm2d::new(&mut store, &name, channels)?),
            LayerSpec::Relu => Built::Relu,
            LayerSpec::Sigmoid => Built::Sigmoid,
            LayerSpec::AvgPool { kernel, stride, padding } => Built::Pool(AvgPoolGeom {
                kernel,
                stride,
                pad: padding,
            }),
            LayerSpec::GlobalAvgPool => Built::Gap,
        };
        built.push(b);
        params.push(count_params(&store) - before);
    }

    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let mut x = ctx.input(Tensor::zeros(list.input));
    let mut rows = Vec::with_capacity(built.len());
    for (i, b) in built.iter().enumerate() {
        let before = ctx.tape.total_flops();
        x = match b {
            Built::Conv(c) => c.forward(&mut ctx, x),
            Built::Up(c) => c.forward(&mut ctx, x),
            Built::Bn(n) => n.forward(&mut ctx, x),
            Built::Relu => ctx.tape.relu(x),
            Built::Sigmoid => ctx.tape.sigmoid(x),
            Built::Pool(g) => ctx.tape.avg_pool2d(x, *g),
            Built::Gap => ctx.tape.global_avg_pool(x),
        }
        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
        rows.push(CostRow {
            name: list.layers[i].label(i),
            params: params[i],
            flops: ctx.tape.total_flops() - before,
        });
    }
    Ok(CostTable {
        input: list.input,
        rows,
    })
}

/// A cost request: either a layer list or an experiment configuration
/// overlaid on `preset`, evaluated on a `[1, 3, size, size]` input.
pub fn costs_from_json(json: &str, preset: Preset, size: usize) -> Result<CostTable> {
    let v: serde_json::Value = serde_json::from_str(json)?;
    if v.get("layers").is_some() {
        let list: LayerList = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        return layer_costs(&list);
    }
    let cfg = ExperimentConfig::preset(preset).overlay(json)?;
    let mut det = Detector::<f32>::new(cfg)?;
    model_costs(&mut det, [1, 3, size, size])
}
