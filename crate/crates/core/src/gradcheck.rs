//! Central finite-difference checks of tape gradients.
//!
//! The checked scalar is `sum(out * R)` for a fixed random `R`. Each probe
//! moves one coordinate by `±h` with `h = rel_step * max(1, |theta|)`.
//! Probes whose perturbation flips a relu input or a smooth-L1 branch are
//! discarded and redrawn, since the central difference straddles a kink.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aspn::{AspnConfig, LssmBlock, SfaBlock};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::model::loss::{assign, detection_loss};
use crate::model::{DetectHead, HeadConfig};
use crate::mrdcb::{DcaBlock, DcaConfig, MsruBlock, MsruConfig};
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub rel_step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Coordinates probed per tensor (all of them if the tensor is smaller).
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rel_step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-2,
            coords: 16,
            seed: 0,
        }
    }
}

/// Outcome for one parameter or input tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub tensor: String,
    pub numel: usize,
    pub probed: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub tolerance: f64,
    pub min_coords: usize,
    pub checks: Vec<TensorCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks
            .iter()
            .all(|c| c.max_rel_error <= self.tolerance && c.probed >= self.min_coords.min(c.numel))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let probed: usize = self.checks.iter().map(|c| c.probed).sum();
        format!(
            "{:<6} {} tensors, {probed} coordinates, max rel error {:.3e}: {}",
            self.suite,
            self.checks.len(),
            self.max_rel_error(),
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

pub type Forward<'a> = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<(Var, Vec<bool>)> + 'a;

struct Probe<'a> {
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    forward: &'a Forward<'a>,
    mode: Mode,
    proj: Option<Tensor<f64>>,
    seed: u64,
}

impl Probe<'_> {
    /// Loss, kink pattern and (optionally) input gradients; parameter
    /// gradients land in the store.
    fn run(&mut self, backward: bool) -> Result<(f64, Vec<bool>, Vec<Tensor<f64>>)> {
        let mut ctx = Ctx::new(&mut self.store, self.mode);
        let xs: Vec<Var> = self.inputs.iter().map(|t| ctx.input(t.clone())).collect();
        let (out, extra) = (self.forward)(&mut ctx, &xs)?;
        let shape = ctx.tape.shape(out);
        let seed = self.seed;
        let proj = self
            .proj
            .get_or_insert_with(|| Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
            .clone();
        let loss = ctx.tape.weighted_sum(out, proj)?;
        let value = ctx.value(loss).data()[0];
        let mut kinks = ctx.tape.relu_pattern();
        kinks.extend(extra);
        let mut grads = Vec::new();
        if backward {
            ctx.params.zero_grad();
            let g = ctx.backward(loss)?;
            grads = xs
                .iter()
                .zip(&self.inputs)
                .map(|(&v, t)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
        }
        Ok((value, kinks, grads))
    }

    fn coord(&mut self, target: Target, i: usize) -> &mut f64 {
        match target {
            Target::Param(p) => &mut self.store.get_mut(crate::params::ParamId(p)).value.data_mut()[i],
            Target::Input(k) => &mut self.inputs[k].data_mut()[i],
        }
    }
}

#[derive(Clone, Copy)]
enum Target {
    Param(usize),
    Input(usize),
}

/// Checks every learnable parameter in `store` and every input tensor.
pub fn check(
    suite: &str,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    mode: Mode,
    forward: &Forward<'_>,
    cfg: &GradCheckConfig,
) -> Result<SuiteReport> {
    let mut probe = Probe {
        store,
        inputs,
        forward,
        mode,
        proj: None,
        seed: cfg.seed ^ 0x9e37_79b9,
    };
    let (_, base_kinks, input_grads) = probe.run(true)?;
    let mut targets = Vec::new();
    for (id, p) in probe.store.iter() {
        if p.role.learnable() {
            targets.push((Target::Param(id.index()), p.name.clone(), p.grad.clone()));
        }
    }
    for (k, g) in input_grads.into_iter().enumerate() {
        targets.push((Target::Input(k), format!("input{k}"), g));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::with_capacity(targets.len());
    for (target, name, analytic) in targets {
        let numel = analytic.numel();
        let want = cfg.coords.min(numel);
        let mut tried = HashSet::new();
        let (mut probed, mut worst) = (0, 0.0f64);
        while probed < want && tried.len() < numel && tried.len() < 50 * want {
            let i = if numel <= want {
                tried.len()
            } else {
                rng.gen_range(0..numel)
            };
            if !tried.insert(i) {
                continue;
            }
            let theta = *probe.coord(target, i);
            let h = cfg.rel_step * theta.abs().max(1.0);
            *probe.coord(target, i) = theta + h;
            let (plus, kp, _) = probe.run(false)?;
            *probe.coord(target, i) = theta - h;
            let (minus, km, _) = probe.run(false)?;
            *probe.coord(target, i) = theta;
            if kp != base_kinks || km != base_kinks {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of {name}[{i}]")));
            }
            worst = worst.max(rel);
            probed += 1;
        }
        checks.push(TensorCheck {
            tensor: name,
            numel,
            probed,
            max_rel_error: worst,
        });
    }
    Ok(SuiteReport {
        suite: suite.to_string(),
        tolerance: cfg.tolerance,
        min_coords: cfg.coords,
        checks,
    })
}

pub const MODULES: [&str; 4] = ["mrdcb", "aspn", "head", "all"];

/// Suites run for a CLI module name.
pub fn suites(module: &str) -> Result<&'static [&'static str]> {
    match module {
        "mrdcb" => Ok(&["msru", "dca"]),
        "aspn" => Ok(&["lssm", "sfa"]),
        "head" => Ok(&["head", "loss"]),
        "all" => Ok(&["msru", "dca", "lssm", "sfa", "head", "loss"]),
        _ => Err(Error::Usage(format!(
            "unknown gradcheck module {module:?}; expected one of {}",
            MODULES.join(", ")
        ))),
    }
}

fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

fn boxes() -> Vec<Vec<GroundTruth>> {
    let gt = |x1, y1, x2, y2, c| GroundTruth {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id: c,
    };
    vec![
        vec![gt(3.0, 5.0, 12.0, 11.0, 0), gt(20.0, 30.0, 44.0, 50.0, 2)],
        vec![gt(40.0, 8.0, 47.0, 14.0, 1), gt(2.0, 2.0, 62.0, 60.0, 1)],
    ]
}

/// `|d| < beta` for every regression channel of every positive cell.
fn smooth_l1_branches(ctx: &Ctx<'_, f64>, maps: &[Var; 3], gts: &[Vec<GroundTruth>], cfg: &HeadConfig) -> Result<Vec<bool>> {
    let a = assign(gts, (64, 64), cfg.num_classes)?;
    let mut flags = Vec::new();
    for (level, &m) in maps.iter().enumerate() {
        let v = ctx.value(m);
        let (eh, ew) = a.extents[level];
        for img in 0..a.batch {
            for y in 0..eh {
                for x in 0..ew {
                    if let Some(p) = a.get(level, img, y, x) {
                        for k in 0..4 {
                            let d = v.at(img, cfg.num_classes + k, y, x) - p.target[k];
                            flags.push(d.abs() < cfg.smooth_l1_beta);
                        }
                    }
                }
            }
        }
    }
    Ok(flags)
}

pub fn run_suite(name: &str, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut store = ParamStore::<f64>::new(cfg.seed);
    let report = match name {
        "msru" => {
            let block = MsruBlock::new(&mut store, "msru", MsruConfig::new(32, 4))?;
            store.randomize(cfg.seed, 0.2);
            let f = move |ctx: &mut Ctx<'_, f64>, xs: &[Var]| Ok((block.forward(ctx, xs[0])?, vec![]));
            check(name, store, vec![randn([1, 32, 3, 3], &mut rng)], Mode::Train, &f, cfg)?
        }
        "dca" => {
            let block = DcaBlock::new(&mut store, "dca", DcaConfig::new(16, 4))?;
            store.randomize(cfg.seed, 0.5);
            let f = move |ctx: &mut Ctx<'_, f64>, xs: &[Var]| Ok((block.forward(ctx, xs[0])?, vec![]));
            check(name, store, vec![randn([2, 16, 5, 6], &mut rng)], Mode::Train, &f, cfg)?
        }
        "lssm" => {
            let block = LssmBlock::new(&mut store, "lssm", 8, 3)?;
            store.randomize(cfg.seed, 0.5);
            let f = move |ctx: &mut Ctx<'_, f64>, xs: &[Var]| Ok((block.forward(ctx, xs[0])?, vec![]));
            check(name, store, vec![randn([2, 8, 5, 6], &mut rng)], Mode::Train, &f, cfg)?
        }
        "sfa" => {
            let acfg = AspnConfig {
                width: 8,
                lssm_kernel: 3,
                ..AspnConfig::default()
            };
            let block = SfaBlock::new(&mut store, "sfa", 12, 6, &acfg)?;
            store.randomize(cfg.seed, 0.5);
            let f = move |ctx: &mut Ctx<'_, f64>, xs: &[Var]| Ok((block.forward(ctx, xs[0], xs[1])?, vec![]));
            let inputs = vec![randn([2, 12, 3, 4], &mut rng), randn([2, 6, 6, 8], &mut rng)];
            check(name, store, inputs, Mode::Train, &f, cfg)?
        }
        "head" => {
            let hcfg = HeadConfig::default();
            let head = DetectHead::new(&mut store, 8, &hcfg)?;
            store.randomize(cfg.seed, 0.5);
            let gts = boxes();
            let f = move |ctx: &mut Ctx<'_, f64>, xs: &[Var]| {
                let maps = head.forward(ctx, [xs[0], xs[1], xs[2]])?;
                let kinks = smooth_l1_branches(ctx, &maps, &gts, &hcfg)?;
                let (loss, _) = detection_loss(&mut ctx.tape, maps, &gts, (64, 64), &hcfg)?;
                Ok((loss, kinks))
            };
            let inputs = vec![
                randn([2, 8, 8, 8], &mut rng),
                randn([2, 8, 4, 4], &mut rng),
                randn([2, 8, 2, 2], &mut rng),
            ];
            check(name, store, inputs, Mode::Train, &f, cfg)?
        }
        "loss" => {
            let hcfg = HeadConfig::default();
            let gts = boxes();
            let f = move |ctx: &mut Ctx<'_, f64>, xs: &[Var]| {
                let maps = [xs[0], xs[1], xs[2]];
                let kinks = smooth_l1_branches(ctx, &maps, &gts, &hcfg)?;
                let (loss, _) = detection_loss(&mut ctx.tape, maps, &gts, (64, 64), &hcfg)?;
                Ok((loss, kinks))
            };
            let mut inputs = Vec::new();
            for e in [8, 4, 2] {
                inputs.push(Tensor::rand_uniform([2, 7, e, e], -3.0, 3.0, &mut rng));
            }
            check(name, store, inputs, Mode::Train, &f, cfg)?
        }
        _ => {
            return Err(Error::Usage(format!(
                "unknown gradcheck suite {name:?}; expected msru, dca, lssm, sfa, head or loss"
            )))
        }
    };
    Ok(report)
}

pub fn run_module(module: &str, cfg: &GradCheckConfig) -> Result<Vec<SuiteReport>> {
    suites(module)?.iter().map(|s| run_suite(s, cfg)).collect()
}
