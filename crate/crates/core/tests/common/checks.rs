//! One function per acceptance criterion that can be decided in-process.
//! Each returns a short detail line on success and the first violation on
//! failure.

use std::time::Instant;

use mrcdet::aspn::{AspnConfig, AttentionKind, Attention, Aspn, LssmBlock, SfaBlock};
use mrcdet::cost::{costs_from_json, count_params, model_costs};
use mrcdet::gradcheck::{run_module, GradCheckConfig};
use mrcdet::metrics::{self, average_precision, iou, match_and_count, BBox, MapEvaluator};
use mrcdet::model::checkpoint;
use mrcdet::mrdcb::{DcaBlock, DcaConfig, Features, MsruBlock, MsruConfig};
use mrcdet::ops::conv::{conv2d_forward, conv_transpose2d_forward};
use mrcdet::ops::elementwise::{self as ew, broadcast_zip};
use mrcdet::ops::norm::{batch_norm_eval, batch_norm_train, group_norm};
use mrcdet::ops::pool::{avg_pool2d, global_avg_pool, pool_directional};
use mrcdet::ops::{reshape_group, AvgPoolGeom, ConvGeom, PoolAxis};
use mrcdet::{Ctx, Detector, ExperimentConfig, Mode, ParamStore, Preset, Role, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Outcome = Result<String, String>;

pub const OP_CASES: usize = 100;
pub const OP_TOL: f64 = 1e-10;

fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn shape(rng: &mut ChaCha8Rng, max: usize) -> [usize; 4] {
    [pick(rng, 1, 3), pick(rng, 1, max), pick(rng, 1, max), pick(rng, 1, max)]
}

type Case = fn(&mut ChaCha8Rng) -> f64;

fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", |r| {
            let g = pick(r, 1, 2);
            let (cin, cout) = (g * pick(r, 1, 3), g * pick(r, 1, 3));
            let (kh, kw) = (pick(r, 1, 3), pick(r, 1, 3));
            let (s, ph, pw) = (pick(r, 1, 2), pick(r, 0, 2), pick(r, 0, 2));
            let x = rand_t([pick(r, 1, 2), cin, pick(r, kh, 8), pick(r, kw, 8)], r);
            let w = rand_t([cout, cin / g, kh, kw], r);
            let b = r.gen_bool(0.5).then(|| rand_t([1, cout, 1, 1], r));
            let geom = ConvGeom::with_pad(s, ph, pw).grouped(g);
            let got = conv2d_forward(&x, &w, b.as_ref(), &geom).unwrap();
            max_abs(&got, &conv2d(&x, &w, b.as_ref(), s, (ph, pw), g))
        }),
        ("conv_transpose2d", |r| {
            let k = pick(r, 1, 3);
            let s = pick(r, 1, 2);
            let (p, op) = (pick(r, 0, (k - 1) / 2), pick(r, 0, s - 1));
            let (cin, cout) = (pick(r, 1, 3), pick(r, 1, 3));
            let x = rand_t([pick(r, 1, 2), cin, pick(r, 1, 8), pick(r, 1, 8)], r);
            let w = rand_t([cin, cout, k, k], r);
            let b = r.gen_bool(0.5).then(|| rand_t([1, cout, 1, 1], r));
            let got = conv_transpose2d_forward(&x, &w, b.as_ref(), &ConvGeom::new(s, p), op).unwrap();
            max_abs(&got, &conv_transpose2d(&x, &w, b.as_ref(), s, p, op))
        }),
        ("pool_width", |r| {
            let x = rand_t(shape(r, 8), r);
            max_abs(&pool_directional(&x, PoolAxis::Width).unwrap(), &pool_width(&x))
        }),
        ("pool_height", |r| {
            let x = rand_t(shape(r, 8), r);
            max_abs(&pool_directional(&x, PoolAxis::Height).unwrap(), &pool_height(&x))
        }),
        ("global_avg_pool", |r| {
            let x = rand_t(shape(r, 8), r);
            max_abs(&global_avg_pool(&x).unwrap(), &super::global_avg_pool(&x))
        }),
        ("avg_pool2d", |r| {
            let k = pick(r, 1, 3);
            let (s, p) = (pick(r, 1, 2), pick(r, 0, k / 2));
            let x = rand_t([pick(r, 1, 2), pick(r, 1, 4), pick(r, k, 8), pick(r, k, 8)], r);
            let geom = AvgPoolGeom { kernel: k, stride: s, pad: p };
            max_abs(&avg_pool2d(&x, &geom).unwrap(), &super::avg_pool2d(&x, k, s, p))
        }),
        ("relu", |r| {
            let x = rand_t(shape(r, 8), r);
            max_abs(&ew::relu(&x), &map(&x, relu))
        }),
        ("sigmoid", |r| {
            let x = rand_t(shape(r, 8), r).map(|v| 8.0 * v);
            max_abs(&ew::sigmoid(&x), &map(&x, sigmoid))
        }),
        ("softmax", |r| {
            let x = rand_t(shape(r, 8), r).map(|v| 4.0 * v);
            let axis = pick(r, 0, 3);
            max_abs(&ew::softmax(&x, axis).unwrap(), &softmax(&x, axis))
        }),
        ("batch_norm_train", |r| {
            let s = shape(r, 8);
            let x = rand_t(s, r);
            let (g, b) = (rand_t([1, s[1], 1, 1], r), rand_t([1, s[1], 1, 1], r));
            let (got, _, _) = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
            max_abs(&got, &super::batch_norm_train(&x, &g, &b, 1e-5))
        }),
        ("batch_norm_eval", |r| {
            let s = shape(r, 8);
            let x = rand_t(s, r);
            let c = [1, s[1], 1, 1];
            let (g, b, m) = (rand_t(c, r), rand_t(c, r), rand_t(c, r));
            let v = rand_t(c, r).map(|v| 1.0 + 0.5 * v);
            let (got, _) = batch_norm_eval(&x, &g, &b, &m, &v, 1e-5).unwrap();
            max_abs(&got, &super::batch_norm_eval(&x, &g, &b, &m, &v, 1e-5))
        }),
        ("group_norm", |r| {
            let groups = pick(r, 1, 3);
            let c = groups * pick(r, 1, 2);
            let x = rand_t([pick(r, 1, 3), c, pick(r, 1, 8), pick(r, 1, 8)], r);
            let (g, b) = (rand_t([1, c, 1, 1], r), rand_t([1, c, 1, 1], r));
            let (got, _) = group_norm(&x, groups, &g, &b, 1e-5).unwrap();
            max_abs(&got, &super::group_norm(&x, groups, &g, &b, 1e-5))
        }),
        ("broadcast_add", |r| {
            let s = shape(r, 8);
            let (mut sa, mut sb) = (s, s);
            for i in 0..4 {
                match pick(r, 0, 2) {
                    0 => sa[i] = 1,
                    1 => sb[i] = 1,
                    _ => {}
                }
            }
            let (a, b) = (rand_t(sa, r), rand_t(sb, r));
            max_abs(&broadcast_zip(&a, &b, |x, y| x + y).unwrap(), &broadcast(&a, &b, |x, y| x + y))
        }),
        ("broadcast_mul", |r| {
            let s = shape(r, 8);
            let (mut sa, mut sb) = (s, s);
            for i in 0..4 {
                match pick(r, 0, 2) {
                    0 => sa[i] = 1,
                    1 => sb[i] = 1,
                    _ => {}
                }
            }
            let (a, b) = (rand_t(sa, r), rand_t(sb, r));
            max_abs(&broadcast_zip(&a, &b, |x, y| x * y).unwrap(), &broadcast(&a, &b, |x, y| x * y))
        }),
        ("concat", |r| {
            let axis = pick(r, 0, 3);
            let base = shape(r, 8);
            let parts: Vec<T4> = (0..pick(r, 1, 3))
                .map(|_| {
                    let mut s = base;
                    s[axis] = pick(r, 1, 4);
                    rand_t(s, r)
                })
                .collect();
            let refs: Vec<&T4> = parts.iter().collect();
            max_abs(&ew::concat(&refs, axis).unwrap(), &concat(&refs, axis))
        }),
        ("slice", |r| {
            let x = rand_t(shape(r, 8), r);
            let axis = pick(r, 0, 3);
            let len = pick(r, 1, x.shape()[axis]);
            let start = pick(r, 0, x.shape()[axis] - len);
            max_abs(&ew::slice(&x, axis, start, len).unwrap(), &slice(&x, axis, start, len))
        }),
        ("split", |r| {
            let x = rand_t(shape(r, 8), r);
            let axis = pick(r, 0, 3);
            let total = x.shape()[axis];
            let first = pick(r, 0, total);
            let parts = ew::split(&x, &[first, total - first], axis).unwrap();
            let mut worst = 0.0f64;
            if first > 0 {
                worst = worst.max(max_abs(&parts[0], &slice(&x, axis, 0, first)));
            }
            if first < total {
                worst = worst.max(max_abs(&parts[1], &slice(&x, axis, first, total - first)));
            }
            worst
        }),
        ("bmm", |r| {
            let (n, c) = (pick(r, 1, 3), pick(r, 1, 3));
            let (p, k, m) = (pick(r, 1, 8), pick(r, 1, 8), pick(r, 1, 8));
            let (a, b) = (rand_t([n, c, p, k], r), rand_t([n, c, k, m], r));
            max_abs(&ew::bmm(&a, &b).unwrap(), &bmm(&a, &b))
        }),
        ("reshape_group", |r| {
            let g = pick(r, 1, 3);
            let x = rand_t([pick(r, 1, 3), g * pick(r, 1, 3), pick(r, 1, 8), pick(r, 1, 8)], r);
            max_abs(&reshape_group(x.clone(), g).unwrap(), &group_split(&x, g))
        }),
    ]
}

/// Criterion 1: every forward kernel against its scalar loop.
pub fn c1_op_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let cases = op_cases();
    for (k, (name, case)) in cases.iter().enumerate() {
        let mut r = rng(1000 + k as u64);
        for i in 0..OP_CASES {
            let err = case(&mut r);
            if !(err <= OP_TOL) {
                return Err(format!("{name} case {i}: max abs error {err:e} > {OP_TOL:e}"));
            }
            worst = worst.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s (limit 60s)"));
    }
    Ok(format!(
        "{} ops x {OP_CASES} cases, max abs error {worst:.1e}, {secs:.2}s",
        cases.len()
    ))
}

pub const GRAD_SUITES: [&str; 6] = ["msru", "dca", "lssm", "sfa", "head", "loss"];

/// Criterion 2: finite-difference gradients of every block.
pub fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    if cfg.rel_step != 1e-3 || cfg.tolerance != 1e-4 || cfg.coords < 16 {
        return Err(format!("unexpected gradcheck settings {cfg:?}"));
    }
    let reports = run_module("all", &cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for want in GRAD_SUITES {
        let r = reports
            .iter()
            .find(|r| r.suite == want)
            .ok_or_else(|| format!("suite {want} missing"))?;
        for c in &r.checks {
            if !(c.max_rel_error <= 1e-4) {
                return Err(format!("{want}/{}: rel error {:e}", c.tensor, c.max_rel_error));
            }
            if c.probed < 16.min(c.numel) {
                return Err(format!("{want}/{}: only {} of {} coordinates probed", c.tensor, c.probed, c.numel));
            }
        }
        let probed: usize = r.checks.iter().map(|c| c.probed).sum();
        if probed < 16 {
            return Err(format!("{want}: {probed} coordinates probed"));
        }
        worst = worst.max(r.max_rel_error());
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 300.0 {
        return Err(format!("took {secs:.1}s (limit 300s)"));
    }
    Ok(format!("{} suites, max rel error {worst:.2e}, {secs:.2}s", GRAD_SUITES.len()))
}

fn lssm_cfg(width: usize, k: usize) -> AspnConfig {
    AspnConfig {
        width,
        attention: AttentionKind::Lssm,
        lssm_kernel: k,
        ..AspnConfig::default()
    }
}

/// Criterion 3: zero-init identities, exact in f64.
pub fn c3_zero_init() -> Outcome {
    let mut r = rng(3);

    let mut store = ParamStore::<f64>::new(0);
    let msru = MsruBlock::new(&mut store, "m", MsruConfig::new(16, 4)).map_err(|e| e.to_string())?;
    store.zero_weights_and_biases();
    let x = rand_t([2, 16, 5, 6], &mut r);
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let xv = ctx.input(x.clone());
    let y = msru.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
    if ctx.value(y) != &x {
        return Err(format!("zero MSRU deviates from identity by {:e}", max_abs(ctx.value(y), &x)));
    }

    let mut store = ParamStore::<f64>::new(0);
    let lssm = LssmBlock::new(&mut store, "l", 6, 3).map_err(|e| e.to_string())?;
    store.zero_weights_and_biases();
    let x = rand_t([2, 6, 4, 7], &mut r);
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let xv = ctx.input(x.clone());
    let y = lssm.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
    if ctx.value(y) != &x.map(|v| 0.25 * v) {
        return Err("zero LSSM is not 0.25 X".into());
    }

    let mut store = ParamStore::<f64>::new(0);
    let sfa = SfaBlock::new(&mut store, "s", 8, 4, &lssm_cfg(8, 3)).map_err(|e| e.to_string())?;
    store.zero_weights_and_biases();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let hi = ctx.input(rand_t([1, 8, 2, 2], &mut r));
    let lo = ctx.input(rand_t([1, 4, 4, 4], &mut r));
    let y = sfa.forward(&mut ctx, hi, lo).map_err(|e| e.to_string())?;
    if ctx.value(y).data().iter().any(|&v| v != 0.0) {
        return Err("zero SFA output is not all zeros".into());
    }

    let mut store = ParamStore::<f64>::new(0);
    let aspn = Aspn::new(&mut store, "aspn", lssm_cfg(8, 1), [4, 6, 8]).map_err(|e| e.to_string())?;
    store.zero_weights_and_biases();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let f = Features {
        s3: ctx.input(rand_t([1, 4, 8, 8], &mut r)),
        s4: ctx.input(rand_t([1, 6, 4, 4], &mut r)),
        s5: ctx.input(rand_t([1, 8, 2, 2], &mut r)),
    };
    let p = aspn.forward(&mut ctx, f).map_err(|e| e.to_string())?;
    for v in p.levels() {
        if ctx.value(v).data().iter().any(|&v| v != 0.0) {
            return Err("zero ASPN output is not all zeros".into());
        }
    }

    let mut store = ParamStore::<f64>::new(0);
    let dca = DcaBlock::new(&mut store, "d", DcaConfig::new(8, 2)).map_err(|e| e.to_string())?;
    store.randomize(9, 0.5);
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let xv = ctx.input(Tensor::zeros([2, 8, 3, 5]));
    let y = dca.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
    if ctx.value(y).data().iter().any(|&v| v != 0.0) {
        return Err("DCA does not map zeros to zeros".into());
    }
    Ok("MSRU identity, LSSM 0.25X, SFA 0, ASPN 0, DCA(0) = 0 all exact".into())
}

#[derive(Clone, Debug)]
struct ShapeCase {
    n: usize,
    groups: usize,
    per_group: usize,
    h: usize,
    w: usize,
    k: usize,
    a: usize,
    b: usize,
    width: usize,
    kind: usize,
    chans: [usize; 3],
}

fn shape_case() -> impl Strategy<Value = ShapeCase> {
    (
        (1usize..=2, 1usize..=4, 1usize..=3, 1usize..=6, 1usize..=6),
        (prop_oneof![Just(1usize), Just(3)], 1usize..=2, 1usize..=2, 1usize..=12, 0usize..4),
        [1usize..=12, 1usize..=12, 1usize..=12],
    )
        .prop_map(|((n, groups, per_group, h, w), (k, a, b, width, kind), chans)| ShapeCase {
            n,
            groups,
            per_group,
            h,
            w,
            k,
            a,
            b,
            width,
            kind,
            chans,
        })
}

pub const SHAPE_CASES: u32 = 64;

fn shape_contracts(c: &ShapeCase) -> Result<(), String> {
    let ch = c.groups * c.per_group * 2;
    let s = [c.n, ch, c.h, c.w];
    let mut store = ParamStore::<f64>::new(1);
    let msru = MsruBlock::new(&mut store, "m", MsruConfig::new(ch, c.groups)).map_err(|e| e.to_string())?;
    let dca = DcaBlock::new(&mut store, "d", DcaConfig::new(ch, c.groups)).map_err(|e| e.to_string())?;
    let lssm = LssmBlock::new(&mut store, "l", ch, c.k).map_err(|e| e.to_string())?;
    let cfg = AspnConfig {
        width: c.width,
        attention: AttentionKind::ALL[c.kind],
        lssm_kernel: c.k,
        ..AspnConfig::default()
    };
    let aspn = Aspn::new(&mut store, "aspn", cfg, c.chans).map_err(|e| e.to_string())?;
    let mut r = rng((c.h * 31 + c.w) as u64);
    for mode in [Mode::Train, Mode::Eval] {
        let mut ctx = Ctx::new(&mut store, mode);
        let x = ctx.input(rand_t(s, &mut r));
        let outs = [
            ("msru", msru.forward(&mut ctx, x)),
            ("dca", dca.forward(&mut ctx, x)),
            ("lssm", lssm.forward(&mut ctx, x)),
        ];
        for (name, y) in outs {
            let y = y.map_err(|e| format!("{name}: {e}"))?;
            if ctx.tape.shape(y) != s {
                return Err(format!("{name} mapped {s:?} to {:?}", ctx.tape.shape(y)));
            }
        }
        let (a, b) = (c.a, c.b);
        let f = Features {
            s3: ctx.input(rand_t([c.n, c.chans[0], 4 * a, 4 * b], &mut r)),
            s4: ctx.input(rand_t([c.n, c.chans[1], 2 * a, 2 * b], &mut r)),
            s5: ctx.input(rand_t([c.n, c.chans[2], a, b], &mut r)),
        };
        let p = aspn.forward(&mut ctx, f).map_err(|e| format!("aspn: {e}"))?;
        // image extents are 32a x 32b; levels sit at strides 8, 16, 32
        let want = [8, 16, 32].map(|st| [c.n, c.width, 32 * a / st, 32 * b / st]);
        let got = p.levels().map(|v| ctx.tape.shape(v));
        if got != want {
            return Err(format!("aspn emitted {got:?}, expected {want:?}"));
        }
    }
    Ok(())
}

/// Criterion 4: shape contracts over random valid configurations.
pub fn c4_shapes() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(PtConfig {
        cases: SHAPE_CASES,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let count = std::cell::Cell::new(0u32);
    runner
        .run(&shape_case(), |c| {
            count.set(count.get() + 1);
            shape_contracts(&c).map_err(|e| TestCaseError::fail(format!("{c:?}: {e}")))
        })
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s (limit 60s)"));
    }
    Ok(format!("{} random configs, {secs:.2}s", count.get()))
}

fn in_open_unit(t: &T4) -> bool {
    t.data().iter().all(|&v| v > 0.0 && v < 1.0)
}

/// Criterion 5: softmax rows, gate ranges and LSSM contraction.
pub fn c5_normalization() -> Outcome {
    let mut worst_row = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(500 + seed);
        let groups = pick(&mut r, 1, 4);
        let ch = groups * pick(&mut r, 1, 4);
        let s = [pick(&mut r, 1, 2), ch, pick(&mut r, 1, 7), pick(&mut r, 1, 7)];
        let mut store = ParamStore::<f64>::new(seed);
        let dca = DcaBlock::new(&mut store, "d", DcaConfig::new(ch, groups)).map_err(|e| e.to_string())?;
        let lssm = LssmBlock::new(&mut store, "l", ch, 3).map_err(|e| e.to_string())?;
        let others: Vec<Attention> = [AttentionKind::Se, AttentionKind::Sge, AttentionKind::Caa]
            .into_iter()
            .map(|kind| {
                let cfg = AspnConfig {
                    attention: kind,
                    se_reduction: 2,
                    caa_kernel: 3,
                    ..AspnConfig::default()
                };
                Attention::new(&mut store, kind.name(), ch, &cfg)
            })
            .collect::<mrcdet::Result<_>>()
            .map_err(|e| e.to_string())?;
        store.randomize(seed, 1.0);
        let mut ctx = Ctx::new(&mut store, Mode::Train);
        let x = rand_t(s, &mut r).map(|v| 3.0 * v);
        let xv = ctx.input(x.clone());
        let (_, tr) = dca.forward_traced(&mut ctx, xv).map_err(|e| e.to_string())?;
        for wv in [tr.weights1, tr.weights2] {
            let w = ctx.value(wv);
            let cg = w.shape()[3];
            for row in w.data().chunks(cg) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        if worst_row > 1e-6 {
            return Err(format!("DCA softmax row sums off by {worst_row:e}"));
        }
        for (name, g) in [("gate_h", tr.gate_h), ("gate_w", tr.gate_w), ("spatial", tr.spatial)] {
            if !in_open_unit(ctx.value(g)) {
                return Err(format!("DCA {name} leaves (0, 1)"));
            }
        }
        let (y, lt) = lssm.forward_traced(&mut ctx, xv).map_err(|e| e.to_string())?;
        if !in_open_unit(ctx.value(lt.gate_h)) || !in_open_unit(ctx.value(lt.gate_w)) {
            return Err("LSSM gate leaves (0, 1)".into());
        }
        if ctx.value(y).data().iter().zip(x.data()).any(|(y, x)| y.abs() > x.abs()) {
            return Err("LSSM output exceeds its input in magnitude".into());
        }
        for att in &others {
            let y = att.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
            let y = ctx.value(y);
            // one sigmoid gate per element: y / x must lie in (0, 1)
            for (&yv, &xv) in y.data().iter().zip(x.data()) {
                let ratio = yv / xv;
                if !(ratio > 0.0 && ratio < 1.0) {
                    return Err(format!("{} gate {ratio} outside (0, 1)", att.kind()));
                }
            }
        }
    }
    Ok(format!("20 seeds, worst softmax row deviation {worst_row:.1e}"))
}

/// Criterion 6: IoU, matching and AP against closed forms and oracles.
pub fn c6_metrics() -> Outcome {
    let b = BBox::new;
    let close = |a: f64, e: f64| (a - e).abs() <= 1e-12;
    if iou(&b(1.0, 2.0, 5.0, 7.0), &b(1.0, 2.0, 5.0, 7.0)) != 1.0 {
        return Err("identical boxes do not give IoU 1".into());
    }
    if !close(iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0) {
        return Err("IoU of (0,0,2,2) and (1,1,3,3) is not 1/7".into());
    }
    if iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0)) != 0.0 {
        return Err("disjoint boxes overlap".into());
    }
    if metrics::precision(3, 1) != 0.75 {
        return Err(format!("precision(3, 1) = {}", metrics::precision(3, 1)));
    }

    let gts = vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(20.0, 20.0, 30.0, 34.0, 1), gt(40.0, 5.0, 50.0, 15.0, 2)];
    let exact: Vec<_> = gts.iter().map(|g| det(g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2, g.class_id, 1.0)).collect();
    let m = match_and_count(&exact, &gts, 0.5);
    if m.true_positives() != 3 || m.false_positives() != 0 || m.false_negatives() != 0 {
        return Err(format!("exact detections matched as {m:?}"));
    }

    let mut r = rng(6);
    for case in 0..300 {
        let n_gt = pick(&mut r, 0, 3);
        let n_det = pick(&mut r, 0, 5);
        let classes = pick(&mut r, 1, 2);
        let rb = |r: &mut ChaCha8Rng| {
            let (x, y) = (r.gen_range(0.0..8.0), r.gen_range(0.0..8.0));
            (x, y, x + r.gen_range(2.0..8.0), y + r.gen_range(2.0..8.0))
        };
        let gts: Vec<_> = (0..n_gt)
            .map(|_| {
                let (a, b2, c2, d) = rb(&mut r);
                gt(a, b2, c2, d, pick(&mut r, 0, classes - 1))
            })
            .collect();
        let dets: Vec<_> = (0..n_det)
            .map(|_| {
                let (a, b2, c2, d) = rb(&mut r);
                det(a, b2, c2, d, pick(&mut r, 0, classes - 1), r.gen_range(0.0..1.0))
            })
            .collect();
        let thr = [0.1, 0.3, 0.5][case % 3];
        let got = match_and_count(&dets, &gts, thr).tp;
        let want = exhaustive_match(&dets, &gts, thr);
        if got != want {
            return Err(format!("case {case}: greedy flags {got:?} vs exhaustive {want:?}"));
        }
    }

    let scripted = [(0.9, true), (0.8, false), (0.7, true)];
    let ap = average_precision(&scripted, 2).unwrap();
    if !close(ap, pr_sweep_ap(&scripted, 2)) || !close(ap, 0.5 + 0.5 * 2.0 / 3.0) {
        return Err(format!("AP of [TP, FP, TP] with 2 GTs = {ap}"));
    }
    for case in 0..300 {
        let n = pick(&mut r, 1, 12);
        let mut scores: Vec<f64> = (0..n).map(|i| (i as f64 + r.gen_range(0.0..0.9)) / n as f64).collect();
        scores.reverse();
        let scored: Vec<(f64, bool)> = scores.iter().map(|&s| (s, r.gen_bool(0.5))).collect();
        let hits = scored.iter().filter(|s| s.1).count();
        let gt_count = hits + pick(&mut r, 0, 3).max(usize::from(hits == 0));
        let got = average_precision(&scored, gt_count).unwrap();
        let want = pr_sweep_ap(&scored, gt_count);
        if !close(got, want) {
            return Err(format!("AP case {case}: {got} vs PR sweep {want}"));
        }
    }
    if average_precision(&[], 3) != Some(0.0) {
        return Err("zero detections do not give AP 0".into());
    }

    let mut ev = MapEvaluator::new(vec!["a".into(), "b".into(), "c".into()], 0.5, 0.3);
    ev.add_image(&exact, &gts);
    ev.add_image(&exact[..1], &gts[..1]);
    let rep = ev.report();
    if rep.map50 != Some(1.0) {
        return Err(format!("perfect predictions give mAP {:?}", rep.map50));
    }
    Ok("closed forms, 300 exhaustive matchings, 300 PR sweeps, perfect mAP 1.0".into())
}

/// Criterion 7: closed-form conv costs and the hand-summed desk model.
pub fn c7_costs() -> Outcome {
    let t = costs_from_json(
        r#"{"input": [1, 2, 8, 8], "layers": [{"type": "conv2d", "in_channels": 2, "out_channels": 4, "kernel": 3, "padding": 1}]}"#,
        Preset::Desk,
        64,
    )
    .map_err(|e| e.to_string())?;
    let one = t.total();
    if one.params != 2 * 4 * 9 + 4 || one.flops != 2 * 4 * 2 * 9 * 64 {
        return Err(format!("single conv: {} params, {} FLOPs", one.params, one.flops));
    }
    let mut det = Detector::<f32>::new(ExperimentConfig::desk()).map_err(|e| e.to_string())?;
    let table = model_costs(&mut det, [1, 3, 64, 64]).map_err(|e| e.to_string())?;
    let (bb, neck, head) = desk_model_cost();
    for (row, want) in table.rows.iter().zip([bb, neck, head]) {
        if row.params != want.params || row.flops != want.flops {
            return Err(format!(
                "{}: {} params / {} FLOPs, hand sum {} / {}",
                row.name, row.params, row.flops, want.params, want.flops
            ));
        }
    }
    let total = bb + neck + head;
    if count_params(&det.store) != total.params || table.total().flops != total.flops {
        return Err("model totals differ from the hand sum".into());
    }
    Ok(format!(
        "conv 76 params / 9216 FLOPs; desk model {} params / {} FLOPs match the hand sum",
        total.params, total.flops
    ))
}

/// Criterion 10: checkpoint save, load, forward on 10 random inputs.
pub fn c10_checkpoint() -> Outcome {
    let mut det = Detector::<f32>::new(ExperimentConfig::desk()).map_err(|e| e.to_string())?;
    det.store.randomize(10, 0.2);
    let mut r = rng(10);
    for p in det.store.iter_mut() {
        if p.role == Role::Statistic {
            for v in p.value.data_mut() {
                *v = r.gen_range(0.5f32..1.5);
            }
        }
    }
    let mut buf = Vec::new();
    checkpoint::save(&mut buf, &det, None).map_err(|e| e.to_string())?;
    let (mut back, _) = checkpoint::load::<f32, _>(&mut buf.as_slice()).map_err(|e| e.to_string())?;
    for i in 0..10 {
        let x = Tensor::<f32>::rand_uniform([1, 3, 64, 64], 0.0, 1.0, &mut r);
        let a = det.forward_maps(&x, Mode::Eval).map_err(|e| e.to_string())?;
        let b = back.forward_maps(&x, Mode::Eval).map_err(|e| e.to_string())?;
        for (ma, mb) in a.iter().zip(&b) {
            let same = ma.shape() == mb.shape() && ma.data().iter().zip(mb.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            if !same {
                return Err(format!("input {i}: reloaded model output differs"));
            }
        }
    }
    Ok(format!("{} byte checkpoint, 10 inputs bitwise identical", buf.len()))
}
