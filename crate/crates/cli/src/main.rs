use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use mrcdet::aspn::AttentionKind;
use mrcdet::cost::{costs_from_json, count_flops, count_params};
use mrcdet::data::{generate, load_samples, GenConfig, Manifest, Sample, Split};
use mrcdet::gradcheck::{run_module, GradCheckConfig};
use mrcdet::model::checkpoint::{self, TrainState};
use mrcdet::model::train::{evaluate, fit, EpochLog};
use mrcdet::model::AdamW;
use mrcdet::{Detector, Error, ExperimentConfig, Preset, Result};

#[derive(Parser)]
#[command(name = "mrcdet", version, about = "Bare-PCB defect detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic bare-board dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
    },
    /// Train a detector and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON overrides applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch metric log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the optimizer state stored in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON report; a CSV table is written next to it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter and FLOP counts for a model config or a layer list.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train and evaluate one model per attention kind.
    AblateAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "lssm,se,sge,caa")]
        kinds: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(config: Option<&Path>, preset: &str, seed: Option<u64>, epochs: Option<usize>) -> Result<ExperimentConfig> {
    let preset: Preset = preset.parse()?;
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p, preset)?,
        None => ExperimentConfig::preset(preset),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Dataset {
    manifest: Manifest,
    train: Vec<Sample<f32>>,
    val: Vec<Sample<f32>>,
}

fn load_dataset(dir: &Path, train_frac: f64) -> Result<Dataset> {
    let manifest = Manifest::load(dir)?;
    manifest.check_split(train_frac)?;
    let root = mrcdet::data::manifest::manifest_path(dir)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let train = load_samples(&manifest, &root, Split::Train)?;
    let val = load_samples(&manifest, &root, Split::Val)?;
    Ok(Dataset { manifest, train, val })
}

fn gen_data(out: &Path, count: usize, size: usize, seed: u64, train_frac: f64) -> Result<()> {
    let cfg = GenConfig {
        count,
        size,
        seed,
        train_frac,
        ..GenConfig::default()
    };
    let m = generate(&cfg, out)?;
    let mut per_class = [0usize; 3];
    for r in &m.records {
        for a in &r.annotations {
            per_class[m.class_id(&a.class).expect("generated class")] += 1;
        }
    }
    println!(
        "wrote {} images ({} train, {} val) to {}; defects short {} open {} circle {}",
        m.records.len(),
        m.count(Split::Train),
        m.count(Split::Val),
        out.display(),
        per_class[0],
        per_class[1],
        per_class[2]
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    preset: &str,
    seed: Option<u64>,
    epochs: Option<usize>,
    log: Option<&Path>,
    resume: bool,
) -> Result<()> {
    let (mut det, mut state) = if resume {
        let (mut det, state) = checkpoint::load_file::<f32>(out)?;
        let state = state.ok_or_else(|| Error::Validation(format!("{} holds no optimizer state", out.display())))?;
        if let Some(e) = epochs {
            det.config.train.epochs = e;
        }
        (det, state)
    } else {
        let cfg = experiment(config, preset, seed, epochs)?;
        let det = Detector::<f32>::new(cfg)?;
        let optimizer = AdamW::new(det.config.train.adamw(), &det.store)?;
        (det, TrainState { optimizer, epochs_done: 0 })
    };
    let ds = load_dataset(data, det.config.data.train_frac)?;
    let mut log_file = match log {
        Some(p) if resume && p.exists() => Some(fs::OpenOptions::new().append(true).open(p)?),
        Some(p) => {
            let mut f = fs::File::create(p)?;
            writeln!(f, "{}", EpochLog::CSV_HEADER)?;
            Some(f)
        }
        None => None,
    };
    let start = Instant::now();
    fit(&mut det, &mut state, &ds.train, &ds.val, &ds.manifest.classes, |e, det, state| {
        eprintln!(
            "epoch {:>3}  loss {:.4} (cls {:.4}, reg {:.4})  P {:.3} R {:.3} mAP50 {}  [{:.0}s]",
            e.epoch,
            e.loss_total,
            e.loss_cls,
            e.loss_reg,
            e.precision,
            e.recall,
            e.map50.map(|m| format!("{m:.3}")).unwrap_or_else(|| "-".into()),
            start.elapsed().as_secs_f64()
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", e.csv_row())?;
            f.flush()?;
        }
        checkpoint::save_file(out, det, Some(state))
    })?;
    checkpoint::save_file(out, &det, Some(&state))?;
    println!("trained {} epochs; checkpoint {}", state.epochs_done, out.display());
    Ok(())
}

fn eval(data: &Path, ckpt: &Path, report: &Path, split: &str) -> Result<()> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        s => return Err(Error::Usage(format!("unknown split {s:?}; expected train or val"))),
    };
    let (mut det, _) = checkpoint::load_file::<f32>(ckpt)?;
    let ds = load_dataset(data, det.config.data.train_frac)?;
    let samples = if split == Split::Train { &ds.train } else { &ds.val };
    let r = evaluate(&mut det, samples, &ds.manifest.classes)?;
    fs::write(report, r.to_json())?;
    fs::write(report.with_extension("csv"), r.to_csv())?;
    let map = r.map50.map(|m| format!("{m:.4}")).unwrap_or_else(|| "n/a (no boxes)".into());
    println!(
        "{} images: precision {:.4} recall {:.4} mAP@0.5 {map}; report {}",
        samples.len(),
        r.precision,
        r.recall,
        report.display()
    );
    Ok(())
}

fn gradcheck(module: &str, seed: u64) -> Result<bool> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let reports = run_module(module, &cfg)?;
    let mut ok = true;
    for r in &reports {
        println!("{}", r.summary());
        for c in r.checks.iter().filter(|c| c.max_rel_error > r.tolerance || c.probed < r.min_coords.min(c.numel)) {
            println!("  {}: rel error {:.3e} over {} coordinates", c.tensor, c.max_rel_error, c.probed);
        }
        ok &= r.passed();
    }
    Ok(ok)
}

fn flops(config: &Path, preset: &str, size: usize) -> Result<()> {
    let text = fs::read_to_string(config)?;
    let table = costs_from_json(&text, preset.parse()?, size)?;
    print!("{}", table.to_text());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    data: &Path,
    kinds: &str,
    config: Option<&Path>,
    preset: &str,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let kinds: Vec<AttentionKind> = kinds.split(',').map(|k| k.trim().parse()).collect::<Result<_>>()?;
    let base = experiment(config, preset, seed, epochs)?;
    let ds = load_dataset(data, base.data.train_frac)?;
    let mut csv = String::from("kind,precision,recall,mAP,flops,params\n");
    for kind in kinds {
        let mut cfg = base.clone();
        cfg.aspn.attention = kind;
        let mut det = Detector::<f32>::new(cfg)?;
        let params = count_params(&det.store);
        let [_, c, h, w] = ds.train.first().map(|s| s.image.shape()).unwrap_or([1, 3, 64, 64]);
        let flops = count_flops(&mut det, [1, c, h, w])?;
        let optimizer = AdamW::new(det.config.train.adamw(), &det.store)?;
        let mut state = TrainState { optimizer, epochs_done: 0 };
        fit(&mut det, &mut state, &ds.train, &ds.val, &ds.manifest.classes, |_, _, _| Ok(()))?;
        let r = evaluate(&mut det, &ds.val, &ds.manifest.classes)?;
        let map = r.map50.map(|m| format!("{m:.6}")).unwrap_or_default();
        eprintln!("{kind}: params {params} flops {flops} mAP {map}");
        csv.push_str(&format!("{kind},{:.6},{:.6},{map},{flops},{params}\n", r.precision, r.recall));
    }
    match out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            count,
            size,
            seed,
            train_frac,
        } => gen_data(&out, count, size, seed, train_frac)?,
        Command::Train {
            data,
            config,
            out,
            preset,
            seed,
            epochs,
            log,
            resume,
        } => train(&data, config.as_deref(), &out, &preset, seed, epochs, log.as_deref(), resume)?,
        Command::Eval {
            data,
            ckpt,
            report,
            split,
        } => eval(&data, &ckpt, &report, &split)?,
        Command::Gradcheck { module, seed } => return gradcheck(&module, seed),
        Command::Flops { config, preset, size } => flops(&config, &preset, size)?,
        Command::AblateAttention {
            data,
            kinds,
            config,
            preset,
            seed,
            epochs,
            out,
        } => ablate(&data, &kinds, config.as_deref(), &preset, seed, epochs, out.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
