use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use amulet_core::check::{miniature, NetworkCheck};
use amulet_core::config::{RunConfig, RESOLVED_NAME};
use amulet_core::data::{generate_synthetic, read_image, read_manifest, saliency_image, Dataset};
use amulet_core::infer::{predict, InferMode};
use amulet_core::metrics::{evaluate_dirs, files_with_extension};
use amulet_core::model::{AmuletNet, Variant};
use amulet_core::tensor::gradcheck::GradcheckConfig;
use amulet_core::tensor::{ParamStore, Primitive};
use amulet_core::train::checkpoint::Checkpoint;
use amulet_core::train::{self, Trainer};
use amulet_core::Error;

/// 1 for configuration errors, 2 for everything that fails at run time.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn synth(
    config: Option<&Path>,
    out: &Path,
    count: Option<usize>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(c) = count {
        cfg.data.count = c;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    create_dir(out)?;
    let entries = generate_synthetic(&cfg.data, out)?;
    cfg.write_resolved(out)?;
    println!("wrote {} samples to {}", entries.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub no_bpr: bool,
    pub max_iters: Option<u64>,
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.variant {
        cfg.model.heads.variant = v;
    }
    if args.no_bpr {
        cfg.model.heads.bpr = false;
    }
    if let Some(m) = args.max_iters {
        cfg.train.max_iters = m;
    }
    cfg.validate()?;
    create_dir(&args.out)?;
    cfg.write_resolved(&args.out)?;

    let data = Dataset::load(&args.data)?;
    let mut store = ParamStore::<f32>::new();
    let net = AmuletNet::new(cfg.model.clone(), &mut store)?;
    let supervised = net.config.active_levels().len() + 1;
    let mut trainer = Trainer::new(net, store, cfg.train.clone(), data.len())?;
    if let Some(path) = &args.resume {
        trainer.resume(&Checkpoint::load(path)?)?;
        println!(
            "resumed from {} at iteration {}",
            path.display(),
            trainer.state.iteration
        );
    }
    println!(
        "training {} ({} supervised outputs, bpr {}) on {} samples",
        cfg.model.heads.variant,
        supervised,
        if cfg.model.heads.bpr { "on" } else { "off" },
        data.len()
    );
    let start = Instant::now();
    let outcome = train::run(&mut trainer, &data, &args.out, |r| {
        if r.iteration % 100 == 0 {
            println!(
                "iter {:>6}  loss {:>12.3}  lr {:e}  {:.0}s",
                r.iteration,
                r.total,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "stopped after {} iterations ({:?}); final checkpoint {}",
        outcome.iterations,
        outcome.stop,
        outcome.final_checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Input images by id: the manifest when present, otherwise every `.ppm`.
fn image_paths(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let manifest = dir.join("manifest.csv");
    if manifest.is_file() {
        return Ok(read_manifest(&manifest)?
            .into_iter()
            .map(|e| (e.id, dir.join(e.image_path)))
            .collect());
    }
    Ok(files_with_extension(dir, "ppm")?.into_iter().collect())
}

pub fn infer(
    checkpoint: &Path,
    images: &Path,
    out: &Path,
    config: Option<&Path>,
    mode: Option<InferMode>,
) -> Result<ExitCode> {
    let beside = checkpoint.parent().map(|d| d.join(RESOLVED_NAME));
    let cfg = match (config, beside) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.is_file() => RunConfig::load(&p)?,
        _ => RunConfig::default(),
    };
    let mode = mode.unwrap_or(cfg.eval.mode);
    let mut store = ParamStore::<f32>::new();
    let net = AmuletNet::new(cfg.model.clone(), &mut store)?;
    Checkpoint::load(checkpoint)?.apply_values(&mut store)?;

    let inputs = image_paths(images)?;
    create_dir(out)?;
    if inputs.is_empty() {
        eprintln!("warning: no images found in {}", images.display());
        return Ok(ExitCode::SUCCESS);
    }
    for (id, path) in &inputs {
        let image = read_image(path)?;
        let map = predict(&net, &store, image, mode)
            .with_context(|| format!("inference on {}", path.display()))?;
        saliency_image(&map).write(&out.join(format!("{id}.pgm")))?;
    }
    println!(
        "wrote {} {mode} saliency maps to {}",
        inputs.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(pred: &Path, gt: &Path, out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let ev = evaluate_dirs(pred, gt, &cfg.eval.conventions, cfg.eval.aggregation)?;
    ev.report.write(out)?;
    let r = &ev.report;
    println!(
        "{} images  F_beta {:.4}  MAE {:.4}  precision {:.4}  recall {:.4}",
        r.images.len(),
        r.fbeta,
        r.mae,
        r.precision,
        r.recall
    );
    if !ev.complete() {
        for id in &ev.missing_gt {
            eprintln!("unmatched prediction: {id} has no ground truth");
        }
        for id in &ev.missing_pred {
            eprintln!("unmatched ground truth: {id} has no prediction");
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(config: Option<&Path>, seed: u64, corrupt: Option<&str>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let mut check = NetworkCheck::new(seed);
    check.model = miniature(cfg.model.heads);
    check.beta = cfg.train.beta;
    check.log_eps = cfg.train.log_eps;
    if let Some(name) = corrupt {
        match Primitive::parse(name) {
            Some(p) => check.fault = Some(p),
            None => bail!(Error::Config(format!("unknown primitive `{name}`"))),
        }
    }
    let start = Instant::now();
    let report = check.run(&GradcheckConfig::default())?;
    for g in &report.groups {
        let status = if g.max_rel_error < report.tolerance {
            "ok"
        } else {
            "FAIL"
        };
        println!(
            "{:<24} checked {:>2}  excluded {:>2}  max_rel_err {:.3e}  {status}",
            g.name, g.checked, g.excluded, g.max_rel_error
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:e}) in {:.2}s",
        report.max_rel_error(),
        report.tolerance,
        start.elapsed().as_secs_f64()
    );
    if report.passed() {
        return Ok(ExitCode::SUCCESS);
    }
    for g in report.failures() {
        eprintln!("gradient mismatch in {}", g.name);
    }
    Ok(ExitCode::from(2))
}
