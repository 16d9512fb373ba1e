//! Subcommand implementations. Every file lands via write-to-temp + rename so
//! a crash never leaves a half-written artifact behind.

use std::io;
use std::path::{Path, PathBuf};

use clap::Args;
use magicflow_core::attribution::{attribution_map, export_graymap};
use magicflow_core::datagen::{
    dequantize, gen_phantom_dataset, gen_toy2d, load_dataset, quantize_to_grid, ToyKind,
};
use magicflow_core::metrics::{
    bootstrap_ci, fid_gaussian, fit_pca, kid_poly, msssim_report, prdc, Embedding, MetricReport,
    DEFAULT_KID_DEGREE, DEFAULT_MSSSIM_LEVELS,
};
use magicflow_core::model::{load_checkpoint, save_checkpoint, train, EpochStats};
use magicflow_core::tensor::read_ten;
use magicflow_core::{FlowConfig, FlowError, FlowModel, Result, Rng, Tensor, TrainOptions};

use crate::config::{DataSource, ModelKind, RunConfig};

/// Stream tag for dequantization noise; keeps it off the streams training
/// draws from (shuffle: 1000+epoch, dropout: 0x10_0000+sample).
const DEQUANT_STREAM: u64 = 0xDE_0000;
const MSSSIM_STREAM: u64 = 0x55AA;
const BOOT_FID_STREAM: u64 = 0xB007;
const BOOT_KID_STREAM: u64 = 0xB008;

/// Smallest image side the 11x11 similarity window can cover.
const MSSSIM_MIN_SIDE: usize = 11;

// ------------------------------------------------------------------- train

pub fn cmd_train(config_path: &Path, env_seed: Option<u64>) -> Result<()> {
    let mut run = RunConfig::from_file(config_path)?;
    if let Some(s) = env_seed {
        run.seed = s;
    }
    let (images, labels, num_classes) = build_training_set(&run)?;
    let shape = images[0].shape();
    let in_shape = (shape[0], shape[1], shape[2]);
    let flow_cfg = resolve_flow_config(&run, in_shape, num_classes)?;
    let mut model = FlowModel::build(flow_cfg)?;

    std::fs::create_dir_all(&run.out_dir).map_err(|e| io_at(&run.out_dir, e))?;
    let opts = TrainOptions {
        epochs: run.train.epochs,
        batch_size: run.train.batch_size,
        learning_rate: run.train.learning_rate,
        clip_norm: run.train.clip_norm,
        seed: run.seed,
        ..TrainOptions::default()
    };
    let mut metric_lines = String::new();
    {
        let mut on_epoch = |s: &EpochStats| {
            println!("epoch={} nll={} seconds={}", s.epoch, s.nll, s.seconds);
            metric_lines.push_str(&format!("epoch={} nll={}\n", s.epoch, s.nll));
        };
        train(&mut model, &images, &labels, &opts, Some(&mut on_epoch))?;
    }
    let ckpt = run.out_dir.join("model.ckpt");
    atomic_checkpoint(&model, &ckpt)?;
    atomic_write(&run.out_dir.join("train_metrics.txt"), metric_lines.as_bytes())?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

/// Generate or load the training set, lift flat vectors to (d,1,1) volumes,
/// and apply quantize-then-dequantize when the config asks for it.
fn build_training_set(run: &RunConfig) -> Result<(Vec<Tensor>, Vec<usize>, usize)> {
    let rng = Rng::new(run.seed);
    let ds = match &run.dataset.source {
        DataSource::Phantom { profiles, n_per_class, height, width } => {
            gen_phantom_dataset(profiles, *n_per_class, *height, *width, &rng)?
        }
        DataSource::Gaussians { classes, n_per_class, separation } => {
            gen_toy2d(ToyKind::ConditionalGaussians, *classes, *n_per_class, *separation, &rng)?
        }
        DataSource::Moons { n_per_class } => {
            gen_toy2d(ToyKind::TwoMoons, 2, *n_per_class, 0.0, &rng)?
        }
        DataSource::Dir { path } => load_dataset(path)?,
    };
    if ds.images.is_empty() {
        return Err(FlowError::Contract("the training set is empty".into()));
    }
    let mut images = ds.images;
    for img in &mut images {
        if img.rank() == 1 {
            let d = img.len();
            *img = img.reshape(&[d, 1, 1])?;
        } else if img.rank() != 3 {
            return Err(FlowError::Config(format!(
                "training samples must be rank 1 or 3, got shape {:?}",
                img.shape()
            )));
        }
    }
    if run.dataset.quantize_bits > 0 {
        let mut dq_rng = Rng::new(run.seed).derive(DEQUANT_STREAM);
        for img in &mut images {
            let snapped = quantize_to_grid(img, run.dataset.quantize_bits)?;
            *img = dequantize(&snapped, run.dataset.quantize_bits, &mut dq_rng)?;
        }
    }
    Ok((images, ds.labels, ds.num_classes))
}

fn resolve_flow_config(
    run: &RunConfig,
    in_shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<FlowConfig> {
    let (c, h, w) = in_shape;
    let kind = match run.model.kind {
        ModelKind::Auto => {
            if h == 1 && w == 1 {
                ModelKind::Toy
            } else if h % 8 == 0 && w % 8 == 0 && h.min(w) >= 16 {
                ModelKind::Multiscale
            } else if h % 2 == 0 && w % 2 == 0 {
                ModelKind::Reduced
            } else {
                return Err(FlowError::Config(format!(
                    "no built-in schedule fits {c}x{h}x{w} samples; set [model] kind explicitly"
                )));
            }
        }
        k => k,
    };
    let mut fc = match kind {
        ModelKind::Toy => {
            if h != 1 || w != 1 {
                return Err(FlowError::Config(format!(
                    "the toy schedule expects flat samples, got {c}x{h}x{w}"
                )));
            }
            FlowConfig::toy(run.task, c, num_classes, run.model.toy_steps, run.seed)?
        }
        ModelKind::Multiscale => FlowConfig::multiscale(run.task, in_shape, num_classes, run.seed)?,
        ModelKind::Reduced => FlowConfig::reduced(run.task, in_shape, num_classes, run.seed)?,
        ModelKind::Auto => unreachable!("auto resolved above"),
    };
    fc.hidden = run.model.hidden;
    fc.emb_width = run.model.emb_width;
    fc.emb_channels = run.model.emb_channels;
    fc.s_max = run.model.s_max;
    fc.layout()?;
    Ok(fc)
}

// ------------------------------------------------------------------ sample

pub fn cmd_sample(
    checkpoint: &Path,
    label: usize,
    n: usize,
    temperature: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_at(out_dir, e))?;
    for i in 0..n {
        let mut rng = Rng::new(seed).derive(i as u64);
        let img = model.sample(label, &mut rng, temperature)?;
        let base = out_dir.join(format!("sample_label{label}_{i:03}"));
        atomic_graymap(&img, &base)?;
        println!("{}.pgm", base.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- classify

pub fn cmd_classify(checkpoint: &Path, out: &Path, images: &[PathBuf]) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let mut lines = String::new();
    for path in images {
        let img = read_ten(path)?;
        let c = model.classify(&img)?;
        let mut line = format!("{},{}", path.display(), c.argmax);
        for s in &c.scores {
            line.push(',');
            line.push_str(&s.to_string());
        }
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    atomic_write(out, lines.as_bytes())
}

// --------------------------------------------------------------- attribute

pub fn cmd_attribute(
    checkpoint: &Path,
    label: usize,
    out_dir: &Path,
    images: &[PathBuf],
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_at(out_dir, e))?;
    for path in images {
        let img = read_ten(path)?;
        let map = attribution_map(&model, &img, label)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| FlowError::Config(format!("bad input path {}", path.display())))?;
        let base = out_dir.join(format!("{stem}.attr"));
        atomic_graymap(&map.values, &base)?;
        println!("{} loglik={}", path.display(), map.total);
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory holding the reference set (images.ten / labels.ten / meta.txt).
    #[arg(long)]
    pub real: PathBuf,
    /// Directory holding the generated set, same layout.
    #[arg(long)]
    pub fake: PathBuf,
    /// Feature space for FID/KID/PRDC: identity | proj:<dim> | pca:<dim>.
    #[arg(long, default_value = "identity")]
    pub embedding: String,
    /// Neighborhood size for precision/recall/density/coverage.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Bootstrap replicates for FID/KID intervals (min 50); 0 disables.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    /// Random pairs per side of the same-class / cross-class similarity.
    #[arg(long, default_value_t = 500)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; a .json mirror lands next to it.
    #[arg(long, default_value = "metrics.txt")]
    pub out: PathBuf,
}

pub fn cmd_evaluate(args: EvalArgs, env_seed: Option<u64>) -> Result<()> {
    let seed = env_seed.unwrap_or(args.seed);
    let real = load_dataset(&args.real)?;
    let fake = load_dataset(&args.fake)?;
    if real.images.is_empty() || fake.images.is_empty() {
        return Err(FlowError::Contract("both datasets must be nonempty".into()));
    }
    if real.images[0].shape() != fake.images[0].shape() {
        return Err(FlowError::Dim(format!(
            "real samples are {:?} but fake samples are {:?}",
            real.images[0].shape(),
            fake.images[0].shape()
        )));
    }

    let emb = parse_embedding(&args.embedding, seed, &real.images)?;
    let rv = emb.embed(&real.images)?;
    let fv = emb.embed(&fake.images)?;
    let mut report = MetricReport::new(emb.name(), seed, rv.len(), fv.len());

    if args.bootstrap == 0 {
        report.push_scalar("fid", fid_gaussian(&rv, &fv)?);
        report.push_scalar("kid", kid_poly(&rv, &fv, DEFAULT_KID_DEGREE)?);
    } else {
        let mut rng = Rng::new(seed).derive(BOOT_FID_STREAM);
        let (point, lo, hi) = bootstrap_ci(
            &mut |r, f| fid_gaussian(r, f),
            &rv,
            &fv,
            args.bootstrap,
            0.05,
            &mut rng,
        )?;
        report.push_interval("fid", point, lo, hi);
        let mut rng = Rng::new(seed).derive(BOOT_KID_STREAM);
        let (point, lo, hi) = bootstrap_ci(
            &mut |r, f| kid_poly(r, f, DEFAULT_KID_DEGREE),
            &rv,
            &fv,
            args.bootstrap,
            0.05,
            &mut rng,
        )?;
        report.push_interval("kid", point, lo, hi);
    }

    let p = prdc(&rv, &fv, args.k)?;
    report.push_scalar("precision", p.precision);
    report.push_scalar("recall", p.recall);
    report.push_scalar("density", p.density);
    report.push_scalar("coverage", p.coverage);

    push_pair_similarity(&mut report, &fake, args.pairs, seed)?;

    let text = report.to_text();
    print!("{text}");
    atomic_write(&args.out, text.as_bytes())?;
    atomic_write(&args.out.with_extension("json"), report.to_json().as_bytes())?;
    Ok(())
}

/// Same-class vs cross-class MS-SSIM over the generated set. Skips with a
/// note on stderr when the samples cannot support it; only genuine failures
/// propagate.
fn push_pair_similarity(
    report: &mut MetricReport,
    fake: &magicflow_core::datagen::Dataset,
    pairs: usize,
    seed: u64,
) -> Result<()> {
    let shape = fake.images[0].shape();
    if shape.len() != 3 || shape[1].min(shape[2]) < MSSSIM_MIN_SIDE {
        eprintln!(
            "note: skipping pair similarity: samples of shape {shape:?} cannot fit an {MSSSIM_MIN_SIDE}x{MSSSIM_MIN_SIDE} window"
        );
        return Ok(());
    }
    if fake.num_classes < 2 {
        eprintln!("note: skipping pair similarity: needs at least two classes");
        return Ok(());
    }
    let groups: Vec<Vec<Tensor>> =
        (0..fake.num_classes).map(|c| fake.class_members(c)).collect();
    let mut rng = Rng::new(seed).derive(MSSSIM_STREAM);
    let r = match msssim_report(&groups, pairs, DEFAULT_MSSSIM_LEVELS, &mut rng) {
        Ok(r) => r,
        Err(FlowError::Contract(msg)) => {
            eprintln!("note: skipping pair similarity: {msg}");
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    if !r.excluded_classes.is_empty() {
        eprintln!(
            "note: classes {:?} have fewer than 2 samples and were left out of the same-class statistic",
            r.excluded_classes
        );
    }
    if r.levels_used < DEFAULT_MSSSIM_LEVELS {
        eprintln!(
            "note: images only support {} of {DEFAULT_MSSSIM_LEVELS} similarity scales",
            r.levels_used
        );
    }
    report.push_scalar("msssim_intra", r.intra_mean);
    report.push_scalar("msssim_intra_std", r.intra_std);
    report.push_scalar("msssim_inter", r.inter_mean);
    report.push_scalar("msssim_inter_std", r.inter_std);
    Ok(())
}

fn parse_embedding(spec: &str, seed: u64, real: &[Tensor]) -> Result<Embedding> {
    if spec == "identity" {
        return Ok(Embedding::IdentityFlatten);
    }
    if let Some(d) = spec.strip_prefix("proj:") {
        let dim = parse_dim(d, spec)?;
        return Ok(Embedding::RandomProjection { dim, seed });
    }
    if let Some(d) = spec.strip_prefix("pca:") {
        let dim = parse_dim(d, spec)?;
        return Ok(Embedding::Pca(fit_pca(real, dim)?));
    }
    Err(FlowError::Config(format!(
        "--embedding: expected identity, proj:<dim>, or pca:<dim>, got {spec:?}"
    )))
}

fn parse_dim(digits: &str, spec: &str) -> Result<usize> {
    match digits.parse::<usize>() {
        Ok(d) if d >= 1 => Ok(d),
        _ => Err(FlowError::Config(format!(
            "--embedding: dimension in {spec:?} must be a positive integer"
        ))),
    }
}

// ------------------------------------------------------------ atomic writes

fn io_at(path: &Path, e: io::Error) -> FlowError {
    FlowError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn tmp_sibling(path: &Path) -> Result<PathBuf> {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| FlowError::Config(format!("bad output path {}", path.display())))?;
    Ok(path.with_file_name(format!(".tmp{}.{name}", std::process::id())))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path)?;
    std::fs::write(&tmp, bytes).map_err(|e| io_at(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_at(path, e))?;
    Ok(())
}

fn atomic_checkpoint(model: &FlowModel, path: &Path) -> Result<()> {
    let tmp = tmp_sibling(path)?;
    save_checkpoint(model, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| io_at(path, e))?;
    Ok(())
}

/// The graymap exporter fans one base path out to .ten/.pgm/.scale.txt;
/// stage all three under a temp base, then rename each into place.
fn atomic_graymap(values: &Tensor, base: &Path) -> Result<()> {
    let tmp_base = tmp_sibling(base)?;
    export_graymap(values, &tmp_base)?;
    for ext in [".ten", ".pgm", ".scale.txt"] {
        let from = PathBuf::from(format!("{}{ext}", tmp_base.display()));
        let to = PathBuf::from(format!("{}{ext}", base.display()));
        std::fs::rename(&from, &to).map_err(|e| io_at(&to, e))?;
    }
    Ok(())
}
