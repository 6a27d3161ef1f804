//! Command-line entry point: synth, train, eval, gradcheck, losscurves.

use clap::{Args, Parser, Subcommand};
use dior::data::{self, Dataset, SynthConfig};
use dior::losses::{self, DiffLossKind, LossConfig};
use dior::metrics;
use dior::model::{self, ArchConfig, ModelParams};
use dior::optim::{self, ScheduleConfig, TrainConfig};
use dior::{Error, Result};
use serde::Deserialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dior", about = "Differential ordinal image classification", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ordinal dataset file.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Emit the loss-curve comparison table as CSV.
    Losscurves(LosscurvesArgs),
}

/// Flat JSON config file; flags override these, these override defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    classes: Option<u8>,
    per_class: Option<usize>,
    image_size: Option<u16>,
    sigma: Option<f64>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    diff_loss: Option<String>,
    lambda: Option<f64>,
    epsilon: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    train_frac: Option<f64>,
    val_frac: Option<f64>,
    split: Option<String>,
    pairs: Option<usize>,
    tolerance: Option<f64>,
    span: Option<i32>,
    patch_size: Option<u16>,
    token_dim: Option<usize>,
    num_blocks: Option<usize>,
    num_heads: Option<usize>,
    ff1: Option<usize>,
    ff2: Option<usize>,
    leaky_slope: Option<f64>,
    eta_max: Option<f64>,
    eta_min: Option<f64>,
    t_0: Option<usize>,
    t_mult: Option<usize>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[derive(Args)]
struct SynthArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of ordinal classes.
    #[arg(long)]
    classes: Option<u8>,
    /// Samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Square image side length in pixels.
    #[arg(long)]
    image_size: Option<u16>,
    /// Pixel noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file to train on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Differential loss arm: nad, mse, mae, mse+ceo, mae+ceo, or none.
    #[arg(long)]
    diff_loss: Option<String>,
    /// Weight of the differential loss term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of samples used for training.
    #[arg(long)]
    train_frac: Option<f64>,
    /// Fraction of samples used for validation (the rest is held out).
    #[arg(long)]
    val_frac: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Portion to evaluate: all, train, val, or test (split must match training).
    #[arg(long)]
    split: Option<String>,
    /// Fraction of samples in the training split.
    #[arg(long)]
    train_frac: Option<f64>,
    /// Fraction of samples in the validation split.
    #[arg(long)]
    val_frac: Option<f64>,
    /// Master seed (drives split and pair sampling).
    #[arg(long)]
    seed: Option<u64>,
    /// Additionally report mean |r - r_hat| over this many sampled pairs.
    #[arg(long)]
    pairs: Option<usize>,
    /// Report output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum allowed relative error per parameter group.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Negative-control hook: bias this group's analytic gradient.
    #[arg(long, hide = true)]
    corrupt_group: Option<usize>,
}

#[derive(Args)]
struct LosscurvesArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum class distance K; the table spans d in [-2K, 2K].
    #[arg(long)]
    span: Option<i32>,
    /// Saturation offset in the normalized absolute difference loss.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output CSV path (defaults to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Losscurves(args) => cmd_losscurves(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let cfg = SynthConfig {
        n_classes: pick(args.classes, file.classes, 4),
        per_class: pick(args.per_class, file.per_class, 250),
        image_size: pick(args.image_size, file.image_size, 32),
        channels: 1,
        noise_sigma: pick(args.sigma, file.sigma, 0.08),
        seed: pick(args.seed, file.seed, 0),
    };
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| Error::Config("synth requires --out".into()))?;
    cfg.validate()?;
    let dataset = data::generate_synthetic(&cfg)?;
    data::write_dataset_file(&dataset, &out)?;
    let meta = format!(
        "generator=sinusoidal-grade\nclasses={}\nper_class={}\nimage_size={}\nchannels={}\nnoise_sigma={}\nseed={}\n",
        cfg.n_classes, cfg.per_class, cfg.image_size, cfg.channels, cfg.noise_sigma, cfg.seed
    );
    fs::write(sidecar_path(&out), meta)?;
    println!("wrote {} ({} samples)", out.display(), dataset.len());
    for class in 1..=cfg.n_classes {
        let count = dataset.labels.iter().filter(|&&l| l == class).count();
        println!("class {class}: {count}");
    }
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.txt");
    PathBuf::from(s)
}

/// Architecture from config-file overrides plus the dataset's geometry.
fn arch_from(file: &FileConfig, dataset: &Dataset) -> Result<ArchConfig> {
    if dataset.height != dataset.width {
        return Err(Error::Config(format!(
            "model requires square images, dataset is {}x{}",
            dataset.height, dataset.width
        )));
    }
    let token_dim = file.token_dim.unwrap_or(64);
    let arch = ArchConfig {
        image_size: dataset.height,
        channels: dataset.channels,
        patch_size: file.patch_size.unwrap_or(8),
        token_dim,
        num_blocks: file.num_blocks.unwrap_or(4),
        num_heads: file.num_heads.unwrap_or(4),
        ff_hidden: (
            file.ff1.unwrap_or(128),
            file.ff2.unwrap_or(128),
            token_dim,
        ),
        num_classes: dataset.n_classes,
        leaky_slope: file.leaky_slope.unwrap_or(0.01),
    };
    arch.validate()?;
    Ok(arch)
}

fn split_fractions(train_frac: f64, val_frac: f64) -> Result<(f64, f64, f64)> {
    let test = 1.0 - train_frac - val_frac;
    if train_frac <= 0.0 || val_frac < 0.0 || test < -1e-9 {
        return Err(Error::Config(format!(
            "invalid split fractions: train {train_frac}, val {val_frac}"
        )));
    }
    Ok((train_frac, val_frac, test.max(0.0)))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let data_path = args
        .data
        .or(file.data.clone())
        .ok_or_else(|| Error::Config("train requires --data".into()))?;
    let out_dir = pick(args.out_dir, file.out_dir.clone(), PathBuf::from("."));
    let kind = DiffLossKind::parse(&pick(
        args.diff_loss,
        file.diff_loss.clone(),
        "nad".to_string(),
    ))?;
    let seed = pick(args.seed, file.seed, 0);
    let fractions = split_fractions(
        pick(args.train_frac, file.train_frac, 0.70),
        pick(args.val_frac, file.val_frac, 0.15),
    )?;

    let dataset = data::read_dataset_file(&data_path)?;
    let arch = arch_from(&file, &dataset)?;
    let cfg = TrainConfig {
        batch_size: pick(args.batch_size, file.batch_size, 16),
        epochs: pick(args.epochs, file.epochs, 50),
        seed,
        arch: arch.clone(),
        loss: LossConfig {
            lambda: pick(args.lambda, file.lambda, 6.5),
            epsilon: file.epsilon.unwrap_or(1e-5),
            span: dataset.n_classes as i32 - 1,
            kind,
        },
        schedule: ScheduleConfig {
            eta_max: file.eta_max.unwrap_or(1e-4),
            eta_min: file.eta_min.unwrap_or(0.0),
            t_0: file.t_0.unwrap_or(10),
            t_mult: file.t_mult.unwrap_or(2),
        },
    };
    cfg.validate()?;
    let (train_set, val_set, _test) = data::split(&dataset, fractions, seed)?;

    // Pre-flight the output paths so a bad directory fails before training.
    fs::create_dir_all(&out_dir)?;
    let log_path = out_dir.join("train_log.csv");
    let best_path = out_dir.join("model_best.ckpt");
    let final_path = out_dir.join("model_final.ckpt");
    let mut log_file = fs::File::create(&log_path)?;

    let params = ModelParams::<f32>::init(&arch, seed)?;
    let outcome = optim::train(params, &train_set, &val_set, &cfg)?;

    writeln!(log_file, "{}", optim::EpochRecord::csv_header())?;
    for rec in &outcome.log {
        writeln!(log_file, "{}", rec.to_csv())?;
    }
    model::write_checkpoint_file(&outcome.best, &best_path)?;
    model::write_checkpoint_file(&outcome.final_params, &final_path)?;
    println!(
        "trained {} epochs on {} samples (diff loss: {}, lambda {})",
        cfg.epochs,
        train_set.len(),
        cfg.loss.kind.as_str(),
        cfg.loss.lambda
    );
    if let Some(last) = outcome.log.last() {
        println!(
            "final: loss_total {:.6}, val_acc {:.6}, val_f1 {:.6}, val_kappa {:.6}",
            last.loss_total, last.val_acc, last.val_f1, last.val_kappa
        );
    }
    println!("wrote {}", log_path.display());
    println!("wrote {}", best_path.display());
    println!("wrote {}", final_path.display());
    Ok(())
}

/// Error out naming the first architecture dimension that disagrees
/// between a checkpoint and a dataset.
fn check_compat(arch: &ArchConfig, dataset: &Dataset) -> Result<()> {
    let checks: [(&str, usize, usize); 4] = [
        ("image height", arch.image_size as usize, dataset.height as usize),
        ("image width", arch.image_size as usize, dataset.width as usize),
        ("channels", arch.channels as usize, dataset.channels as usize),
        ("num_classes", arch.num_classes as usize, dataset.n_classes as usize),
    ];
    for (name, a, d) in checks {
        if a != d {
            return Err(Error::Config(format!(
                "checkpoint/dataset mismatch on {name}: checkpoint {a}, dataset {d}"
            )));
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let ckpt_path = args
        .checkpoint
        .or(file.checkpoint.clone())
        .ok_or_else(|| Error::Config("eval requires --checkpoint".into()))?;
    let data_path = args
        .data
        .or(file.data.clone())
        .ok_or_else(|| Error::Config("eval requires --data".into()))?;
    let seed = pick(args.seed, file.seed, 0);
    let which = pick(args.split, file.split.clone(), "all".to_string());

    let params = model::read_checkpoint_file(&ckpt_path)?;
    let dataset = data::read_dataset_file(&data_path)?;
    check_compat(&params.arch, &dataset)?;

    let subset = if which == "all" {
        dataset.clone()
    } else {
        let fractions = split_fractions(
            pick(args.train_frac, file.train_frac, 0.70),
            pick(args.val_frac, file.val_frac, 0.15),
        )?;
        let (tr, va, te) = data::split(&dataset, fractions, seed)?;
        match which.as_str() {
            "train" => tr,
            "val" => va,
            "test" => te,
            other => {
                return Err(Error::Config(format!(
                    "unknown split `{other}` (expected all, train, val, or test)"
                )))
            }
        }
    };

    let cm = optim::evaluate(&params, &subset)?;
    let mut report = Vec::new();
    metrics::write_report(&mut report, &cm)?;
    let pairs = args.pairs.or(file.pairs);
    if let Some(budget) = pairs {
        let mean = optim::mean_pair_error(&params, &subset, budget, seed)?;
        report.extend_from_slice(format!("pairs,{budget},{mean:.6}\n").as_bytes());
    }
    print!("{}", String::from_utf8_lossy(&report));
    if let Some(out) = args.out.or(file.out) {
        fs::write(&out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let seed = pick(args.seed, file.seed, 0);
    let tolerance = pick(args.tolerance, file.tolerance, 1e-5);
    let arch = ArchConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        token_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        ff_hidden: (16, 16, 8),
        num_classes: 2,
        leaky_slope: 0.01,
    };
    let batch = data::generate_synthetic(&SynthConfig {
        n_classes: 2,
        per_class: 2,
        image_size: 8,
        channels: 1,
        noise_sigma: 0.05,
        seed,
    })?;
    let images: Vec<&[f32]> = batch.images.iter().map(|v| v.as_slice()).collect();
    let loss_cfg = LossConfig {
        span: 1,
        ..LossConfig::default()
    };
    let report = optim::grad_check_groups(
        &arch,
        &loss_cfg,
        &images,
        &batch.labels,
        seed,
        1e-5,
        args.corrupt_group,
    )?;
    let mut failing = Vec::new();
    for (name, err) in &report {
        let status = if *err < tolerance { "ok" } else { "FAIL" };
        println!("{name}: max rel err {err:.3e} [{status}]");
        if *err >= tolerance {
            failing.push(name.clone());
        }
    }
    if failing.is_empty() {
        println!("gradcheck passed: {} groups < {tolerance:e}", report.len());
        Ok(())
    } else {
        Err(Error::NumericDomain {
            op: "gradcheck",
            detail: format!(
                "{} of {} groups exceed tolerance {tolerance:e}: {}",
                failing.len(),
                report.len(),
                failing.join(", ")
            ),
        })
    }
}

fn cmd_losscurves(args: LosscurvesArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let span = pick(args.span, file.span, 3);
    let epsilon = pick(args.epsilon, file.epsilon, 1e-5);
    if span < 1 {
        return Err(Error::Config(format!("span must be >= 1, got {span}")));
    }
    let limit = 2.0 * span as f64;
    let rows = losses::loss_curve_table(span, epsilon, -limit, limit, 0.01)?;
    match args.out.or(file.out) {
        Some(out) => {
            let mut buf = Vec::new();
            losses::write_loss_curve_csv(&mut buf, &rows)?;
            fs::write(&out, buf)?;
            println!("wrote {} ({} rows)", out.display(), rows.len());
        }
        None => {
            let stdout = std::io::stdout();
            losses::write_loss_curve_csv(stdout.lock(), &rows)?;
        }
    }
    Ok(())
}
