//! Command-line entry points: train, sample, eval, dwt-roundtrip.
//!
//! Exit codes: 0 success, 2 configuration/data/usage errors, 3 numeric
//! failures (non-finite losses, broken round-trips).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_params_into, snapshot_train_state, Checkpoint};
use crate::config::RunConfig;
use crate::datapipe::{
    load_image_chw, make_pair, normalize, pack_lr, to_image, Dataset, DatasetManifest,
    SamplePair, Split,
};
use crate::diffusion::{sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, export_samples, SamplingGenerator};
use crate::networks::{Generator, Params};
use crate::rng::{InitRng, NoiseState};
use crate::training::TrainState;
use crate::wavelet::{dwt2d, idwt2d, Band};

/// Environment variable consulted for a default output directory when no
/// `--out-dir` flag is given.
pub const OUT_DIR_ENV: &str = "WAVESR_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "wavesr",
    version,
    about = "Wavelet-domain conditional diffusion GAN for single-image super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a directory of images.
    Train(TrainArgs),
    /// Super-resolve one image with a trained checkpoint.
    Sample(SampleArgs),
    /// Compute PSNR/SSIM over a dataset split and export sample grids.
    Eval(EvalArgs),
    /// Check the analysis/synthesis transform round-trip on one image.
    DwtRoundtrip(DwtArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (flat `key = value` lines). Defaults apply
    /// for every key the file omits; no file means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set run.iterations=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to $WAVESR_OUT_DIR, then run.out_dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint written by `wavesr train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image: either a low-res input (target/scale square) or a
    /// high-res reference (target square) that is degraded first.
    #[arg(long)]
    input: PathBuf,
    /// Output directory (falls back to $WAVESR_OUT_DIR, then ".").
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sample with the exponential-moving-average weights.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_ema: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `wavesr train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest (defaults to manifest.txt next to the checkpoint).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output directory (falls back to $WAVESR_OUT_DIR/eval_<split>, then
    /// eval_<split> next to the checkpoint).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Evaluate the exponential-moving-average weights.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_ema: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DwtArgs {
    /// Image to analyze (even height and width required).
    #[arg(long)]
    input: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Parse arguments from the process environment and run one command.
/// Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Sample(args) => cmd_sample(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::DwtRoundtrip(args) => cmd_dwt_roundtrip(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn env_out_dir() -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn save_checkpoint(state: &TrainState, echo: &str, path: &Path) -> Result<()> {
    // Write-then-rename keeps the previous checkpoint intact if this save
    // dies partway.
    let tmp = path.with_extension("tmp");
    snapshot_train_state(state, echo).save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    if let Some(seed) = args.seed {
        cfg.run_seed = seed;
    }
    cfg.validate()?;
    // The echo records everything that shapes the model and the data;
    // where outputs land is execution plumbing and stays out of it.
    let echo = cfg.serialize();
    let out_dir = args
        .out_dir
        .or_else(env_out_dir)
        .unwrap_or_else(|| PathBuf::from(&cfg.run_out_dir));
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.txt"), &echo)?;

    let manifest = DatasetManifest::scan(
        Path::new(&cfg.data_root),
        cfg.data_split_seed,
        cfg.data_train_ratio,
        cfg.data_target_size,
        cfg.data_scale_factor,
    )?;
    manifest.save(&out_dir.join("manifest.txt"))?;
    let dataset = Dataset::load(&manifest)?;
    dataset.write_rejects(&out_dir.join("rejects.log"))?;
    let n_train = dataset.len(Split::Train);
    println!(
        "dataset: {} train / {} test images from {}",
        n_train,
        dataset.len(Split::Test),
        manifest.root.display()
    );

    // Pairs are deterministic functions of the HR pixels; build each once.
    let pairs: Vec<SamplePair> =
        (0..n_train).map(|i| dataset.pair(Split::Train, i)).collect::<Result<_>>()?;

    let schedule = cfg.make_diffusion_schedule()?;
    let mut state = TrainState::new(
        cfg.to_generator_config(),
        cfg.to_discriminator_config(),
        schedule,
        cfg.to_train_config(),
        cfg.run_seed,
    )?;
    println!(
        "model: {} generator + {} discriminator parameters, {} diffusion steps",
        state.gen_params.count_parameters(),
        state.disc_params.count_parameters(),
        state.schedule.steps()
    );

    let log_path = out_dir.join("train_log.csv");
    let ckpt_path = out_dir.join("checkpoint.wsr");
    let mut log = String::from("iteration,d_adv,r1,d_total,g_adv,rec,g_total,seconds\n");
    let started = Instant::now();
    let mut epoch = 0u64;
    let mut order = dataset.epoch_order(cfg.run_seed, epoch);
    let mut cursor = 0usize;

    for it in 0..cfg.run_iterations {
        let mut batch_pos = Vec::with_capacity(cfg.run_batch_size);
        for _ in 0..cfg.run_batch_size {
            if cursor == order.len() {
                epoch += 1;
                order = dataset.epoch_order(cfg.run_seed, epoch);
                cursor = 0;
            }
            batch_pos.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<&SamplePair> = batch_pos.iter().map(|&i| &pairs[i]).collect();
        let stats = match state.train_step(&batch) {
            Ok(s) => s,
            Err(e) => {
                // Keep the log and whatever checkpoint was saved last.
                let _ = fs::write(&log_path, &log);
                return Err(e);
            }
        };
        let r1 = stats.r1.map(|v| format!("{v:.6}")).unwrap_or_default();
        log.push_str(&format!(
            "{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            stats.iteration,
            stats.d_adv,
            r1,
            stats.d_total,
            stats.g_adv,
            stats.rec,
            stats.g_total,
            started.elapsed().as_secs_f64()
        ));
        if (it + 1) % cfg.run_log_interval == 0 || it + 1 == cfg.run_iterations {
            println!(
                "iter {:>6}  d {:.4}  g_adv {:.4}  rec {:.4}  ({:.1}s)",
                stats.iteration,
                stats.d_total,
                stats.g_adv,
                stats.rec,
                started.elapsed().as_secs_f64()
            );
        }
        if (it + 1) % cfg.run_checkpoint_interval == 0 && it + 1 != cfg.run_iterations {
            save_checkpoint(&state, &echo, &ckpt_path)?;
        }
    }
    save_checkpoint(&state, &echo, &ckpt_path)?;
    fs::write(&log_path, &log)?;
    println!(
        "trained {} iterations in {:.1}s; checkpoint at {}",
        cfg.run_iterations,
        started.elapsed().as_secs_f64(),
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample / eval
// ---------------------------------------------------------------------------

struct LoadedModel {
    cfg: RunConfig,
    gen: Generator,
    params: Params,
    schedule: DiffusionSchedule,
}

fn load_model(ckpt: &Checkpoint, use_ema: bool) -> Result<LoadedModel> {
    let cfg = RunConfig::parse(&ckpt.config_echo)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut params = Params::new();
    // Weights are overwritten from the checkpoint; the init seed is moot.
    let mut rng = InitRng::new(0);
    let gen = Generator::new(cfg.to_generator_config(), &mut params, &mut rng)?;
    let group = if use_ema { "ema" } else { "gen" };
    let arrays = ckpt
        .group(group)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing group '{group}'")))?;
    load_params_into(&mut params, arrays, group)?;
    let schedule = DiffusionSchedule::from_betas(&ckpt.betas)?;
    Ok(LoadedModel { cfg, gen, params, schedule })
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = load_model(&ckpt, args.use_ema)?;
    let target = model.cfg.data_target_size;
    let s = model.cfg.data_scale_factor;
    let lr_side = target / s;

    let (img, h, w) = load_image_chw(&args.input)?;
    let stem = args
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());

    // High-res reference inputs are degraded first (so the result can be
    // scored against them); low-res inputs are conditioned on directly.
    let (x_lr, reference) = if h == target && w == target {
        let pair = make_pair(&img, 3, h, w, s, &stem)?;
        (pair.x_lr, Some(img))
    } else if h == lr_side && w == lr_side {
        (pack_lr(&normalize(&img), 3, h, w, target, target)?, None)
    } else {
        return Err(Error::Shape(format!(
            "input must be {target}x{target} (reference) or {lr_side}x{lr_side} (low-res), got {h}x{w}"
        )));
    };

    let sgen = SamplingGenerator::new(&model.gen, &model.params);
    let cond = x_lr.to_tensor();
    let zeros = crate::tensor::Tensor::zeros(cond.shape());
    sgen.validate(&zeros, &cond, model.schedule.steps())?;

    let mut noise = NoiseState::new(args.seed);
    let sr_packet = sample(&sgen, &x_lr, &model.schedule, &mut noise)?;
    let sr_image = to_image(&sr_packet)?;

    let out_dir = args
        .out_dir
        .or_else(env_out_dir)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let out_path = out_dir.join(format!("{stem}_sr.png"));
    sr_image.save(&out_path)?;
    println!("wrote {} ({target}x{target})", out_path.display());

    if let Some(hr01) = reference {
        let sr01 = crate::datapipe::denormalize(&idwt2d(&sr_packet)?);
        let p = crate::metrics::psnr(&sr01, &hr01)?;
        let ss = crate::metrics::ssim(&sr01, &hr01, 3, target, target)?;
        println!("vs reference: PSNR {p:.4} dB  SSIM {ss:.6}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = load_model(&ckpt, args.use_ema)?;
    let ckpt_dir = args.checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| ckpt_dir.join("manifest.txt"));
    let manifest = DatasetManifest::load(&manifest_path)?;
    let dataset = Dataset::load(&manifest)?;
    let split: Split = args.split.into();
    let split_name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let out_dir = args.out_dir.unwrap_or_else(|| {
        env_out_dir()
            .unwrap_or_else(|| ckpt_dir.to_path_buf())
            .join(format!("eval_{split_name}"))
    });
    fs::create_dir_all(&out_dir)?;

    let report = evaluate_split(
        &model.gen,
        &model.params,
        &model.schedule,
        &dataset,
        split,
        args.seed,
    )?;
    let export = export_samples(
        &model.gen,
        &model.params,
        &model.schedule,
        &dataset,
        split,
        &out_dir,
        args.seed,
    )?;
    fs::write(out_dir.join("metrics.csv"), report.to_csv())?;

    println!(
        "{split_name} split: {} images, {} exported files in {}",
        report.n_images(),
        3 * export.rows.len(),
        out_dir.display()
    );
    println!(
        "PSNR  model {:.4} dB   bicubic {:.4} dB",
        report.psnr_sr, report.psnr_bicubic
    );
    println!(
        "SSIM  model {:.6}   bicubic {:.6}",
        report.ssim_sr, report.ssim_bicubic
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// dwt-roundtrip
// ---------------------------------------------------------------------------

fn cmd_dwt_roundtrip(args: DwtArgs) -> Result<()> {
    let (img, h, w) = load_image_chw(&args.input)?;
    let signed = normalize(&img);
    let packet = dwt2d(&signed, 3, h, w, true)?;
    let recon = idwt2d(&packet)?;
    let max_err = signed
        .iter()
        .zip(&recon)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);

    let energy = |b: Band| packet.band(b).iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
    let (ell, elh, ehl, ehh) = (energy(Band::Ll), energy(Band::Lh), energy(Band::Hl), energy(Band::Hh));
    let total = (ell + elh + ehl + ehh).max(f64::MIN_POSITIVE);

    println!("image {}x{} ({} channels)", w, h, 3);
    println!("max round-trip error {max_err:.3e}");
    println!(
        "energy shares  LL {:.4}  LH {:.4}  HL {:.4}  HH {:.4}",
        ell / total,
        elh / total,
        ehl / total,
        ehh / total
    );
    if max_err < 1e-5 {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "round-trip error {max_err:.3e} exceeds 1e-5"
        )))
    }
}
