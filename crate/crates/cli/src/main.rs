//! `unblur` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical divergence during training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use unblur::blur::{build_blurred_set, TrajectoryParams, DEFAULT_KERNEL_SIZE};
use unblur::checkpoint::Checkpoint;
use unblur::config::{AblationPreset, TrainConfig};
use unblur::experiment::{ablation_variants, lambda_p_variants, run_variants};
use unblur::features::{self, Depth};
use unblur::image::ImageTensor;
use unblur::manifest::{is_image_name, Manifest, MANIFEST_FILE};
use unblur::metrics::{self, OcrAdapter};
use unblur::train::{self, Dataset};
use unblur::{glyphs, Error};

/// Default parent directory for outputs when `--out` is omitted.
const OUT_ROOT_ENV: &str = "UNBLUR_OUT_ROOT";

#[derive(Parser)]
#[command(name = "unblur", version, about = "Unsupervised domain-specific deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize motion-blurred copies of a sharp image set.
    Blurgen(BlurgenArgs),
    /// Train a model on unpaired sharp and blurred manifests.
    Train(TrainArgs),
    /// Deblur one image or a directory of images with a trained checkpoint.
    Deblur(DeblurArgs),
    /// Compare result images against same-named ground truth.
    Evaluate(EvaluateArgs),
    /// Train and score the five component-ablation variants.
    Ablate(VariantArgs),
    /// Train and score the full model for each swept lambda_p.
    #[command(name = "sweep-lambda-p")]
    SweepLambdaP(VariantArgs),
    /// Write a synthetic glyph corpus (PNG images, text labels, manifest).
    SynthGlyphs(GlyphArgs),
}

#[derive(Args)]
struct BlurgenArgs {
    /// Sharp manifest file, or a directory of images.
    #[arg(long)]
    sharp: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    max_len: f64,
    #[arg(long, default_value_t = 0.005)]
    p_impulsive: f64,
    #[arg(long, default_value_t = 0.5)]
    shake_min: f64,
    #[arg(long, default_value_t = 1.0)]
    shake_max: f64,
    #[arg(long, default_value_t = 2000)]
    num_steps: usize,
    #[arg(long, default_value_t = 20.0)]
    impulse_factor: f64,
    #[arg(long, default_value_t = DEFAULT_KERNEL_SIZE)]
    kernel_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file of `key = value` lines; omitted keys keep defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sharp: PathBuf,
    #[arg(long)]
    blurred: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from an epoch checkpoint written with the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the ablation preset.
    #[arg(long)]
    ablation: Option<String>,
    /// Override a configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DeblurArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image file or directory.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// VGG-19 safetensors weights for the feature distance; defaults to the
    /// built-in surrogate extractor.
    #[arg(long)]
    vgg19: Option<PathBuf>,
    /// OCR command; it is run as `<command> <image>` and must print the
    /// recognized text.
    #[arg(long)]
    ocr: Option<String>,
    /// Write per-image records to this file.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct VariantArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sharp: PathBuf,
    #[arg(long)]
    blurred: PathBuf,
    /// Held-out blurred images.
    #[arg(long)]
    eval_blurred: PathBuf,
    /// Sharp ground truth for the held-out images, same file names.
    #[arg(long)]
    eval_sharp: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Stop starting new variants after this many minutes.
    #[arg(long)]
    time_budget_min: Option<f64>,
}

#[derive(Args)]
struct GlyphArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    chars: usize,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Param(msg.into())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Param(_) | Error::Config(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn out_dir(given: Option<PathBuf>, verb: &str) -> PathBuf {
    given.unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(verb)
    })
}

fn require_file(path: &Path, what: &str) -> unblur::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` is not a file", path.display())))
    }
}

fn load_config(path: Option<&Path>, overrides: &[String], ablation: Option<&str>) -> unblur::Result<TrainConfig> {
    let mut text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::default();
    cfg.apply_text(&text)?;
    text.clear();
    for o in overrides {
        if !o.contains('=') {
            return Err(usage(format!("--set expects KEY=VALUE, got `{o}`")));
        }
        text.push_str(o);
        text.push('\n');
    }
    cfg.apply_text(&text)?;
    if let Some(a) = ablation {
        cfg.ablation_preset = a.parse::<AblationPreset>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn blurgen(a: BlurgenArgs) -> unblur::Result<()> {
    let params = TrajectoryParams {
        num_steps: a.num_steps,
        max_len: a.max_len,
        p_impulsive: a.p_impulsive,
        gaussian_shake_range: (a.shake_min, a.shake_max),
        impulse_factor: a.impulse_factor,
        seed: a.seed,
        ..TrajectoryParams::default()
    };
    params.validate()?;
    let (manifest, base) = if a.sharp.is_dir() {
        (Manifest::scan_dir(&a.sharp)?, a.sharp.clone())
    } else {
        require_file(&a.sharp, "sharp manifest")?;
        Manifest::read(&a.sharp)?
    };
    let out = out_dir(a.out, "blurgen");
    println!(
        "max_len = {}\np_impulsive = {}\ngaussian_shake_range = {}, {}\nnum_steps = {}\nimpulse_factor = {}\nkernel_size = {}\nseed = {}",
        params.max_len,
        params.p_impulsive,
        params.gaussian_shake_range.0,
        params.gaussian_shake_range.1,
        params.num_steps,
        params.impulse_factor,
        a.kernel_size,
        params.seed
    );
    let m = build_blurred_set(&manifest, &base, &out, &params, a.kernel_size)?;
    let skipped = m.records.iter().filter(|r| r.is_skipped()).count();
    println!(
        "wrote {} blurred images ({skipped} skipped) and {}",
        m.len() - skipped,
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> unblur::Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides, a.ablation.as_deref())?;
    require_file(&a.sharp, "sharp manifest")?;
    require_file(&a.blurred, "blurred manifest")?;
    if let Some(r) = &a.resume {
        require_file(r, "checkpoint")?;
    }
    let out = out_dir(a.out, "train");
    let last = train::train(&cfg, &a.sharp, &a.blurred, &out, a.resume.as_deref())?;
    println!("{}", last.display());
    Ok(())
}

/// Mirrors the image at its bottom/right edges up to the next multiple of 8.
fn pad_to_8(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = img.dims();
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mirror = |i: usize, n: usize| {
        let period = 2 * n;
        let j = i % period;
        if j < n {
            j
        } else {
            period - 1 - j
        }
    };
    ImageTensor::from_fn(c, ph, pw, |ch, y, x| img.get(ch, mirror(y, h), mirror(x, w)))
}

fn deblur_cmd(a: DeblurArgs) -> unblur::Result<()> {
    require_file(&a.ckpt, "checkpoint")?;
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .map_err(|e| Error::Data(format!("{}: {e}", a.input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(is_image_name))
            .collect();
        v.sort();
        v
    } else if a.input.is_file() {
        vec![a.input.clone()]
    } else {
        return Err(usage(format!("input `{}` does not exist", a.input.display())));
    };
    let state = Checkpoint::load(&a.ckpt)?.state;
    let out = out_dir(a.out, "deblur");
    std::fs::create_dir_all(&out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let mut written = 0;
    for path in &inputs {
        let img = match ImageTensor::load(path, Some(state.config.image_channels)) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let (_, h, w) = img.dims();
        let restored = train::deblur(&state, &pad_to_8(&img))?;
        let cropped = if restored.dims() == img.dims() {
            restored
        } else {
            ImageTensor::from_fn(restored.channels(), h, w, |c, y, x| restored.get(c, y, x))
        };
        let name = path.file_name().expect("file path");
        let target = out.join(Path::new(name).with_extension("png"));
        cropped.save(&target)?;
        written += 1;
    }
    println!("wrote {written} of {} images to {}", inputs.len(), out.display());
    if written == 0 && !inputs.is_empty() {
        return Err(Error::Data("no input image could be decoded".into()));
    }
    Ok(())
}

fn first_image_channels(dir: &Path) -> unblur::Result<usize> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(is_image_name))
        .collect();
    names.sort();
    let first = names
        .first()
        .ok_or_else(|| Error::Data(format!("{}: no images", dir.display())))?;
    Ok(ImageTensor::load(first, None)?.channels())
}

fn evaluate_cmd(a: EvaluateArgs) -> unblur::Result<()> {
    for (d, what) in [(&a.results, "results"), (&a.truth, "truth")] {
        if !d.is_dir() {
            return Err(usage(format!("{what} directory `{}` does not exist", d.display())));
        }
    }
    let ocr = match a.ocr.as_deref() {
        Some(cmd) => Some(OcrAdapter::parse(cmd).ok_or_else(|| usage("empty --ocr command"))?),
        None => None,
    };
    let channels = first_image_channels(&a.truth)?;
    let extractor = features::build(a.vgg19.as_deref(), channels, Depth::Pool5)?;
    let report = metrics::evaluate(&a.results, &a.truth, extractor.as_ref(), ocr.as_ref())?;
    print!("{}", report.render_table());
    for n in &report.unmatched {
        eprintln!("unmatched: {n}");
    }
    if ocr.is_some() && report.aggregates.cer.is_none() {
        eprintln!("CER unavailable: OCR command failed or no ground-truth text found");
    }
    if let Some(p) = &a.records {
        std::fs::write(p, report.render_records()).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn load_pairs(blurred_dir: &Path, sharp_dir: &Path, channels: usize) -> unblur::Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
    let mut names: Vec<String> = std::fs::read_dir(blurred_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", blurred_dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| is_image_name(n) && sharp_dir.join(n).is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!(
            "no held-out image in {} has a counterpart in {}",
            blurred_dir.display(),
            sharp_dir.display()
        )));
    }
    let mut b = Vec::new();
    let mut s = Vec::new();
    for n in &names {
        b.push(ImageTensor::load(&blurred_dir.join(n), Some(channels))?);
        s.push(ImageTensor::load(&sharp_dir.join(n), Some(channels))?);
    }
    Ok((b, s))
}

fn variants_cmd(a: VariantArgs, sweep: bool) -> unblur::Result<()> {
    let base = load_config(a.config.as_deref(), &a.overrides, None)?;
    require_file(&a.sharp, "sharp manifest")?;
    require_file(&a.blurred, "blurred manifest")?;
    if let Some(m) = a.time_budget_min {
        if !(m.is_finite() && m > 0.0) {
            return Err(usage("--time-budget-min must be positive"));
        }
    }
    let channels = base.net.image_channels;
    let sharp = Dataset::load(&a.sharp, channels)?;
    let blurred = Dataset::load(&a.blurred, channels)?;
    let (held_b, held_s) = load_pairs(&a.eval_blurred, &a.eval_sharp, channels)?;
    let extractor = features::build(base.vgg19_weights.as_deref(), channels, Depth::Pool5)?;
    let (verb, variants, table) = if sweep {
        ("sweep-lambda-p", lambda_p_variants(&base), "sweep_lambda_p.tsv")
    } else {
        ("ablate", ablation_variants(&base), "ablation.tsv")
    };
    let out = out_dir(a.out, verb);
    let rows = run_variants(
        &variants,
        &sharp,
        &blurred,
        &held_b,
        &held_s,
        extractor.as_ref(),
        &out,
        table,
        a.time_budget_min.map(|m| Duration::from_secs_f64(m * 60.0)),
    )?;
    print!("{}", metrics::render_summary_table(&rows));
    Ok(())
}

fn synth_glyphs(a: GlyphArgs) -> unblur::Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    let items = glyphs::corpus(a.count, a.seed, a.size, a.chars)?;
    let out = out_dir(a.out, "glyphs");
    glyphs::write_corpus(&out, &items)?;
    println!("wrote {} glyph images to {}", a.count, out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Blurgen(a) => blurgen(a),
        Command::Train(a) => train_cmd(a),
        Command::Deblur(a) => deblur_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => variants_cmd(a, false),
        Command::SweepLambdaP(a) => variants_cmd(a, true),
        Command::SynthGlyphs(a) => synth_glyphs(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
