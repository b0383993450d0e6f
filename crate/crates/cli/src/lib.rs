//! Command-line harness: training, coding, evaluation and ablations.
//!
//! [`run`] is the whole program; `main` only forwards `argv` and the exit
//! code. Failures are reported as one JSON object on stderr:
//!
//! ```text
//! {"error":{"kind":"corrupt","message":"corrupt data at byte 40: payload truncated"}}
//! ```

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cae_core::cae::{CaeModel, Ensemble, Tradeoff};
use cae_core::coder::{self, CompressOptions, Policy, Setting};
use cae_core::image::RgbImage;
use cae_core::metrics::{self, RdPoint};
use cae_core::model_io::{load_ensemble, save_ensemble, write_atomic};
use cae_core::nn::SurrogateMode;
use cae_core::synth;
use cae_core::trainer::{self, Dataset, TraceRow};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use config::{Profile, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cae_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        use cae_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Core(e) => match e {
                E::ShapeMismatch { .. } | E::InvalidShape { .. } => "shape",
                E::InvalidArgument(_) => "invalid_argument",
                E::NotScalar(_) | E::ForeignVar => "internal",
                E::NonFinite(_) => "non_finite",
                E::Diverged { .. } => "diverged",
                E::Corrupt { .. } => "corrupt",
                E::Format(_) => "format",
                E::TargetUnreachable { .. } => "target_unreachable",
                E::Io(_) => "io",
            },
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut err = json!({"kind": self.kind(), "message": self.to_string()});
        if let CliError::Core(cae_core::Error::TargetUnreachable { target, achievable }) = self {
            err["target_bpp"] = json!(target);
            err["achievable_bpp"] = json!(achievable);
        }
        if let CliError::Core(cae_core::Error::Corrupt { offset, .. }) = self {
            err["offset"] = json!(offset);
        }
        json!({ "error": err })
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser, Serialize)]
#[command(name = "cae", version, about = "Compressive autoencoder image codec")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    #[serde(skip)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Train an ensemble and write the model file plus loss traces.
    Train(TrainArgs),
    /// Add fine-tuned scale sets to trained models.
    Finetune(FinetuneArgs),
    /// Refit the coding tables of every scale set.
    Histograms(HistogramArgs),
    /// Compress one image.
    Compress(CompressArgs),
    /// Decompress one file to PPM.
    Decompress(DecompressArgs),
    /// Rate-distortion table for a directory of images.
    Evaluate(EvaluateArgs),
    /// Ablation studies.
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Write a seeded synthetic texture corpus as PPM files.
    GenData(GenDataArgs),
    /// Re-execute a command from its `.run.json` record.
    Rerun(RerunArgs),
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// JSON run configuration; defaults come from --profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// Training image directory (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct FinetuneArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Target tradeoff α of the new scale set.
    #[arg(long)]
    alpha: f64,
    /// Only fine-tune this model (default: all).
    #[arg(long)]
    model_id: Option<u8>,
    #[arg(long, default_value_t = 300)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    crop_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct HistogramArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rate budget in bits per pixel, header included.
    #[arg(long, conflicts_with = "setting")]
    target_bpp: Option<f64>,
    /// How to choose among settings under the budget.
    #[arg(long, value_enum, default_value = "max-rate")]
    policy: PolicyArg,
    /// Explicit setting `MODEL:SET[:WEIGHT]`, weight in 1/65536 units.
    #[arg(long)]
    setting: Option<String>,
    #[arg(long, default_value_t = 3)]
    interp_steps: u16,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PolicyArg {
    MaxRate,
    MinDistortion,
}

#[derive(Debug, Args, Serialize)]
struct DecompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// External (bpp, metric) CSVs to overlay in the plot script.
    #[arg(long)]
    baseline: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    interp_steps: u16,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AblateCommand {
    /// Reconstruction error with and without rounding of the coefficients.
    NoRound(NoRoundArgs),
    /// Train twin models with the rounding and additive-noise surrogates.
    Surrogates(SurrogateArgs),
}

#[derive(Debug, Args, Serialize)]
struct NoRoundArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    model_id: Option<u8>,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SurrogateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out images; a synthetic set is generated when absent.
    #[arg(long)]
    test_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tradeoff for both twins (default: the config's second preset, or the
    /// first when there is only one).
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct RerunArgs {
    record: PathBuf,
}

/// Run the program on `argv` (including the program name); returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""));
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).is_test(false).try_init();
    match dispatch(&cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &Command, argv: &[OsString]) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Finetune(a) => {
            finetune(a)?;
            record(&a.out, argv)
        }
        Command::Histograms(a) => {
            histograms(a)?;
            record(&a.out, argv)
        }
        Command::Compress(a) => {
            compress(a)?;
            record(&a.out, argv)
        }
        Command::Decompress(a) => {
            decompress(a)?;
            record(&a.out, argv)
        }
        Command::Evaluate(a) => {
            evaluate(a)?;
            record(&a.out, argv)
        }
        Command::Ablate(AblateCommand::NoRound(a)) => {
            ablate_no_round(a)?;
            record(&a.out, argv)
        }
        Command::Ablate(AblateCommand::Surrogates(a)) => ablate_surrogates(a, argv),
        Command::GenData(a) => {
            gen_data(a)?;
            record(&a.out.join("corpus"), argv)
        }
        Command::Rerun(a) => rerun(a),
    }
}

/// Write `<output>.run.json` holding the argument vector and working
/// directory that produced `output`.
fn record(output: &Path, argv: &[OsString]) -> Result<()> {
    let args: Vec<String> = argv.iter().skip(1).map(|s| s.to_string_lossy().into_owned()).collect();
    let cwd = std::env::current_dir()?;
    let doc = json!({ "args": args, "cwd": cwd });
    let mut name = output.file_name().map(OsString::from).unwrap_or_default();
    name.push(".run.json");
    write_atomic(&output.with_file_name(name), serde_json::to_string_pretty(&doc).expect("json").as_bytes())?;
    Ok(())
}

fn rerun(a: &RerunArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.record)?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", a.record.display())))?;
    let args: Vec<String> = doc["args"]
        .as_array()
        .and_then(|v| v.iter().map(|s| s.as_str().map(String::from)).collect())
        .ok_or_else(|| CliError::Config("record has no args array".into()))?;
    if let Some(cwd) = doc["cwd"].as_str() {
        std::env::set_current_dir(cwd)?;
    }
    let argv: Vec<OsString> = std::iter::once(OsString::from("cae")).chain(args.into_iter().map(OsString::from)).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(CliError::Usage("a record cannot rerun another record".into()));
    }
    dispatch(&cli.command, &argv)
}

/// PPM and PNG files of `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Usage(format!("no .ppm or .png images in {}", dir.display())));
    }
    Ok(out)
}

fn load_images(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().expect("file").to_string_lossy().into_owned();
            Ok((name, RgbImage::read(&p)?))
        })
        .collect()
}

fn dataset(images: &[RgbImage]) -> Result<Dataset> {
    Ok(Dataset::new(images.iter().map(RgbImage::to_tensor).collect())?)
}

fn training_images(cfg: &RunConfig) -> Result<Vec<RgbImage>> {
    match (&cfg.data_dir, &cfg.synthetic) {
        (Some(dir), _) => Ok(load_images(dir)?.into_iter().map(|(_, i)| i).collect()),
        (None, Some(s)) => Ok(synth::corpus(s.count, s.width, s.height, s.seed)),
        (None, None) => Err(CliError::Config("either data_dir or synthetic must be set".into())),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_profile(a.profile),
    };
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &a.out_dir {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.max_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train, fine-tune and fit coding tables as described by `cfg`.
pub fn train_from_config(cfg: &RunConfig) -> Result<Ensemble> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join("resolved_config.json"), cfg.to_json().as_bytes())?;
    let images = training_images(cfg)?;
    let data = dataset(&images)?;
    let base = cfg.cae_config(1)?;
    let mut traces: Vec<String> = Vec::new();
    let mut current: Option<u8> = None;
    let out_dir = cfg.out_dir.clone();
    let flush = |id: u8, rows: &[String]| -> Result<()> {
        write_csv(&out_dir.join(format!("trace_model{id}.csv")), TraceRow::CSV_HEADER, rows.iter().cloned())
    };
    let mut flush_err = None;
    let result = trainer::train_ensemble(&cfg.spec(), base, &data, &cfg.train_config(Tradeoff::Alpha(0.05)), |id, row| {
        if current != Some(id) {
            if let Some(prev) = current {
                if let Err(e) = flush(prev, &traces) {
                    flush_err.get_or_insert(e);
                }
            }
            traces.clear();
            current = Some(id);
        }
        traces.push(row.to_csv());
        if row.step % 500 == 0 {
            log::info!("model {id} step {} loss {:.4}", row.step, row.loss);
        }
    });
    if let Some(id) = current {
        flush(id, &traces)?;
    }
    if let Some(e) = flush_err {
        return Err(e);
    }
    let trained = result?;
    let mut models = Vec::with_capacity(trained.len());
    let mut events = Vec::new();
    for ((mut model, report), extra) in trained.into_iter().zip(&cfg.finetune.alphas) {
        events.push(json!({
            "model_id": model.id,
            "enable_events": report.enable_events,
            "lr_drop_step": report.lr_drop_step,
        }));
        for &alpha in extra {
            let set = trainer::finetune_scales(&model, &data, Tradeoff::Alpha(alpha), &cfg.finetune_config())?;
            model.add_scale_set(set)?;
        }
        coder::fit_all_histograms(&mut model, &images)?;
        models.push(model);
    }
    let ensemble = Ensemble::new(models)?;
    save_ensemble(&ensemble, &cfg.out_dir.join("ensemble.cae"))?;
    write_atomic(
        &cfg.out_dir.join("schedule.json"),
        serde_json::to_string_pretty(&events).expect("json").as_bytes(),
    )?;
    Ok(ensemble)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let ens = train_from_config(&cfg)?;
    print_json(json!({
        "models": ens.models().len(),
        "model_file": cfg.out_dir.join("ensemble.cae"),
        "config": cfg.out_dir.join("resolved_config.json"),
    }));
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let mut ens = load_ensemble(&a.models)?;
    let images: Vec<RgbImage> = load_images(&a.data)?.into_iter().map(|(_, i)| i).collect();
    let data = dataset(&images)?;
    let cfg = trainer::FinetuneConfig {
        iterations: a.iterations,
        batch_size: a.batch_size,
        crop_size: a.crop_size,
        schedule: trainer::PowerDecay::default(),
        seed: a.seed,
    };
    if let Some(id) = a.model_id {
        if ens.get(id).is_none() {
            return Err(CliError::Usage(format!("no model with id {id}")));
        }
    }
    let mut added = Vec::new();
    for m in ens.models_mut() {
        if a.model_id.is_some_and(|id| id != m.id) {
            continue;
        }
        let set = trainer::finetune_scales(m, &data, Tradeoff::Alpha(a.alpha), &cfg)?;
        let idx = m.add_scale_set(set)?;
        m.histograms[idx] = Some(coder::fit_histograms(m, &images, idx)?);
        added.push(json!({"model_id": m.id, "scale_set": idx}));
    }
    save_ensemble(&ens, &a.out)?;
    print_json(json!({ "added": added }));
    Ok(())
}

fn histograms(a: &HistogramArgs) -> Result<()> {
    let mut ens = load_ensemble(&a.models)?;
    let images: Vec<RgbImage> = load_images(&a.data)?.into_iter().map(|(_, i)| i).collect();
    for m in ens.models_mut() {
        coder::fit_all_histograms(m, &images)?;
    }
    save_ensemble(&ens, &a.out)?;
    print_json(json!({ "images": images.len() }));
    Ok(())
}

fn parse_setting(s: &str) -> Result<Setting> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Usage(format!("setting {s:?} is not MODEL:SET[:WEIGHT]"));
    if !(2..=3).contains(&parts.len()) {
        return Err(bad());
    }
    Ok(Setting {
        model_id: parts[0].parse().map_err(|_| bad())?,
        scale_set: parts[1].parse().map_err(|_| bad())?,
        interp_weight: parts.get(2).map(|w| w.parse()).transpose().map_err(|_| bad())?.unwrap_or(0),
    })
}

fn compress(a: &CompressArgs) -> Result<()> {
    let ens = load_ensemble(&a.model)?;
    let image = RgbImage::read(&a.input)?;
    let policy = match (&a.setting, a.target_bpp) {
        (Some(s), _) => Policy::Fixed(parse_setting(s)?),
        (None, Some(t)) => match a.policy {
            PolicyArg::MaxRate => Policy::MaxRateUnder(t),
            PolicyArg::MinDistortion => Policy::MinDistortionUnder(t),
        },
        (None, None) => return Err(CliError::Usage("one of --target-bpp or --setting is required".into())),
    };
    let opts = CompressOptions {
        interp_steps: a.interp_steps,
    };
    let cand = coder::compress(&ens, &image, policy, opts)?;
    write_atomic(&a.out, &cand.file.to_bytes())?;
    print_json(json!({
        "bytes": cand.file.len(),
        "bpp": cand.bpp(),
        "model_id": cand.setting.model_id,
        "scale_set": cand.setting.scale_set,
        "interp_weight": cand.setting.interp_weight,
        "mse": cand.mse,
        "psnr": metrics::psnr_from_mse(cand.mse),
    }));
    Ok(())
}

fn decompress(a: &DecompressArgs) -> Result<()> {
    let ens = load_ensemble(&a.model)?;
    let bytes = std::fs::read(&a.input)?;
    let img = coder::decompress(&bytes, &ens)?;
    let mut buf = Vec::new();
    img.write_ppm_to(&mut buf)?;
    write_atomic(&a.out, &buf)?;
    print_json(json!({"width": img.width(), "height": img.height()}));
    Ok(())
}

/// Codec label of a setting in RD tables.
pub fn setting_label(s: Setting) -> String {
    format!("cae-m{}-s{}-w{}", s.model_id, s.scale_set, s.interp_weight)
}

fn with_suffix(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ens = load_ensemble(&a.models)?;
    let images = load_images(&a.dir)?;
    let opts = CompressOptions {
        interp_steps: a.interp_steps,
    };
    let mut points: Vec<RdPoint> = Vec::new();
    for (name, img) in &images {
        for cand in coder::candidates(&ens, img, opts)? {
            points.push(RdPoint::measure(name, &setting_label(cand.setting), cand.bpp(), img, &cand.reconstruction)?);
        }
    }
    let rows = points.iter().map(|p| {
        let mut p = p.clone();
        p.image = csv_field(&p.image);
        p.to_csv()
    });
    write_csv(&a.out, RdPoint::CSV_HEADER, rows)?;

    // per-setting means, in first-seen order
    let mut labels: Vec<String> = Vec::new();
    for p in &points {
        if !labels.contains(&p.codec) {
            labels.push(p.codec.clone());
        }
    }
    let summary_path = with_suffix(&a.out, "_summary", "csv");
    let summary = labels.iter().map(|l| {
        let sel: Vec<&RdPoint> = points.iter().filter(|p| &p.codec == l).collect();
        let n = sel.len() as f64;
        let mean = |f: fn(&RdPoint) -> f64| sel.iter().map(|p| f(p)).sum::<f64>() / n;
        let mse = mean(|p| p.mse);
        format!(
            "{},{},{},{},{},{}",
            l,
            mean(|p| p.bpp),
            mse,
            metrics::psnr_from_mse(mse),
            mean(|p| p.ssim),
            mean(|p| p.ms_ssim)
        )
    });
    write_csv(&summary_path, "codec,bpp,mse,psnr,ssim,ms_ssim", summary)?;

    let gp_path = with_suffix(&a.out, "", "gp");
    write_atomic(&gp_path, plot_script(&summary_path, &a.baseline).as_bytes())?;
    print_json(json!({
        "rows": points.len(),
        "images": images.len(),
        "summary": summary_path,
        "plot": gp_path,
    }));
    Ok(())
}

/// gnuplot script plotting mean PSNR/SSIM/MS-SSIM against bpp; baseline CSVs
/// need a header with `bpp` and any of `psnr`, `ssim`, `ms_ssim`.
fn plot_script(summary: &Path, baselines: &[PathBuf]) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset key autotitle columnhead\nset xlabel 'bpp'\nset grid\n");
    s.push_str("set terminal pngcairo size 1400,450\nset output 'rd.png'\nset multiplot layout 1,3\n");
    for metric in ["psnr", "ssim", "ms_ssim"] {
        let _ = write!(
            s,
            "set ylabel '{metric}'\nplot '{}' using (column('bpp')):(column('{metric}')) with points pt 7 title 'cae'",
            summary.display()
        );
        for b in baselines {
            let _ = write!(
                s,
                ", \\\n     '{}' using (column('bpp')):(column('{metric}')) with linespoints title '{}'",
                b.display(),
                b.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default()
            );
        }
        s.push('\n');
    }
    s.push_str("unset multiplot\n");
    s
}

/// Mean squared error of reconstructions with and without rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct NoRoundRow {
    pub image: String,
    pub mse_rounded: f64,
    pub mse_unrounded: f64,
}

pub fn no_round_rows(model: &CaeModel, images: &[(String, RgbImage)]) -> Result<Vec<NoRoundRow>> {
    let scales = model.active_scales().log_scales.clone();
    images
        .iter()
        .map(|(name, img)| {
            let y = coder::analyze(model, img)?;
            let mut mse = [0.0; 2];
            for (k, round) in [true, false].into_iter().enumerate() {
                let codes = model.quantize_coefficients(&y, &scales, round)?;
                let x = model.reconstruct(&codes, &scales)?;
                let rec = RgbImage::from_tensor(&x)?.crop(img.width(), img.height())?;
                mse[k] = metrics::mse(img, &rec)?;
            }
            Ok(NoRoundRow {
                image: name.clone(),
                mse_rounded: mse[0],
                mse_unrounded: mse[1],
            })
        })
        .collect()
}

fn ablate_no_round(a: &NoRoundArgs) -> Result<()> {
    let ens = load_ensemble(&a.models)?;
    let model = match a.model_id {
        Some(id) => ens.get(id).ok_or_else(|| CliError::Usage(format!("no model with id {id}")))?,
        None => &ens.models()[0],
    };
    let images = load_images(&a.dir)?;
    let rows = no_round_rows(model, &images)?;
    let n = rows.len() as f64;
    let mean_r = rows.iter().map(|r| r.mse_rounded).sum::<f64>() / n;
    let mean_u = rows.iter().map(|r| r.mse_unrounded).sum::<f64>() / n;
    write_csv(
        &a.out,
        "image,mse_rounded,mse_unrounded",
        rows.iter()
            .map(|r| format!("{},{},{}", csv_field(&r.image), r.mse_rounded, r.mse_unrounded))
            .chain(std::iter::once(format!("mean,{mean_r},{mean_u}"))),
    )?;
    print_json(json!({
        "model_id": model.id,
        "mean_mse_rounded": mean_r,
        "mean_mse_unrounded": mean_u,
        "unrounded_better": mean_u < mean_r,
    }));
    Ok(())
}

/// Result of coding held-out images with one twin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurrogateRow {
    pub surrogate: String,
    pub image: String,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub final_loss: f64,
}

fn ablate_surrogates(a: &SurrogateArgs, argv: &[OsString]) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_profile(Profile::Desk),
    };
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(s) = a.steps {
        cfg.train.max_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.out_dir = a.out_dir.clone();
    cfg.validate()?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_atomic(&a.out_dir.join("resolved_config.json"), cfg.to_json().as_bytes())?;

    let preset = cfg.ensemble[1.min(cfg.ensemble.len() - 1)].clone();
    let alpha = a.alpha.unwrap_or(preset.alpha);
    let train_images = training_images(&cfg)?;
    let test: Vec<(String, RgbImage)> = match &a.test_dir {
        Some(d) => load_images(d)?,
        None => {
            let s = cfg.synthetic.clone().unwrap_or(config::SyntheticData {
                count: 8,
                width: 64,
                height: 64,
                seed: 0,
            });
            synth::corpus(8, s.width, s.height, s.seed.wrapping_add(1000))
                .into_iter()
                .enumerate()
                .map(|(i, img)| (format!("synthetic_{i:03}"), img))
                .collect()
        }
    };
    let rows = surrogate_comparison(&cfg, alpha, preset.code_channels, &train_images, &test, &a.out_dir)?;
    write_csv(
        &a.out_dir.join("surrogates.csv"),
        "surrogate,image,bpp,mse,psnr,ssim,final_loss",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.surrogate,
                csv_field(&r.image),
                r.bpp,
                r.mse,
                r.psnr,
                r.ssim,
                r.final_loss
            )
        }),
    )?;
    let summary: Vec<_> = [SurrogateMode::RoundSte, SurrogateMode::AdditiveNoise]
        .iter()
        .map(|m| {
            let sel: Vec<&SurrogateRow> = rows.iter().filter(|r| r.surrogate == m.as_str()).collect();
            let n = sel.len() as f64;
            json!({
                "surrogate": m.as_str(),
                "mean_bpp": sel.iter().map(|r| r.bpp).sum::<f64>() / n,
                "mean_mse": sel.iter().map(|r| r.mse).sum::<f64>() / n,
                "final_loss": sel.first().map(|r| r.final_loss),
            })
        })
        .collect();
    print_json(json!({ "alpha": alpha, "summary": summary }));
    record(&a.out_dir.join("surrogates.csv"), argv)
}

/// Train identical-seed twins that differ only in the surrogate and code the
/// held-out images with hard rounding.
pub fn surrogate_comparison(
    cfg: &RunConfig,
    alpha: f64,
    code_channels: usize,
    train_images: &[RgbImage],
    test: &[(String, RgbImage)],
    out_dir: &Path,
) -> Result<Vec<SurrogateRow>> {
    let data = dataset(train_images)?;
    let mut rows = Vec::new();
    for mode in [SurrogateMode::RoundSte, SurrogateMode::AdditiveNoise] {
        let cae = trainer::with_surrogate(cfg.cae_config(code_channels)?, mode);
        let tradeoff = Tradeoff::Alpha(alpha);
        let mut model = trainer::new_model(cae, &data, tradeoff, cfg.seed)?;
        let mut trace = Vec::new();
        let report = trainer::train_incremental(&mut model, &data, &cfg.train_config(tradeoff), |r| trace.push(r.to_csv()))?;
        write_csv(&out_dir.join(format!("trace_{}.csv", mode.as_str())), TraceRow::CSV_HEADER, trace)?;
        let tail = report.trace.len().min(50).max(1);
        let final_loss = report.trace[report.trace.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
        coder::fit_all_histograms(&mut model, train_images)?;
        let ens = Ensemble::new(vec![model])?;
        for (name, img) in test {
            let c = coder::compress(&ens, img, Policy::Fixed(Setting::plain(0, 0)), CompressOptions::default())?;
            rows.push(SurrogateRow {
                surrogate: mode.as_str().into(),
                image: name.clone(),
                bpp: c.bpp(),
                mse: c.mse,
                psnr: metrics::psnr_from_mse(c.mse),
                ssim: metrics::ssim(img, &c.reconstruction)?,
                final_loss,
            });
        }
        save_ensemble(&ens, &out_dir.join(format!("model_{}.cae", mode.as_str())))?;
    }
    Ok(rows)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.count == 0 || a.width == 0 || a.height == 0 {
        return Err(CliError::Usage("count, width and height must be positive".into()));
    }
    std::fs::create_dir_all(&a.out)?;
    for i in 0..a.count {
        let img = synth::texture(a.width, a.height, a.seed, i as u64);
        let mut buf = Vec::new();
        img.write_ppm_to(&mut buf)?;
        write_atomic(&a.out.join(format!("texture_{i:04}.ppm")), &buf)?;
    }
    print_json(json!({"written": a.count, "dir": a.out}));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse() {
        assert_eq!(parse_setting("1:2").unwrap(), Setting::plain(1, 2));
        assert_eq!(parse_setting("0:1:32768").unwrap().interp_weight, 32768);
        assert!(parse_setting("1").is_err());
        assert!(parse_setting("a:b").is_err());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a.ppm"), "a.ppm");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
    }

    #[test]
    fn usage_error_exit_code() {
        assert_eq!(run(["cae", "no-such-command"]), 2);
        assert_eq!(run(["cae", "compress", "--model", "x"]), 2);
    }

    #[test]
    fn error_json_shape() {
        let e = CliError::Core(cae_core::Error::TargetUnreachable {
            target: 0.1,
            achievable: vec![0.2, 0.3],
        });
        let v = e.to_json();
        assert_eq!(v["error"]["kind"], "target_unreachable");
        assert_eq!(v["error"]["achievable_bpp"][1], 0.3);
    }
}
