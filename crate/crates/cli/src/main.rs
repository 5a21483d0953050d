use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hpdc::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use hpdc::codec::{compress, compress_verified, decompress, CodingReport};
use hpdc::depth_io::{load_depth, save_depth, DepthFormat, DepthMap};
use hpdc::likelihood::MixtureKind;
use hpdc::nn::layers::FusionKind;
use hpdc::selftest::{self, SelftestOptions};
use hpdc::trainer::{evaluate, format_report, synthetic_dataset, EpochMetrics, TrainConfig, Trainer};
use hpdc::{Error, Model32, ModelConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "hpdc", version, about = "Lossless compression of high-precision depth maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a depth map (.hpdm or .pgm) into an .hpdc stream.
    Compress(CompressArgs),
    /// Decode an .hpdc stream back into a depth map.
    Decompress(DecompressArgs),
    /// Train a model, or write a freshly initialized checkpoint with --epochs 0.
    Train(TrainArgs),
    /// Report actual coded bpp per image, verifying every round trip.
    Eval(EvalArgs),
    /// Run the built-in gradient, split, coder and pmf checks.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    /// Pick from the file extension.
    Auto,
    Hpdm16,
    Hpdm32,
    Pgm,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixtureArg {
    Laplace,
    Logistic,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Gated,
    Concat,
}

#[derive(Args)]
struct CompressArgs {
    input: PathBuf,
    /// Output path; defaults to the input with an .hpdc extension.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(short, long)]
    checkpoint: PathBuf,
    /// Split divisor; defaults to the checkpoint's.
    #[arg(long = "d")]
    d: Option<u32>,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    /// Skip decoding the written stream.
    #[arg(long)]
    no_verify: bool,
}

#[derive(Args)]
struct DecompressArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(short, long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long = "channels-lossy")]
    channels_lossy: Option<usize>,
    #[arg(long = "channels-lossless")]
    channels_lossless: Option<usize>,
    /// Mixture components per pixel.
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long, value_enum)]
    mixture: Option<MixtureArg>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training maps (.hpdm or .pgm).
    inputs: Vec<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(short, long)]
    checkpoint: PathBuf,
    /// Continue from this checkpoint, optimizer state included.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train on N synthetic piecewise-smooth maps instead of files.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 256)]
    synthetic_width: usize,
    #[arg(long, default_value_t = 64)]
    synthetic_height: usize,
    #[arg(long, default_value_t = 16)]
    synthetic_bits: u8,
    /// Append one CSV row per epoch to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long = "d")]
    d: Option<u32>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop_width: Option<usize>,
    #[arg(long)]
    crop_height: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Full-size widths, crops and batch instead of the desk defaults.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    detach_second_pass: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    checkpoint: PathBuf,
    #[arg(long = "d")]
    d: Option<u32>,
    /// Also evaluate N synthetic maps.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, hide = true)]
    inject_cdf_fault: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match cli.command {
        Command::Compress(a) => run_compress(a),
        Command::Decompress(a) => run_decompress(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Selftest(a) => return run_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e.source))
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("HPDC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("HPDC_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) => EXIT_USAGE,
        Error::Verification(_) | Error::HashMismatch => EXIT_VERIFY,
        _ => EXIT_DATA,
    }
}

/// An error with the file it concerns.
struct CliError {
    context: Option<PathBuf>,
    source: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.context {
            Some(p) => write!(f, "{}: {}", p.display(), self.source),
            None => write!(f, "{}", self.source),
        }
    }
}

impl From<Error> for CliError {
    fn from(source: Error) -> Self {
        CliError { context: None, source }
    }
}

trait Context<T> {
    fn at(self, path: &Path) -> Result<T, CliError>;
}

impl<T> Context<T> for hpdc::Result<T> {
    fn at(self, path: &Path) -> Result<T, CliError> {
        self.map_err(|source| CliError {
            context: Some(path.to_path_buf()),
            source,
        })
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        context: None,
        source: Error::Argument(msg.into()),
    }
}

fn read_format(path: &Path, arg: FormatArg) -> DepthFormat {
    match arg {
        FormatArg::Auto => DepthFormat::from_path(path),
        FormatArg::Hpdm16 | FormatArg::Hpdm32 => DepthFormat::Raw16,
        FormatArg::Pgm => DepthFormat::Pgm16,
    }
}

fn write_format(path: &Path, arg: FormatArg, map: &DepthMap) -> DepthFormat {
    let wide = if map.bit_depth() > 16 { DepthFormat::Raw32 } else { DepthFormat::Raw16 };
    match arg {
        FormatArg::Auto => match DepthFormat::from_path(path) {
            DepthFormat::Pgm16 => DepthFormat::Pgm16,
            _ => wide,
        },
        FormatArg::Hpdm16 => DepthFormat::Raw16,
        FormatArg::Hpdm32 => DepthFormat::Raw32,
        FormatArg::Pgm => DepthFormat::Pgm16,
    }
}

fn load_model(path: &Path) -> Result<Model32, CliError> {
    Ok(load_checkpoint::<f32>(path).at(path)?.model)
}

fn print_report(report: &CodingReport) {
    println!(
        "{}x{}  R_y {:.4}  R_z {:.4}  R_lossless {:.4}  overall {:.4} bpp  ({} bytes)",
        report.width,
        report.height,
        report.bpp_y(),
        report.bpp_z(),
        report.bpp_residual(),
        report.bpp_overall(),
        report.total_bits / 8
    );
}

fn run_compress(a: CompressArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let map = load_depth(&a.input, read_format(&a.input, a.format)).at(&a.input)?;
    let d = a.d.unwrap_or(model.config.divisor);
    let (bytes, report) = if a.no_verify {
        compress(&model, &map, d)
    } else {
        compress_verified(&model, &map, d)
    }
    .at(&a.input)?;
    let out = a.output.unwrap_or_else(|| a.input.with_extension("hpdc"));
    fs::write(&out, &bytes).map_err(Error::from).at(&out)?;
    print_report(&report);
    Ok(())
}

fn run_decompress(a: DecompressArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let bytes = fs::read(&a.input).map_err(Error::from).at(&a.input)?;
    let (map, report) = decompress(&model, &bytes).at(&a.input)?;
    let out = a.output.unwrap_or_else(|| a.input.with_extension("hpdm"));
    save_depth(&map, &out, write_format(&out, a.format, &map)).at(&out)?;
    print_report(&report);
    Ok(())
}

fn model_config(a: &TrainArgs) -> ModelConfig {
    let mut c = if a.full_scale { ModelConfig::full() } else { ModelConfig::desk() };
    let m = &a.model;
    if let Some(v) = m.channels_lossy {
        c.lossy_channels = v;
    }
    if let Some(v) = m.channels_lossless {
        c.lossless_channels = v;
    }
    if let Some(v) = m.k {
        c.components = v;
    }
    if let Some(v) = m.mixture {
        c.mixture = match v {
            MixtureArg::Laplace => MixtureKind::Laplace,
            MixtureArg::Logistic => MixtureKind::Logistic,
        };
    }
    if let Some(v) = m.fusion {
        c.fusion = match v {
            FusionArg::Gated => FusionKind::Gated,
            FusionArg::Concat => FusionKind::Concat,
        };
    }
    if let Some(v) = a.d {
        c.divisor = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    c
}

fn train_config(a: &TrainArgs, divisor: u32) -> TrainConfig {
    let mut c = if a.full_scale { TrainConfig::full() } else { TrainConfig::desk() };
    c.divisor = divisor;
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut c.alpha, a.alpha);
    set(&mut c.beta, a.beta);
    set(&mut c.lr, a.lr);
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch {
        c.batch = v;
    }
    if let Some(v) = a.crop_width {
        c.crop_width = v;
    }
    if let Some(v) = a.crop_height {
        c.crop_height = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    c.detach_second_pass = a.detach_second_pass;
    c
}

fn load_inputs(paths: &[PathBuf]) -> Result<Vec<(String, DepthMap)>, CliError> {
    paths
        .iter()
        .map(|p| {
            let map = load_depth(p, DepthFormat::from_path(p)).at(p)?;
            Ok((p.display().to_string(), map))
        })
        .collect()
}

fn run_train(a: TrainArgs) -> Result<(), CliError> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint::<f32>(path).at(path)?;
            let cfg = train_config(&a, a.d.unwrap_or(ck.model.config.divisor));
            Trainer::resume(ck, cfg)?
        }
        None => {
            let mc = model_config(&a);
            let cfg = train_config(&a, mc.divisor);
            Trainer::new(Model32::new(mc)?, cfg)?
        }
    };

    let remaining = trainer.config.epochs.saturating_sub(trainer.state.epoch);
    if remaining > 0 {
        let mut data: Vec<DepthMap> = load_inputs(&a.inputs)?.into_iter().map(|(_, m)| m).collect();
        if let Some(n) = a.synthetic {
            let (w, h) = (a.synthetic_width, a.synthetic_height);
            data.extend(synthetic_dataset(n, w, h, a.synthetic_bits, trainer.config.seed));
        }
        if data.is_empty() {
            return Err(usage("no training data: pass input maps or --synthetic N"));
        }
        let mut log = match &a.metrics {
            Some(p) => {
                let fresh = !p.exists();
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(Error::from)
                    .at(p)?;
                if fresh {
                    writeln!(f, "{}", EpochMetrics::CSV_HEADER).map_err(Error::from).at(p)?;
                }
                Some((p.clone(), f))
            }
            None => None,
        };
        let mut io_error = None;
        trainer.train(&data, |m| {
            println!("{}", m.csv_row());
            if let Some((p, f)) = &mut log {
                if let Err(e) = writeln!(f, "{}", m.csv_row()) {
                    io_error.get_or_insert((p.clone(), e));
                }
            }
        })?;
        if let Some((p, e)) = io_error {
            return Err(Error::from(e)).at(&p);
        }
    }
    let state = TrainState {
        lr: trainer.config.learning_rate(trainer.state.epoch),
        ..trainer.state
    };
    save_checkpoint(&a.checkpoint, &trainer.model, &state, Some(&trainer.optimizer)).at(&a.checkpoint)?;
    println!(
        "wrote {} (epoch {}, step {})",
        a.checkpoint.display(),
        state.epoch,
        state.step
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let mut maps = load_inputs(&a.inputs)?;
    if let Some(n) = a.synthetic {
        for (i, m) in synthetic_dataset(n, 256, 64, 16, a.seed).into_iter().enumerate() {
            maps.push((format!("synthetic{i}"), m));
        }
    }
    if maps.is_empty() {
        return Err(usage("no maps to evaluate: pass input maps or --synthetic N"));
    }
    let rows = evaluate(&model, &maps, a.d.unwrap_or(model.config.divisor))?;
    print!("{}", format_report(&rows));
    Ok(())
}

fn run_selftest(a: SelftestArgs) -> ExitCode {
    let report = selftest::run(SelftestOptions {
        inject_cdf_fault: a.inject_cdf_fault,
    });
    print!("{}", report.render());
    if report.passed() {
        println!("selftest passed");
        ExitCode::SUCCESS
    } else {
        println!("selftest FAILED");
        ExitCode::from(EXIT_VERIFY)
    }
}
