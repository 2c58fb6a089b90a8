mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nppc::codec_bridge::CodecKind;
use nppc::trainer::ForwardMode;

#[derive(Parser)]
#[command(name = "nppc", version = manifest::VERSION, about = "Neural preprocessing in front of standard image codecs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic ten-class image set.
    MakeToyData(ToyArgs),
    /// Trains the frozen task classifier on clean images.
    TrainClassifier(TrainArgs),
    /// Calibrates, pretrains and finetunes the proxy for one rate point.
    TrainProxy(ProxyArgs),
    /// Trains the filter at one rate point without adaptive layers.
    TrainNpp(NppArgs),
    /// Continues a fixed-point filter with adaptive layers over all rate points.
    TrainNppAdaptive(NppArgs),
    /// Trains one fixed-point filter per rate point.
    TrainNppMulti(NppArgs),
    /// Rate-accuracy curve of the baseline or a filter pipeline.
    EvalCurve(EvalArgs),
    /// BD-rate of a test curve against an anchor curve, in percent.
    Bdrate(BdArgs),
    /// Writes input, filtered, residual and decoded images.
    Visualize(VisArgs),
    /// Draws rate-accuracy curves as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    codec: Option<CodecKind>,
    /// Use only the first N training images of every class.
    #[arg(long)]
    limit_per_class: Option<usize>,
}

#[derive(Args)]
struct ProxyArgs {
    #[command(flatten)]
    common: TrainArgs,
    #[arg(long)]
    rate_point: u32,
}

#[derive(Args)]
struct NppArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Frozen classifier checkpoint.
    #[arg(long)]
    classifier: PathBuf,
    /// Directory holding `proxy_rp<k>.nppc` files.
    #[arg(long)]
    proxy_dir: PathBuf,
    /// Fixed rate point (train-npp only; defaults to the middle one).
    #[arg(long)]
    rate_point: Option<u32>,
    #[arg(long)]
    forward_mode: Option<ForwardMode>,
    /// Starting filter (required by train-npp-adaptive).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Continue from the state checkpoint in `--out` if there is one.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "jpeg")]
    codec: CodecKind,
    #[arg(long)]
    classifier: PathBuf,
    /// Filter checkpoint; the baseline pipeline without it.
    #[arg(long, conflicts_with = "per_point")]
    ckpt: Option<PathBuf>,
    /// Directory of per-rate-point filters `npp_rp<k>.nppc`.
    #[arg(long)]
    per_point: Option<PathBuf>,
    /// Supplies the rate schedule and crop size.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    limit_per_class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BdArgs {
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Also write the number (and a manifest) to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisArgs {
    /// Dataset root; the first `--count` test images are used.
    #[arg(long, required_unless_present = "image")]
    data: Option<PathBuf>,
    /// A single image file instead of a dataset.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "jpeg")]
    codec: CodecKind,
    #[arg(long)]
    rate_point: Option<u32>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Curve CSV; repeat for several curves. The file stem labels the curve.
    #[arg(long = "curve", required = true)]
    curves: Vec<PathBuf>,
    #[arg(long, default_value = "Rate-accuracy")]
    title: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
