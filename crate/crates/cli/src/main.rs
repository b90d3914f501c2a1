//! `pallor`: drives every pipeline stage from the command line.
//!
//! Machine-readable JSON goes to stdout, progress to stderr. Exit codes:
//! 0 success, 1 domain error, 2 usage error.

mod commands;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pallor_core::error::PallorError;
use pallor_core::imaging::Roi;
use pallor_core::segmentation::SegmenterKind;

#[derive(Debug, Parser)]
#[command(name = "pallor", version, about = "Anemia screening from conjunctiva photographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, masks, manifest.csv).
    Synth(SynthArgs),
    /// Train the CNN segmenter on a dataset with ground-truth masks.
    TrainSeg(TrainSegArgs),
    /// Train the Hb regressor on features extracted from a dataset.
    TrainReg(TrainRegArgs),
    /// Analyze one image and print the prediction as JSON.
    Predict(PredictArgs),
    /// Evaluate a model on a dataset and print the screening report.
    Evaluate(EvaluateArgs),
    /// Check backpropagation against central differences.
    Gradcheck(GradcheckArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Gaussian noise sigma, in 8-bit brightness units.
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 7.0)]
    hb_min: f64,
    #[arg(long, default_value_t = 14.0)]
    hb_max: f64,
    #[arg(long, default_value_t = 0.5)]
    gain_min: f64,
    #[arg(long, default_value_t = 2.0)]
    gain_max: f64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct TrainSegArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Network input side in pixels.
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Channels after each downsampling stage.
    #[arg(long, value_delimiter = ',', default_value = "8,16,16")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Samples held out for IoU reporting.
    #[arg(long, default_value_t = 20)]
    holdout: usize,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct SegmenterArgs {
    /// Segmenter used to locate the conjunctiva [default: cnn with
    /// --seg-weights, classical otherwise].
    #[arg(long = "seg", value_parser = parse_segmenter)]
    seg: Option<SegmenterKind>,
    /// Segmenter weights (required for --seg cnn).
    #[arg(long)]
    seg_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainRegArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[command(flatten)]
    segmenter: SegmenterArgs,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    /// White square of the calibration card, as x,y,w,h.
    #[arg(long, value_parser = parse_roi)]
    card: Roi,
    /// Optional conjunctiva crop, as x,y,w,h.
    #[arg(long, value_parser = parse_roi)]
    conj: Option<Roi>,
    /// Regressor weights.
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    segmenter: SegmenterArgs,
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Regressor weights.
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    segmenter: SegmenterArgs,
    #[arg(long, value_delimiter = ',', default_value = "9,10,11")]
    cutoffs: Vec<f64>,
    /// Print the report as JSON instead of a text table.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = pallor_core::neuralnet::GRADCHECK_STEP)]
    step: f64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// TOML file with listen, regressor_weights, segmenter_weights,
    /// max_body_bytes, default_cutoffs and cors.
    #[arg(long, env = "PALLOR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "PALLOR_LISTEN")]
    listen: Option<std::net::SocketAddr>,
    #[arg(long, env = "PALLOR_REGRESSOR_WEIGHTS")]
    regressor_weights: Option<PathBuf>,
    #[arg(long, env = "PALLOR_SEGMENTER_WEIGHTS")]
    segmenter_weights: Option<PathBuf>,
    #[arg(long, env = "PALLOR_MAX_BODY_BYTES")]
    max_body_bytes: Option<usize>,
    #[arg(long, env = "PALLOR_CUTOFFS", value_delimiter = ',')]
    cutoffs: Option<Vec<f64>>,
    /// Send permissive cross-origin headers.
    #[arg(long, env = "PALLOR_CORS")]
    cors: bool,
}

impl SegmenterArgs {
    fn kind(&self) -> SegmenterKind {
        self.seg.unwrap_or(if self.seg_weights.is_some() { SegmenterKind::Cnn } else { SegmenterKind::Classical })
    }
}

fn parse_roi(s: &str) -> Result<Roi, String> {
    s.parse().map_err(|e: PallorError| e.to_string())
}

fn parse_segmenter(s: &str) -> Result<SegmenterKind, String> {
    s.parse().map_err(|e: PallorError| e.to_string())
}

/// Failure of a subcommand, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Domain(PallorError),
    Usage(String),
    /// The command ran but its check failed (e.g. gradcheck over tolerance).
    Check(String),
}

impl From<PallorError> for CliError {
    fn from(e: PallorError) -> Self {
        CliError::Domain(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainSeg(a) => commands::train_seg(a),
        Command::TrainReg(a) => commands::train_reg(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain(e)) => {
            eprintln!("{}", serde_json::json!({ "error_code": e.code(), "message": e.to_string() }));
            ExitCode::from(1)
        }
        Err(CliError::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
    }
}
