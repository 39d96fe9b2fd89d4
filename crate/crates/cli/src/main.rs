use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Multi-phase volumetric classification: data, training, evaluation and analysis.
#[derive(Parser, Debug)]
#[command(name = "sdrf", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-phase lesion dataset.
    Synth(SynthArgs),
    /// Train a model and report on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate a grid of phase subsets and module toggles.
    Ablate(AblateArgs),
    /// Adapt a checkpoint to a new phase count and fine-tune it.
    Transfer(TransferArgs),
    /// Analytic FLOPs and parameter counts.
    Profile(ProfileArgs),
    /// 3D Grad-CAM saliency volumes, one per phase.
    Gradcam(GradcamArgs),
    /// Export APSM phase coefficients.
    Coeffs(CoeffsArgs),
    /// Export ROC points as CSV.
    Roc(RocArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Distributed,
    Split,
    SinglePhase,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StreamArg {
    High,
    Low,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok([d, h, w]),
        _ => Err(format!("expected three positive sizes D,H,W, got `{s}`")),
    }
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_nonneg_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        Ok(v) => Err(format!("{v} must be finite and >= 0")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_positive)]
    pub n: usize,
    #[arg(long, default_value_t = 3, value_parser = parse_positive)]
    pub phases: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Volume size D,H,W.
    #[arg(long, default_value = "8,32,32", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 0.8, value_parser = parse_nonneg_f64)]
    pub contrast: f64,
    #[arg(long, default_value_t = 0.3, value_parser = parse_nonneg_f64)]
    pub noise: f64,
    #[arg(long, env = "SDRF_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LayoutArg::Distributed)]
    pub layout: LayoutArg,
    /// Signal-carrying phase for `--layout single-phase`.
    #[arg(long, default_value_t = 1)]
    pub signal_phase: usize,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset manifest; overrides the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from `<out>/last` if present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Comma-separated phase names, in model order.
    #[arg(long, value_delimiter = ',')]
    pub phases: Option<Vec<String>>,
    /// Run config supplying preprocessing when the checkpoint has none.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for report.json and roc.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// A comma-separated phase subset; repeat for several. Default: all phases.
    #[arg(long = "phases")]
    pub subsets: Vec<String>,
    /// Run all four module variants: baseline, bcim, apsm, full.
    #[arg(long, conflicts_with_all = ["no_bcim", "no_apsm"])]
    pub grid: bool,
    #[arg(long)]
    pub no_bcim: bool,
    #[arg(long)]
    pub no_apsm: bool,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Independent runs executed in parallel.
    #[arg(long, default_value_t = 1, value_parser = parse_positive)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long = "from")]
    pub from: PathBuf,
    #[arg(long, value_parser = parse_positive)]
    pub phases: usize,
    /// New class count; default keeps the source head.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Run config; default is the full-size model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_positive)]
    pub phases: Option<usize>,
    #[arg(long, default_value = "14,112,112", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long)]
    pub no_bcim: bool,
    #[arg(long)]
    pub no_apsm: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id or index; default is the first sample of the split.
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = StreamArg::High)]
    pub stream: StreamArg,
    /// 1-based stage; default is the last stage.
    #[arg(long)]
    pub stage: Option<usize>,
    /// Target class; default is the sample label.
    #[arg(long)]
    pub class: Option<usize>,
    /// Also compute an 8^3 occlusion-sensitivity map and its overlap.
    #[arg(long)]
    pub occlusion: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CoeffsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// One sample id or index; default is every sample of the split.
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RocArgs {
    /// A report.json written by `train` or `eval`.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"], required_unless_present = "checkpoint")]
    pub report: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::Profile(a) => commands::profile(a),
        Command::Gradcam(a) => commands::gradcam(a),
        Command::Coeffs(a) => commands::coeffs(a),
        Command::Roc(a) => commands::roc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<commands::Usage>() {
            Some(u) => {
                eprintln!("error: {}\n\nFor more information, try '--help'.", u.0);
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
