//! Command-line driver: data generation, training, fusion, evaluation,
//! ablation sweeps, gradient checks and checkpoint inspection.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use sgm_core::cells::CellKind;
use sgm_core::network::Mode;
use sgm_core::train::Precision;

/// Exit status of a successful command.
pub const EXIT_OK: i32 = 0;
/// Exit status for malformed command lines.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures while running a command.
pub const EXIT_FAILURE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "sgm",
    version,
    about = "Multi-exposure HDR fusion with gated recurrent cells"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic exposure sequences and a manifest.
    GenData(GenDataArgs),
    /// Train a fusion network on a manifest.
    Train(TrainArgs),
    /// Fuse every sequence of a manifest into a PFM radiance map.
    Fuse(FuseArgs),
    /// Print per-sequence PSNR as CSV.
    Eval(EvalArgs),
    /// Train every requested cell kind and tabulate PSNR per sequence length.
    Ablate(AblateArgs),
    /// Compare autodiff gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// List the tensors of a checkpoint.
    InspectCkpt(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Training options shared by `train` and `ablate`. Unset flags fall back to
/// the config file, then to the built-in defaults.
#[derive(Args, Debug, Default, Clone)]
pub struct TrainFlags {
    /// `key = value` file merged under the explicit flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Present each sequence's frames in random order.
    #[arg(long)]
    pub shuffle_order: bool,
    /// Sequence lengths drawn per step, e.g. `3,5,7`.
    #[arg(long, value_parser = parse_lengths)]
    pub var_lengths: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// Feature channels of the encoder and cells.
    #[arg(long)]
    pub features: Option<usize>,
    /// Epochs between learning-rate halvings.
    #[arg(long)]
    pub halve_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the model, metrics and periodic checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_cell)]
    pub cell: Option<CellKind>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fuse only the centered `n` frames of each sequence.
    #[arg(long)]
    pub n: Option<usize>,
    /// Accepted for uniformity; fusion draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Evaluate only the centered `n` frames of each sequence.
    #[arg(long)]
    pub n: Option<usize>,
    /// Accepted for uniformity; evaluation draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training and evaluation sequences. Without it a synthetic fixture is
    /// generated from `--seed`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_cell, default_value = "sgm,type1,type2,type3,type4,type5,type6,type7,lstm,gru,vanilla")]
    pub kinds: Vec<CellKind>,
    /// Sequence lengths to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    pub ns: Vec<usize>,
    /// Sequences in the generated fixture.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Image size of the generated fixture.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_cell, default_value = "sgm")]
    pub kinds: Vec<CellKind>,
    #[arg(long, value_parser = parse_mode, default_value = "bi")]
    pub mode: Mode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames in the probe sequence.
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Height and width of the probe sequence.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 64)]
    pub features: usize,
    /// Coordinates sampled per tensor; 0 checks all of them.
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

fn parse_cell(s: &str) -> Result<CellKind, String> {
    s.parse().map_err(|e: sgm_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: sgm_core::Error| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: sgm_core::Error| e.to_string())
}

fn parse_lengths(s: &str) -> Result<Vec<usize>, String> {
    sgm_core::train::parse_lengths(s).map_err(|e| e.to_string())
}

/// Parse `args` (including the program name) and run the command, writing
/// results to `out` and diagnostics to `err`. Returns the exit status.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e);
                    EXIT_OK
                }
                _ => {
                    let text = e.render().to_string();
                    let _ = write!(err, "{}", text);
                    if !text.contains("Usage:") {
                        let _ = writeln!(err, "\n{}", Cli::command().render_usage());
                    }
                    EXIT_USAGE
                }
            };
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {:#}", e);
            EXIT_FAILURE
        }
    }
}

/// [`run_with`] on the process's standard streams.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}
