//! `mcrp`: uncertainty-aware relevance heatmaps from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod cmd;
mod error;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mcrp", version, about = "Monte Carlo relevance propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample relevance maps under dropout and write mean/sigma/snr/confusion outputs.
    Explain(ExplainArgs),
    /// Repeat an earlier explain run from its manifest.json.
    Replay(ReplayArgs),
    /// Print the layer table of a model archive.
    Inspect(InspectArgs),
    /// Run one relevance pass and check per-layer conservation against reported leak.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Model archive (directory or .zip).
    #[arg(long)]
    pub model: PathBuf,
    /// Input image (PNG, PPM or PGM); resized to the model input.
    #[arg(long)]
    pub image: PathBuf,
    /// Number of dropout samples.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Override every dropout layer's keep probability.
    #[arg(long)]
    pub keep_prob: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class index, class label, `auto` (predicted class) or `all` (every positive logit).
    #[arg(long, default_value = "auto")]
    pub target: String,
    /// Stabiliser added to z+ denominators.
    #[arg(long, default_value_t = 1e-9)]
    pub epsilon: f32,
    /// Added to sigma in the snr denominator.
    #[arg(long, default_value_t = 1e-6)]
    pub snr_epsilon: f32,
    /// Comma-separated subset of mean, variance, sigma, snr, confusion.
    #[arg(long, default_value = "mean,sigma,snr,confusion", value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Layers whose output relevance is also summarised.
    #[arg(long, value_delimiter = ',')]
    pub taps: Vec<String>,
    #[arg(long, default_value = "mcrp-out")]
    pub out: PathBuf,
    /// Skip per-sample min-max normalization.
    #[arg(long)]
    pub raw: bool,
    /// Scale kept activations by 1/p during sampling.
    #[arg(long)]
    pub rescale_activations: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "MCRP_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Heatmap opacity over the greyscale image.
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f32,
    /// blackbody or gray.
    #[arg(long, default_value = "blackbody")]
    pub colormap: String,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "MCRP_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Sample the dropout mask for sample 0 of this seed instead of keeping every unit.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "auto")]
    pub target: String,
    /// Allowed |deficit - leak| per layer, multiplied by max(1, seed relevance).
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Explain(a) => cmd::explain::run(&a),
        Command::Replay(a) => cmd::explain::replay(&a),
        Command::Inspect(a) => cmd::inspect::run(&a),
        Command::Validate(a) => cmd::validate::run(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
