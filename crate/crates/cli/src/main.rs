//! Command-line front end for the severity-grading pipeline: dataset
//! synthesis, protocol training, evaluation, embedding export, saliency
//! maps, and gradient checking.
//!
//! Exit codes: 0 on success, 1 for validation errors (bad flags, bad
//! config, bad inputs), 2 for runtime failures.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use swingrade::data::synth::SynthSpec;
use swingrade::data::Split;

use commands::require_out;
use config::RunConfig;

/// Errors split by exit code: validation problems (1) versus failures
/// while doing the work (2).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl fmt::Display) -> Self {
        CliError::Validation(msg.to_string())
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Parser)]
#[command(
    name = "swingrade",
    version,
    about = "Windowed-transformer severity grading: synthesize data, train, evaluate, explain"
)]
struct Cli {
    /// TOML run configuration; command-line flags override file keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; every random stream derives from it by name.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all artifacts (created if missing).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-site synthetic dataset as PNGs plus manifest.csv.
    Synth {
        /// Dataset recipe TOML; replaces the [synth] table of --config.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
    },
    /// Train the configured protocol; saves checkpoint.swkt, history.csv,
    /// and test metrics for both sites.
    Train {
        /// Protocol id 1-5: single-head, multi-head, target-only,
        /// source-only, or two-phase drift correction.
        #[arg(long)]
        experiment: Option<u8>,
    },
    /// Score a checkpoint on the test split, overall and per site.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Export pooled encoder features as TSV, optionally t-SNE projected.
    Embed {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Split to embed: train, val, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Project to 2-D with t-SNE (writes tsne.tsv instead).
        #[arg(long)]
        tsne: bool,
        /// t-SNE perplexity (needs at least 3x this many points).
        #[arg(long, default_value_t = 10.0)]
        perplexity: f64,
    },
    /// Saliency heatmap for one image: PGM preview plus raw f32 sidecar.
    Gradcam {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Input image (PNG, any size; resized to the model's input).
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Grade whose evidence to visualize; defaults to the prediction.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Number of randomly probed parameter tensors.
        #[arg(long, default_value_t = 24)]
        samples: usize,
        #[arg(long, default_value_t = 1e-2)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Synth { spec: Some(path) } => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::validation(format!("cannot read spec {}: {e}", path.display()))
            })?;
            cfg.synth = SynthSpec::from_toml(&text).map_err(CliError::validation)?;
        }
        Command::Train {
            experiment: Some(id),
        } => cfg.experiment = *id,
        _ => {}
    }
    let cfg = cfg.resolve(cli.seed)?;

    match cli.command {
        Command::Synth { .. } => commands::cmd_synth(&cfg, &require_out(cli.out)?),
        Command::Train { .. } => commands::cmd_train(&cfg, &require_out(cli.out)?),
        Command::Eval { checkpoint } => {
            commands::cmd_eval(&cfg, &require_out(cli.out)?, &checkpoint)
        }
        Command::Embed {
            checkpoint,
            split,
            tsne,
            perplexity,
        } => {
            let split = parse_split_filter(&split)?;
            commands::cmd_embed(&cfg, &require_out(cli.out)?, &checkpoint, split, tsne, perplexity)
        }
        Command::Gradcam {
            checkpoint,
            image,
            class,
        } => commands::cmd_gradcam(&cfg, &require_out(cli.out)?, &checkpoint, &image, class),
        Command::Gradcheck { samples, tolerance } => {
            commands::cmd_gradcheck(&cfg, samples, tolerance)
        }
    }
}

fn parse_split_filter(s: &str) -> Result<Option<Split>, CliError> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    Split::parse(s).map(Some).map_err(CliError::validation)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print to stdout and succeed; anything
            // else is a usage problem, i.e. a validation error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
