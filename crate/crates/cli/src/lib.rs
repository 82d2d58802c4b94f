//! The `voxcam` command-line pipeline.
//!
//! Results go to standard output or files; progress lines go to standard
//! error. Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical degeneracy.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;
pub mod error;

pub use config::{RunArgs, RunConfig};
pub use error::{CliError, EXIT_DATA, EXIT_DEGENERATE, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "voxcam", version, about = "3-D ResNet training, Grad-CAM and Heat-Score analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort of lesion and control phantoms plus a manifest.
    PhantomGen(PhantomGenArgs),
    /// Write a stratified cross-validation fold plan.
    Split(RunArgs),
    /// Train one fold or all folds.
    Train(RunArgs),
    /// Test-set predictions, metrics and Heat-Scores of trained (or random) models.
    Evaluate(EvaluateArgs),
    /// Export the Grad-CAM heatmap of one scan.
    Gradcam(GradcamArgs),
    /// Heat-Score of a heatmap against a lesion mask.
    Heatscore(HeatscoreArgs),
    /// Aggregate evaluation outputs into a report row.
    Report(ReportArgs),
    /// Paired t-test between two columns of values.
    Ttest(TtestArgs),
    /// List the tensors of a checkpoint and the architecture they imply.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Args)]
struct PhantomGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    n_per_class: usize,
    /// `easy` or `subtle` lesion contrast.
    #[arg(long, default_value = "easy")]
    tier: String,
    #[arg(long, default_value_t = 64)]
    extent: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    radius_min: Option<f32>,
    #[arg(long)]
    radius_max: Option<f32>,
    /// Overrides the tier's lesion contrast.
    #[arg(long)]
    contrast: Option<f32>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Skip Grad-CAM and Heat-Scores.
    #[arg(long)]
    no_heat_scores: bool,
}

#[derive(Debug, Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Lesion mask drawn as a contour on the slice image and used for a Heat-Score.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    class: u8,
    #[arg(long, default_value = "stage4")]
    layer: String,
    /// Resample the scan to `D,H,W` first.
    #[arg(long)]
    resize: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HeatscoreArgs {
    #[arg(long)]
    heatmap: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Restricts the background to the non-zero voxels of this volume.
    #[arg(long)]
    domain: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directories of `evaluate`.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "resnet18")]
    model: String,
    #[arg(long, default_value = "none")]
    tl: String,
    #[arg(long, default_value = "phantom")]
    modality: String,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TtestArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Column name (files with a header) or 0-based index.
    #[arg(long)]
    column: Option<String>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging();
    let result = match cli.command {
        Command::PhantomGen(a) => commands::phantom_gen(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a.run, !a.no_heat_scores),
        Command::Gradcam(a) => commands::gradcam(&a),
        Command::Heatscore(a) => commands::heatscore(&a),
        Command::Report(a) => commands::report(&a),
        Command::Ttest(a) => commands::ttest(&a),
        Command::InspectCkpt(a) => commands::inspect_ckpt(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
