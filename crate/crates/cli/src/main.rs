use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Reconstruction-based outlier detection on slice sequences.
#[derive(Parser, Debug)]
#[command(name = "reconscan", version, about)]
struct Cli {
    /// JSON or TOML run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Ties count as outliers and thresholds average per subject.
    #[arg(long, global = true)]
    strict_paper: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled phantom cohort with a manifest.
    Phantom(PhantomArgs),
    /// Slice volumes into window archives with a subject-disjoint split.
    Prepare(PrepareArgs),
    /// Train a model on a window archive.
    Train(TrainArgs),
    /// Score every window of an archive with a trained model.
    Score(ScoreArgs),
    /// Threshold training scores and evaluate test scores.
    Evaluate(EvaluateArgs),
    /// Grad-CAM maps and reconstruction grids for one window.
    Explain(ExplainArgs),
    /// Compare slice combinations (3-3, 3-5, 5-3, 5-5) end to end.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub healthy: Option<usize>,
    #[arg(long)]
    pub anomalous: Option<usize>,
    #[arg(long)]
    pub timepoints: Option<usize>,
    /// Cube edge in voxels.
    #[arg(long)]
    pub extent: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// cavity-enlarge, wall-thicken or texture-shift.
    #[arg(long)]
    pub kind: Option<String>,
    /// Anomaly magnitude range `lo,hi`.
    #[arg(long)]
    pub magnitude: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Repeatable; defaults to axial.
    #[arg(long = "plane")]
    pub planes: Vec<String>,
    /// `desk`, `full` or `lo..hi` (half-open).
    #[arg(long)]
    pub range: Option<String>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Healthy subjects drawn into the test set.
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Comma-separated healthy test subjects; overrides --holdout.
    #[arg(long, value_delimiter = ',')]
    pub test_subjects: Vec<String>,
    /// Accept slice combinations outside {3,5}-{3,5}.
    #[arg(long)]
    pub any_lengths: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub in_len: Option<usize>,
    #[arg(long)]
    pub out_len: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// unet33, gan33 or sagan33.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub critic_width: Option<usize>,
    /// UNet33 epoch budget.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adversarial budget in generator steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub critic_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight of the cosine term in the generator loss.
    #[arg(long)]
    pub cosine_weight: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training window archive written by `prepare`.
    #[arg(long)]
    pub archive: PathBuf,
    /// Checkpoint to write; history goes next to it as `.history.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub archive: PathBuf,
    /// l2, cosine or l2+cosine.
    #[arg(long)]
    pub metric: Option<String>,
    /// Score table CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// `PATH` or `PLANE=PATH`; repeat once per plane.
    #[arg(long = "train-scores", required = true)]
    pub train: Vec<String>,
    /// `PATH` or `PLANE=PATH`; repeat once per plane.
    #[arg(long = "test-scores", required = true)]
    pub test: Vec<String>,
    /// Distance the tables were scored with.
    #[arg(long)]
    pub metric: Option<String>,
    /// avg, max or min.
    #[arg(long)]
    pub threshold: Option<String>,
    /// Report JSON to write; the text summary always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for one ROC CSV per plane.
    #[arg(long)]
    pub roc_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub archive: PathBuf,
    /// Defaults to the first scan in the archive.
    #[arg(long)]
    pub scan: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Repeatable; defaults to enc1 and sa4 (or the closest UNet layers).
    #[arg(long = "layer")]
    pub layers: Vec<String>,
    /// neg-l2 or critic-score.
    #[arg(long)]
    pub objective: Option<String>,
    /// Target channel the heatmap is overlaid on.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated `in-out` combinations.
    #[arg(long, value_delimiter = ',', default_value = "3-3,3-5,5-3,5-5")]
    pub combos: Vec<String>,
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub threshold: Option<String>,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> reconscan::Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(reconscan::Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| reconscan::Error::Config(e.to_string()))?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let strict = cli.strict_paper;
    match cli.command {
        Command::Phantom(a) => commands::phantom(&cfg, a),
        Command::Prepare(a) => commands::prepare(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Score(a) => commands::score(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a, strict),
        Command::Explain(a) => commands::explain(&cfg, a),
        Command::Sweep(a) => commands::sweep(&cfg, a, strict),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": { "code": e.code(), "message": e.to_string(), "exit_code": e.exit_code() }
            });
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
