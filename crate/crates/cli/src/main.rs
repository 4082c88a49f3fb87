mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Scene generation, tokenization, two-stage 2D-to-3D distillation, linear
/// probing and ablation reports.
#[derive(Parser, Debug)]
#[command(name = "sam3d", version)]
pub struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file with scene/train/stage1/stage2/probe sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory of the command.
    #[arg(long, global = true, default_value = "out", visible_alias = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train and test scene bundles.
    Scene(SceneArgs),
    /// Tokenize a scene directory and write a purity audit CSV.
    Tokenize(TokenizeArgs),
    /// Region-level 2D-to-3D distillation.
    Stage1(Stage1Args),
    /// Masked token prediction against a frozen stage-1 teacher.
    Stage2(Stage2Args),
    /// Linear probe on frozen encoder token features.
    Probe(ProbeArgs),
    /// Ablation report over the tokenizer x reweight x stage2 matrix.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SceneArgs {
    /// Number of training scenes.
    #[arg(long, visible_alias = "n-scenes")]
    pub n_train: Option<usize>,
    /// Number of held-out test scenes.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Objects per scene.
    #[arg(long)]
    pub n_objects: Option<usize>,
    /// Power-law exponent of the object-size and object-type imbalance.
    #[arg(long)]
    pub imbalance: Option<f64>,
    /// Standard deviation of the point jitter.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// `grid` or `row` (objects side by side, nearly touching).
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Args, Debug)]
pub struct TokenizerArgs {
    /// `sam` or `knn`.
    #[arg(long, visible_alias = "mode")]
    pub tokenizer: Option<String>,
    /// Smallest mask region that becomes a SAM token.
    #[arg(long)]
    pub min_points: Option<usize>,
    /// Number of KNN token centres per scene.
    #[arg(long, visible_alias = "n")]
    pub knn_n: Option<usize>,
    /// Neighbours per KNN token.
    #[arg(long, visible_alias = "k")]
    pub knn_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    /// Directory of scene bundles.
    #[arg(long)]
    pub scenes: PathBuf,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Path of the purity audit CSV; defaults to `audit.csv` in the output directory.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Start from the full-scale optimizer settings (batch 64) instead of the
    /// config file's training section.
    #[arg(long)]
    pub paper_defaults: bool,
    /// Number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW weight decay.
    #[arg(long)]
    pub wd: Option<f64>,
    /// Scenes per optimizer step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Linear warmup epochs.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Stop after this many epochs; the schedule still spans `--epochs`.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct Stage1Args {
    /// Directory of training scene bundles.
    #[arg(long)]
    pub scenes: PathBuf,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Number of k-means groups over region features.
    #[arg(long)]
    pub k_groups: Option<usize>,
    /// `mean-one` or `paper-literal`.
    #[arg(long)]
    pub scale_mode: Option<String>,
    /// Give every region weight one.
    #[arg(long)]
    pub no_reweight: bool,
    /// Cap on points embedded per token.
    #[arg(long)]
    pub max_points: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct Stage2Args {
    /// Directory of training scene bundles.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Checkpoint directory of the stage-1 teacher.
    #[arg(long)]
    pub teacher_ckpt: PathBuf,
    /// Start the student from the teacher weights (`on` or `off`).
    #[arg(long, value_parser = clap::builder::BoolishValueParser::new())]
    pub init_from_teacher: Option<bool>,
    /// Fraction of tokens masked per scene.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Encoder checkpoint; omit with `--tag scratch` for a fresh init.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// `scratch`, `stage1` or `stage2`.
    #[arg(long)]
    pub tag: String,
    /// Directory of probe training scenes.
    #[arg(long)]
    pub train: PathBuf,
    /// Directory of probe test scenes.
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Stage-1 `weights/` directory; enables the tail-group cosine.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// JSON list of matrix cells.
    #[arg(long)]
    pub matrix: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
