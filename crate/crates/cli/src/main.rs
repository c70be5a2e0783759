use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "sdsv", version, about = "Text-dependent speaker and pass-phrase verification")]
pub struct Cli {
    /// Worker threads for per-utterance stages; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// System preset, S1 to S7.
    #[arg(long, global = true)]
    pub preset: Option<String>,

    /// Overlay config files applied after the preset, in order.
    #[arg(long = "config", global = true)]
    pub configs: Vec<PathBuf>,

    /// Working directory for model artifacts; overrides `paths.work_dir`.
    #[arg(long, global = true)]
    pub work: Option<PathBuf>,

    /// Log verbosity: -v for info, -vv for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Compute features (and bottleneck features when enabled) for a manifest.
    Features(FeaturesArgs),
    /// Train the universal background model.
    TrainUbm(TrainArgs),
    /// Derive the phrase-dependent background models from the UBM.
    TrainPbm(TrainArgs),
    /// Train the total-variability model.
    TrainTv(TrainTvArgs),
    /// Train the bottleneck feature extractor.
    TrainBn(TrainBnArgs),
    /// Train the PLDA back-end (phrase models for `ivector_uv`, AS-norm for `plda_backend`).
    TrainPlda(TrainPldaArgs),
    /// Build enrollment models.
    Enroll(EnrollArgs),
    /// Score a trial list.
    Score(ScoreArgs),
    /// Split a corpus into development trials and training data.
    DevSplit(DevSplitArgs),
    /// Fit a fusion recipe, or replay frozen fusion parameters.
    Fuse(FuseArgs),
    /// Per-condition EER and minDCF of a score file.
    Evaluate(EvaluateArgs),
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Waveform,
    Feature,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings file; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub phrases: Option<usize>,
    #[arg(long)]
    pub utts: Option<usize>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub speaker_sep: Option<f64>,
    #[arg(long)]
    pub phrase_sep: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EmbeddingArgs {
    /// Identifier list of ingested embeddings, one per line.
    #[arg(long, requires = "embeddings")]
    pub embedding_ids: Option<PathBuf>,
    /// SDSV matrix with one embedding per row.
    #[arg(long, requires = "embedding_ids")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `.sdsv` files and `manifest.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub train: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainTvArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Also write i-vectors of this manifest to `ivectors.ids` / `ivectors.sdsv`.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainBnArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Frame labels for `bnfeat.labels = "phone"`.
    #[arg(long)]
    pub frame_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainPldaArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[command(flatten)]
    pub emb: EmbeddingArgs,
}

#[derive(Args, Debug)]
pub struct EnrollArgs {
    #[arg(long)]
    pub models: PathBuf,
    /// Manifest resolving enrollment utterance ids.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub emb: EmbeddingArgs,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    /// Manifest resolving test utterance ids.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Primary score output.
    #[arg(long)]
    pub out: PathBuf,
    /// UV score output of the `pbm` system.
    #[arg(long)]
    pub uv_out: Option<PathBuf>,
    #[command(flatten)]
    pub emb: EmbeddingArgs,
}

#[derive(Args, Debug)]
pub struct DevSplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub speakers: usize,
    #[arg(long, default_value_t = 3)]
    pub enroll: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only same-cluster trials using 2-means over speaker embeddings.
    #[command(flatten)]
    pub emb: EmbeddingArgs,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Recipe to fit on its development trials.
    #[arg(long, conflicts_with = "frozen")]
    pub recipe: Option<PathBuf>,
    /// Frozen parameters to replay.
    #[arg(long, requires_all = ["trials", "asv"])]
    pub frozen: Option<PathBuf>,
    /// Trial list for replay.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// UV stage score files for replay, in recipe order.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub uv: Vec<PathBuf>,
    /// ASV stage score files for replay, in recipe order.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub asv: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Where the fitted parameters are written.
    #[arg(long)]
    pub frozen_out: Option<PathBuf>,
    /// Where the fused UV scores are written.
    #[arg(long)]
    pub uv_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    /// Score phrase correctness (TC and IC as targets) instead of speaker identity.
    #[arg(long)]
    pub uv: bool,
    /// DET curve output (`p_fa p_miss` per line).
    #[arg(long)]
    pub det: Option<PathBuf>,
    #[arg(long, default_value = "Evaluation")]
    pub title: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
