//! `pepipe`: phantom generation, training, evaluation, ranking and
//! fused prediction from one reproducible run configuration.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use pepipe::config::{Profile, RunConfig};
use pepipe::Error;

#[derive(Debug, Parser)]
#[command(name = "pepipe", version, about = "Embolism phantom pipeline: classifier, detector, evaluation and fusion")]
struct Cli {
    /// TOML run configuration laid over the profile preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Global seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root; each command writes into its own subdirectory.
    #[arg(long, global = true, env = "PEPIPE_OUT", default_value = "runs")]
    out: PathBuf,

    /// Preset for image sizes and training lengths.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic phantom datasets.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Pretext training of the classifier backbone.
    Pretrain,
    /// Fine-tune the two-way classifier on the classification set.
    TrainClassifier(TrainClassifierArgs),
    /// Train the one-stage detector on the detection set.
    TrainDetector(TrainDetectorArgs),
    /// Accuracy and per-image probabilities of a classifier checkpoint.
    EvalClassifier(EvalArgs),
    /// AP, F1 and average IoU over IoU thresholds for a detector checkpoint.
    EvalDetector(EvalArgs),
    /// Rank classifier runs by mean accuracy over their final epochs.
    Rank(RankArgs),
    /// Classify, detect, fuse and render one image or a directory.
    Predict(PredictArgs),
    /// Finite-difference gradient checks and the AP oracle.
    Selftest(SelftestArgs),
}

#[derive(Debug, Subcommand)]
enum PhantomCommand {
    /// Write PNGs, annotation sidecars, manifest and statistics.
    Gen(PhantomGenArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomSet {
    Classification,
    Detection,
    Both,
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    /// Which dataset to generate.
    #[arg(long, value_enum, default_value_t = PhantomSet::Both)]
    pub set: PhantomSet,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    /// Dataset root with manifest.txt (default: generated phantom set).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Backbone checkpoint to start from instead of running the pretext stage.
    #[arg(long, conflicts_with = "scratch")]
    pub pretrained: Option<PathBuf>,
    /// Skip pretext pretraining; all weights start from initialization.
    #[arg(long, action = ArgAction::SetTrue)]
    pub scratch: bool,
    /// Override the configured number of fine-tune epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    /// Dataset root with manifest.txt (default: generated phantom set).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Override the configured number of iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate (default: best checkpoint of the training run).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset root (default: generated phantom set).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Manifest listing the images to evaluate (default: the training
    /// run's validation split, else the whole dataset).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Classifier training logs (CSV).
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
    /// Trailing epochs to average (default from config).
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// PNG image or directory searched recursively for PNGs.
    pub input: PathBuf,
    /// Classifier checkpoint (default: shipped desk checkpoint).
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Detector checkpoint (default: shipped desk checkpoint).
    #[arg(long)]
    pub detector: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    /// Random scenes for the AP oracle.
    #[arg(long, default_value_t = 1000)]
    pub ap_instances: usize,
}

/// Shared state of one invocation.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

fn defaults_help(name: &str) -> Option<String> {
    let desk = RunConfig::preset(Profile::Desk);
    let paper = RunConfig::preset(Profile::Paper);
    let (c, d) = (&paper.classifier, &paper.detector);
    let text = match name {
        "train-classifier" | "pretrain" | "eval-classifier" => format!(
            "Defaults (paper profile): input {}x{}, Adam lr {}, dropout {}, l2 {}, batch {}, epochs {}.\n\
             Desk profile: input {}x{}, lr {}.",
            c.input_size,
            c.input_size,
            c.learning_rate,
            c.dropout,
            c.l2,
            c.batch_size,
            c.epochs,
            desk.classifier.input_size,
            desk.classifier.input_size,
            desk.classifier.learning_rate
        ),
        "train-detector" | "eval-detector" => format!(
            "Defaults (paper profile): input {}x{}, momentum SGD lr {}, momentum {}, iterations {}, \
             batch {}, anchors {}, confidence {}, NMS IoU {}.\nDesk profile: input {}x{}, iterations {}.",
            d.input_size,
            d.input_size,
            d.learning_rate,
            d.momentum,
            d.iterations,
            d.batch_size,
            d.anchor_count,
            d.conf_threshold,
            d.nms_iou,
            desk.detector.input_size,
            desk.detector.input_size,
            desk.detector.iterations
        ),
        "predict" => format!(
            "Defaults: tau_cls {}, tau_det {}, detector confidence {}, NMS IoU {}.",
            paper.fusion.tau_cls, paper.fusion.tau_det, d.conf_threshold, d.nms_iou
        ),
        "rank" => format!("Defaults: window {} epochs.", paper.eval.rank_window),
        _ => return None,
    };
    Some(text)
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        4
    } else if matches!(err, Error::Config(_)) {
        2
    } else {
        3
    }
}

fn run(cli: Cli) -> pepipe::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    let profile = cli.profile.into();
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path, profile)?,
        None => RunConfig::preset(profile),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let ctx = Context { config, out: cli.out };
    match cli.command {
        Command::Phantom(PhantomCommand::Gen(args)) => commands::phantom_gen(&ctx, &args),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::TrainClassifier(args) => commands::train_classifier(ctx, &args),
        Command::TrainDetector(args) => commands::train_detector(ctx, &args),
        Command::EvalClassifier(args) => commands::eval_classifier(&ctx, &args),
        Command::EvalDetector(args) => commands::eval_detector(&ctx, &args),
        Command::Rank(args) => commands::rank(&ctx, &args),
        Command::Predict(args) => commands::predict(&ctx, &args),
        Command::Selftest(args) => commands::selftest(&ctx, &args),
    }
}

fn main() -> ExitCode {
    let mut command = Cli::command();
    let names: Vec<String> = command.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        if let Some(text) = defaults_help(&name) {
            command = command.mut_subcommand(name, |s| s.after_help(text));
        }
    }
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
