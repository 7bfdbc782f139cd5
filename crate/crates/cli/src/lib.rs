//! The `duoflow` command line: dataset generation, two-stage training,
//! sampling, evaluation and the view-informativeness diagnostic.
//!
//! Every command takes `--config PATH --seed N --out DIR --force`, writes the
//! resolved config to `DIR/run.json` before doing any work, and exits with
//! 0 on success, 2 for config errors, 3 for data errors, 4 for numerical
//! failures and 5 when a built-in check fails.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use duoflow::model::{FusionStrategy, Modality};
use duoflow::world::View;
use duoflow::ConditionRegime;
use serde::Serialize;

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "duoflow", version, about = "Dual-branch text/image conditioned flow generation on toy voxel assets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a toy dataset.
    Datagen(DatagenArgs),
    /// Pretrain one branch.
    Train(TrainArgs),
    /// Assemble two pretrained branches with bridges and train jointly.
    Finetune(FinetuneArgs),
    /// Generate assets from a bundle checkpoint.
    Sample(SampleArgs),
    /// Score generated assets against ground truth.
    Eval(EvalArgs),
    /// Score four conditioning setups on the held-out split.
    Diagnose(DiagnoseArgs),
    /// Finite-difference check of every op and a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Proceed when a checkpoint was made from another dataset or config.
    #[arg(long)]
    pub allow_mismatch: bool,
}

impl Common {
    /// Defaults, then the config file, then `--seed`.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DatagenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of assets; overrides `data.count`.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchArg {
    Img,
    Txt,
}

impl BranchArg {
    pub fn modality(self) -> Modality {
        match self {
            BranchArg::Img => Modality::Image,
            BranchArg::Txt => Modality::Text,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub branch: BranchArg,
    /// Target step count; overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionArg {
    Sim,
    Aw,
    At,
}

impl From<FusionArg> for FusionStrategy {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Sim => FusionStrategy::Sim,
            FusionArg::Aw => FusionStrategy::Aw,
            FusionArg::At => FusionStrategy::At,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained image branch checkpoint.
    #[arg(long, required_unless_present = "resume")]
    pub img: Option<PathBuf>,
    /// Pretrained text branch checkpoint.
    #[arg(long, required_unless_present = "resume")]
    pub txt: Option<PathBuf>,
    /// Overrides `finetune.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides `finetune.fusion`.
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Continue from a bundle checkpoint.
    #[arg(long, conflicts_with_all = ["img", "txt"])]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeArg {
    Text,
    Image,
    Joint,
    Uncond,
}

impl From<RegimeArg> for ConditionRegime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Text => ConditionRegime::TextOnly,
            RegimeArg::Image => ConditionRegime::ImageOnly,
            RegimeArg::Joint => ConditionRegime::Joint,
            RegimeArg::Uncond => ConditionRegime::Uncond,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewArg {
    Front,
    Top,
    Bottom,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Front => View::Front,
            ViewArg::Top => View::Top,
            ViewArg::Bottom => View::Bottom,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bundle checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    /// Dataset the conditioning assets come from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `all`, `train`, `test`, or ids such as `3,7,10-19`; one sample each.
    #[arg(long, requires = "data")]
    pub assets: Option<String>,
    /// View used as the image condition.
    #[arg(long, value_enum, default_value = "front")]
    pub view: ViewArg,
    /// Text condition `shape,size,top_color,body_color,marking`; defaults to
    /// each asset's own attributes.
    #[arg(long)]
    pub attrs: Option<String>,
    /// Samples to draw when no assets are named; overrides `sample.count`.
    #[arg(long)]
    pub count: Option<usize>,
    /// Euler steps; overrides `sample.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale; overrides `sample.cfg_scale`.
    #[arg(long)]
    pub cfg_scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Ground-truth dataset.
    #[arg(long)]
    pub gt: PathBuf,
    /// Generated dataset, or a directory holding `features.json`.
    #[arg(long)]
    pub generated: PathBuf,
    /// Ground-truth assets to score.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Overrides `eval.extractor_seed`.
    #[arg(long)]
    pub extractor_seed: Option<u64>,
    /// Also write both feature sets.
    #[arg(long)]
    pub export_features: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bundle checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out assets to score; overrides `diagnose.assets`.
    #[arg(long)]
    pub assets: Option<usize>,
    /// Overrides `diagnose.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corrupt the backward rule of one op (test fixture).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Run one parsed command, writing progress to `log`.
pub fn run(cli: &Cli, log: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Datagen(a) => commands::datagen::run(a, log),
        Command::Train(a) => commands::train::train(a, log),
        Command::Finetune(a) => commands::train::finetune(a, log),
        Command::Sample(a) => commands::sample::run(a, log),
        Command::Eval(a) => commands::eval::run(a, log),
        Command::Diagnose(a) => commands::diagnose::run(a, log),
        Command::Gradcheck(a) => commands::gradcheck::run(a, log),
    }
}

/// Parse `args` (including the program name) and run.
pub fn run_args<I, S>(args: I, log: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(&cli, log)
}
