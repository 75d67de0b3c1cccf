//! `sasv`: simulate, calibrate, fuse, evaluate and train spoofing-robust
//! speaker verification back-ends from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "sasv", version, about = "Spoofing-robust speaker verification back-end")]
struct Cli {
    /// Worker threads for scoring and evaluation. Results do not depend on it.
    #[arg(long, global = true, env = "SASV_JOBS", default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scores or embeddings.
    Simulate(SimulateArgs),
    /// Fit an affine score-to-LLR calibration.
    Calibrate(CalibrateArgs),
    /// Fuse ASV and CM scores into one SASV score per trial.
    Fuse(FuseArgs),
    /// Compute min/actual a-DCF and EERs of a score file.
    Eval(EvalArgs),
    /// Jointly train ASV and CM heads on embeddings.
    Train(TrainArgs),
    /// Export a DET curve of targets against one negative class.
    Det(DetArgs),
    /// Export fused scores and Bayes decisions over an LLR grid.
    Grid(GridArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimMode {
    Scores,
    Embeddings,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    mode: SimMode,
    /// JSON simulation config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    /// Target against nontarget (spoofs ignored).
    Asv,
    /// Bona fide against spoof.
    Cm,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Linear,
    Nonlinear,
}

impl From<Mode> for sasv::decision::FusionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Linear => Self::Linear,
            Mode::Nonlinear => Self::Nonlinear,
        }
    }
}

/// Costs and priors of the a-DCF.
#[derive(Debug, Clone, Args)]
struct CostArgs {
    #[arg(long, default_value_t = 1.0)]
    cmiss: f64,
    #[arg(long, default_value_t = 10.0)]
    cfa_non: f64,
    #[arg(long, default_value_t = 20.0)]
    cfa_spf: f64,
    #[arg(long, default_value_t = 0.9)]
    ptar: f64,
    #[arg(long, default_value_t = 0.05)]
    pnon: f64,
    #[arg(long, default_value_t = 0.05)]
    pspf: f64,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    asv: PathBuf,
    #[arg(long)]
    cm: PathBuf,
    #[arg(long, value_enum, default_value = "nonlinear")]
    mode: Mode,
    /// Nonlinear fusion weight; derived from the priors when omitted.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    asv_calib: Option<PathBuf>,
    #[arg(long)]
    cm_calib: Option<PathBuf>,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    cost: CostArgs,
    /// Also report the actual a-DCF at this threshold.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long)]
    unnormalized: bool,
    /// Written to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum Arch {
    MlpMlp,
    CosineMlp,
    WcosMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    V1,
    V2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Random,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CalibGradArg {
    Both,
    FusedOnly,
    AuxOnly,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "wcos-mlp")]
    arch: Arch,
    #[arg(long, value_enum, default_value = "v1")]
    loss: LossArg,
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value = "random")]
    init: InitArg,
    #[arg(long, value_enum, default_value = "nonlinear")]
    fusion: Mode,
    #[arg(long)]
    asv_emb: PathBuf,
    #[arg(long)]
    cm_emb: PathBuf,
    #[arg(long)]
    train_proto: PathBuf,
    #[arg(long)]
    dev_proto: PathBuf,
    #[arg(long, default_value_t = sasv::train::DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = sasv::train::DEFAULT_BATCH_SIZE)]
    batch: usize,
    #[arg(long, default_value_t = sasv::train::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "384,160")]
    hidden: Vec<usize>,
    /// Steepness of the soft a-DCF.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    unnormalized: bool,
    #[arg(long, value_enum, default_value = "both")]
    calibration_gradient: CalibGradArg,
    #[arg(long, default_value_t = 20)]
    pretrain_epochs: usize,
    #[command(flatten)]
    cost: CostArgs,
    /// Per-epoch JSON lines log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Negatives {
    Nontarget,
    Spoof,
}

#[derive(Debug, Args)]
struct DetArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_enum)]
    negatives: Negatives,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Use the fusion of a trained checkpoint.
    #[arg(long, conflicts_with_all = ["mode", "rho"], required_unless_present = "mode")]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    asv_min: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    asv_max: f64,
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    cm_min: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    cm_max: f64,
    #[arg(long, default_value_t = 101)]
    steps: usize,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(2);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
