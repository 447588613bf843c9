use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use stochint::ascent::{PenaltyKind, StartPoint};
use stochint::dataio::Stage;
use stochint::model::{Coding, VcovKind};

#[derive(Debug, Parser, Serialize)]
#[command(name = "stochint", version, about = "Optimal stochastic interventions for conjoint experiments")]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON object of default flag values; flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: STOCHINT_THREADS, else all logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Fit a forced-choice linear probability model.
    Fit(FitArgs),
    /// Find the regularized optimal profile distribution.
    Optimize(OptimizeArgs),
    /// Solve the two-party game with primaries.
    Adversarial(AdversarialArgs),
    /// Run a Monte Carlo study and write its summary table.
    Simulate(SimulateArgs),
    /// Strategic divergence between two strategies.
    Diverge(DivergeArgs),
    /// Variance bound of the weighting estimator for a strategy.
    Bound(BoundArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Optimize(_) => "optimize",
            Command::Adversarial(_) => "adversarial",
            Command::Simulate(_) => "simulate",
            Command::Diverge(_) => "diverge",
            Command::Bound(_) => "bound",
        }
    }
}

pub const SUBCOMMANDS: [&str; 6] = ["fit", "optimize", "adversarial", "simulate", "diverge", "bound"];

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CodingArg {
    SumToZero,
    Baseline,
}

impl From<CodingArg> for Coding {
    fn from(c: CodingArg) -> Self {
        match c {
            CodingArg::SumToZero => Coding::SumToZero,
            CodingArg::Baseline => Coding::Baseline,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VcovArg {
    Iid,
    Cluster,
}

impl From<VcovArg> for VcovKind {
    fn from(v: VcovArg) -> Self {
        match v {
            VcovArg::Iid => VcovKind::Iid,
            VcovArg::Cluster => VcovKind::Cluster,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageArg {
    Primary,
    General,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Primary => Stage::Primary,
            StageArg::General => Stage::General,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyArg {
    L2,
    Maxprob,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::L2 => PenaltyKind::L2,
            PenaltyArg::Maxprob => PenaltyKind::MaxProb,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StartArg {
    Uniform,
    Design,
}

impl From<StartArg> for StartPoint {
    fn from(s: StartArg) -> Self {
        match s {
            StartArg::Uniform => StartPoint::Uniform,
            StartArg::Design => StartPoint::Design,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Closed,
    Ascent,
    Onestep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyArg {
    Average,
    Adversarial,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Design JSON.
    #[arg(long)]
    pub design: PathBuf,
    /// Forced-choice CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = CodingArg::SumToZero)]
    pub coding: CodingArg,
    #[arg(long, value_enum, default_value_t = VcovArg::Cluster)]
    pub vcov: VcovArg,
    /// Keep only this respondent group.
    #[arg(long)]
    pub group: Option<String>,
    /// Keep only this stage.
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Output file stem inside the output directory.
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct OptimizeArgs {
    /// Fitted model JSON (closed and ascent methods).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Design JSON (onestep method).
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// Forced-choice CSV (onestep method).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Ascent)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = PenaltyArg::L2)]
    pub penalty: PenaltyArg,
    /// Single penalty weight; shorthand for a one-point grid.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated penalty weights.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Vec<f64>,
    /// Keep the objective trace in the output.
    #[arg(long)]
    pub trace: bool,
    #[arg(long, value_enum, default_value_t = StartArg::Uniform)]
    pub start: StartArg,
    #[arg(long, default_value_t = 5000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
    /// Skip the final Newton steps.
    #[arg(long)]
    pub no_polish: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.5)]
    pub split_fraction: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AdversarialArgs {
    /// Institution JSON: group weights, four model files, optional challengers.
    #[arg(long)]
    pub institution: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = PenaltyArg::L2)]
    pub penalty: PenaltyArg,
    /// Also solve on a strategy grid of this spacing and report the comparison.
    #[arg(long)]
    pub grid_resolution: Option<f64>,
    /// Certify the equilibrium against unilateral moves on a grid of this spacing.
    #[arg(long)]
    pub deviation_resolution: Option<f64>,
    /// Delta-method standard errors from the four models' covariances.
    #[arg(long)]
    pub inference: bool,
    #[arg(long, default_value_t = 20_000)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub study: StudyArg,
    #[arg(long, default_value_t = 300)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated sample sizes (default depends on the study).
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<usize>,
    /// Number of binary factors in the average-case study.
    #[arg(long, default_value_t = 5)]
    pub factors: usize,
    /// Comma-separated shares of group R in the adversarial study.
    #[arg(long, value_delimiter = ',')]
    pub p_r: Vec<f64>,
    /// Fixed penalty weight (average case); calibrated when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct DivergeArgs {
    /// Strategy JSON {"design": ..., "pi": [[...]], "covariance": optional}.
    #[arg(long)]
    pub strategy_a: PathBuf,
    #[arg(long)]
    pub strategy_b: PathBuf,
    /// Profile as factor=level pairs separated by commas; every profile when absent.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundArgs {
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Strategy JSON; the design probabilities when absent.
    #[arg(long)]
    pub strategy: Option<PathBuf>,
    /// Override for the outcome noise variance.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Override for the second moment of the conditional mean under the strategy.
    #[arg(long)]
    pub second_moment: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
