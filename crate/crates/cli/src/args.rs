use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loaded_dice::EstimatorFamily;

#[derive(Debug, Parser)]
#[command(
    name = "loaded-dice",
    version,
    about = "Any-order policy-gradient estimators on random tabular MDPs"
)]
pub struct Cli {
    /// Worker threads; defaults to every available core. Results do not
    /// depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random MDP and write it as JSON.
    GenMdp(GenMdpArgs),
    /// Print the analytic value and its derivatives of orders 1..=3.
    Exact(ExactArgs),
    /// Bias, spread and correlation of estimated derivatives over a sweep.
    Sweep(SweepArgs),
    /// Tabular meta-learning through a Loaded DiCE inner step.
    Meta(MetaArgs),
    /// Re-run the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct MdpShape {
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    #[arg(long, default_value_t = 4)]
    pub actions: usize,
    #[arg(long, default_value_t = 0.95)]
    pub gamma: f64,
}

#[derive(Debug, Args)]
pub struct GenMdpArgs {
    #[command(flatten)]
    pub shape: MdpShape,
    #[arg(long, env = "LOADED_DICE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExactArgs {
    /// MDP file; when absent a random MDP is drawn from the shape flags and `--seed`.
    #[arg(long)]
    pub mdp: Option<PathBuf>,
    #[command(flatten)]
    pub shape: MdpShape,
    #[arg(long, env = "LOADED_DICE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Draw logits from Normal(0, 0.1) with this seed instead of using a uniform policy.
    #[arg(long)]
    pub logits_seed: Option<u64>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub max_order: u8,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    Tau,
    Lambda,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdvantageArg {
    /// GAE(γ, τ) on the supplied values.
    Gae,
    /// `Q − V` from the supplied table.
    Exact,
    /// Discounted reward-to-go.
    Returns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TruthArg {
    Infinite,
    Finite,
}

fn parse_estimator(s: &str) -> Result<EstimatorFamily, String> {
    s.parse().map_err(|e: loaded_dice::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// dice, dice_baseline, lvc or loaded_dice.
    #[arg(long, default_value = "loaded_dice", value_parser = parse_estimator)]
    pub estimator: EstimatorFamily,
    #[arg(long, value_enum, default_value_t = SweepArg::Lambda)]
    pub sweep: SweepArg,
    /// Comma-separated sweep values (default depends on `--sweep`).
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Standard deviation of the Gaussian noise added to the value function.
    #[arg(long, default_value_t = 0.0)]
    pub value_noise: f64,
    #[arg(long, default_value_t = 200)]
    pub batches: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub horizon: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub orders: Vec<usize>,
    /// Run seed: batches and value noise.
    #[arg(long, env = "LOADED_DICE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// MDP and policy seed (defaults to `--seed`).
    #[arg(long)]
    pub mdp_seed: Option<u64>,
    /// Use this MDP instead of a random one.
    #[arg(long)]
    pub mdp: Option<PathBuf>,
    #[command(flatten)]
    pub shape: MdpShape,
    #[arg(long, value_enum, default_value_t = AdvantageArg::Gae)]
    pub advantage: AdvantageArg,
    /// Do not bootstrap the value beyond the horizon.
    #[arg(long)]
    pub no_bootstrap: bool,
    #[arg(long)]
    pub normalize_advantages: bool,
    /// Drop the γ^t weights from Loaded DiCE and LVC objectives.
    #[arg(long)]
    pub undiscounted_objective: bool,
    #[arg(long, value_enum, default_value_t = TruthArg::Infinite)]
    pub truth: TruthArg,
    /// Replace Monte-Carlo batches by exact enumeration over trajectories.
    #[arg(long)]
    pub enumerate: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetaArgs {
    /// Number of tasks, seeded 0..N (ignored when `--task-seeds` is given).
    #[arg(long, default_value_t = 5)]
    pub tasks: u64,
    #[arg(long, value_delimiter = ',')]
    pub task_seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 0.1)]
    pub inner_lr: f64,
    /// λ of the inner Loaded DiCE objective.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub inner_steps: usize,
    #[arg(long, default_value_t = 32)]
    pub task_batch: usize,
    #[arg(long, default_value_t = 32)]
    pub outer_batch: usize,
    #[arg(long, default_value_t = 100)]
    pub outer_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub outer_lr: f64,
    #[arg(long, default_value_t = 50)]
    pub horizon: usize,
    #[command(flatten)]
    pub shape: MdpShape,
    #[arg(long, env = "LOADED_DICE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Reuse the same rollout seeds at every outer step.
    #[arg(long)]
    pub fixed_batches: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Write to this path instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
