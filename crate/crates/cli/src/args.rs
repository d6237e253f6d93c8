use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "metacal",
    version,
    about = "Differentiable ECE and meta-learned calibration experiments"
)]
pub struct Cli {
    /// Output directory; every artifact of the command is written under it.
    #[arg(long, global = true, env = "METACAL_OUT", default_value = "runs")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic training pool and test set as CSV.
    GenData(ConfigArgs),
    /// Train one model per seed and write its report, checkpoint and omega.
    #[command(after_help = crate::keys::config_help())]
    Train(TrainArgs),
    /// Run the M0-M4 ablation variants over several seeds.
    #[command(after_help = crate::keys::config_help())]
    Ablate(AblateArgs),
    /// Compare DECE and SB-ECE against ECE over many prediction batches.
    MetricCompare(MetricCompareArgs),
    /// Reliability-diagram bins of a trained run, before and after temperature scaling.
    Reliability(RunArgs),
    /// Finite-difference checks of every tape operation and of DECE.
    GradCheck(GradCheckArgs),
    /// Finite-difference check of the one-step hypergradient.
    HypergradCheck(HypergradCheckArgs),
    /// Retrain on train plus meta-validation with a fixed, previously learned omega.
    #[command(after_help = crate::keys::config_help())]
    Retrain(RetrainArgs),
    /// Fit a temperature on the validation split of a trained run.
    TempScale(TempScaleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Config override `key.path=value`, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Run seed, same as `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Comma-separated seeds, each written to `seed-N/`; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,

    /// Meta-learn with corrupted meta-validation batches and evaluate the
    /// corrupted test domains. Same as `--set meta.enabled=true
    /// --set meta.multi_domain=true --set eval.corrupted_domains=true`.
    #[arg(long)]
    pub multi_domain: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,

    /// Comma-separated variants out of M0 (CE), M1 (CE + DECE), M2 (meta, CE
    /// objective), M3 (meta, MMCE objective), M4 (meta, DECE objective).
    #[arg(long, value_delimiter = ',', default_value = "M0,M1,M2,M3,M4")]
    pub variants: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MetricCompareArgs {
    /// Run directory written by `train`; its final model and snapshots are
    /// evaluated on test batches.
    #[arg(long)]
    pub run: Option<PathBuf>,

    /// Number of random synthetic prediction batches.
    #[arg(long, default_value_t = 200)]
    pub random_batches: usize,

    /// Samples per batch.
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,

    /// Classes of the random batches.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,

    /// Seed of the random batches.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Bins M of all three estimators [ref].
    #[arg(long, default_value_t = 15)]
    pub bins: usize,

    /// DECE soft accuracy sharpness [ref].
    #[arg(long, default_value_t = 100.0)]
    pub tau_a: f64,

    /// DECE soft binning temperature [ref].
    #[arg(long, default_value_t = 0.01)]
    pub tau_b: f64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run directory written by `train` or `retrain`.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Seed of the random inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,

    /// Relative tolerance of the operation checks.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,

    /// Relative tolerance of the end-to-end DECE check.
    #[arg(long, default_value_t = 1e-4)]
    pub dece_tol: f64,

    /// Lower bound of the relative-error denominator.
    #[arg(long, default_value_t = 1e-6)]
    pub floor: f64,
}

#[derive(Debug, Args)]
pub struct HypergradCheckArgs {
    /// Seed of the tiny 2-8-4 model and its batches.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Meta-objective: dece [ref], ce, mmce or dece_plus_ce.
    #[arg(long, default_value = "dece")]
    pub objective: String,

    /// Inner learning rate of the simulated step.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,

    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,

    /// Relative tolerance.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,

    /// Lower bound of the relative-error denominator.
    #[arg(long, default_value_t = 1e-8)]
    pub floor: f64,
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Hyper-parameter file, e.g. `omega.json` written by `train`.
    #[arg(long)]
    pub omega: PathBuf,
}

#[derive(Debug, Args)]
pub struct TempScaleArgs {
    #[command(flatten)]
    pub run: RunArgs,

    /// Smallest candidate temperature.
    #[arg(long, default_value_t = 0.05)]
    pub t_min: f64,

    /// Largest candidate temperature.
    #[arg(long, default_value_t = 10.0)]
    pub t_max: f64,

    /// Grid spacing.
    #[arg(long, default_value_t = 0.01)]
    pub t_step: f64,
}
