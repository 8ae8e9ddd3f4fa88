//! Command-line surface. Every setting is optional on the command line so a
//! `--config` file can supply it; explicit flags win.

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ctkit", version, about = "Curvature tuning experiments on toy models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Flat key=value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the annulus classification set or the 1-D sine regression set.
    GenData(GenDataArgs),
    /// Pretrain a ReLU MLP on a dataset.
    Train(TrainArgs),
    /// Sweep a shared β over a trained network (steering).
    Steer(SteerArgs),
    /// Finetune per-neuron trainable (β, c) on a frozen backbone.
    FinetuneTct(FinetuneTctArgs),
    /// Finetune low-rank adapters on a frozen backbone.
    FinetuneLora(FinetuneLoraArgs),
    /// Retrain only the final layer.
    Probe(ProbeArgs),
    /// Circle-boundary error of a 2-D network checkpoint.
    CircleError(CircleErrorArgs),
    /// Curvature report, Jacobian bound and decision boundary of a checkpoint.
    Diagnose(DiagnoseArgs),
    /// β sweep on a classifier and a deep regressor.
    Fig1(Fig1Args),
    /// Pretrain, then compare frozen, LoRA and trainable-CT finetuning.
    Fig2(Fig2Args),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// annulus or sine.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<String>,
    /// Comma-separated layer widths, e.g. 2,7,1.
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub net: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub beta_lo: Option<f64>,
    #[arg(long)]
    pub beta_hi: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    /// direct or reprobe.
    #[arg(long)]
    pub mode: Option<String>,
    /// Split used for the metric: train, val, test or all.
    #[arg(long)]
    pub eval_split: Option<String>,
    #[arg(long)]
    pub probe_steps: Option<usize>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FinetuneTctArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub net: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr_ct: Option<f64>,
    #[arg(long)]
    pub lr_head: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub train_head: Option<bool>,
    #[arg(long, allow_hyphen_values = true)]
    pub raw_beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub raw_coeff: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FinetuneLoraArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub net: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_head: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub train_head: Option<bool>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub net: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CircleErrorArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub net: Option<String>,
    #[arg(long)]
    pub n_scan: Option<usize>,
    #[arg(long)]
    pub n_panels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub net: Option<String>,
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long)]
    pub half_width: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Fig1Args {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_classification: Option<usize>,
    #[arg(long)]
    pub n_regression: Option<usize>,
    #[arg(long)]
    pub classification_steps: Option<usize>,
    #[arg(long)]
    pub regression_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub curvature_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Fig2Args {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    #[arg(long)]
    pub lr_pretrain: Option<f64>,
    #[arg(long)]
    pub lr_ct: Option<f64>,
    #[arg(long)]
    pub lr_lora: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub curvature_points: Option<usize>,
}
