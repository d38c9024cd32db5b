//! `ganpo`: data generation, training, evaluation, divergence checks and
//! plotting from one executable.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ganpo::evalsuite::LatentSource;
use ganpo::latentadv::DiscArch;
use ganpo::prefdata::Task;
use ganpo::trainer::{GenScoring, LatentPositions, OptimizerKind, TrainConfig, TrainObjective};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "GANPO_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ganpo::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ganpo", version, about = "Preference optimization with hidden-state discriminators on toy language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a synthetic preference corpus from a seed model.
    GenData(GenDataArgs),
    /// Train a policy (and discriminators) on a preference corpus.
    Train(TrainArgs),
    /// Compare two models across sampling temperatures, plus length buckets.
    EvalSweep(EvalSweepArgs),
    /// Summarize reward-margin curves from one or more metrics logs.
    EvalMargins(EvalMarginsArgs),
    /// Correlate discriminator scores with the oracle reward.
    EvalCorr(EvalCorrArgs),
    /// Check the divergence properties numerically on random distributions.
    VerifyDivergence(VerifyArgs),
    /// Render a result table as an SVG chart.
    Plot(PlotArgs),
}

macro_rules! train_flags {
    ($($(#[doc = $doc:literal])* $field:ident : $ty:ty = $flag:literal),* $(,)?) => {
        /// Per-field overrides of the training configuration.
        #[derive(Args, Debug, Default, Clone)]
        pub struct TrainFlags {
            $(
                $(#[doc = $doc])*
                #[arg(long = $flag)]
                pub $field: Option<$ty>,
            )*
        }

        impl TrainFlags {
            pub fn apply(&self, c: &mut TrainConfig) {
                $(
                    if let Some(v) = &self.$field {
                        c.$field = v.clone();
                    }
                )*
            }
        }
    };
}

train_flags! {
    /// Objective: dpo, simpo, ganpo-dpo or ganpo-simpo.
    objective: TrainObjective = "objective",
    /// Peak learning rate.
    eta: f64 = "eta",
    /// Weight of the adversarial loss.
    lambda_adv: f64 = "lambda",
    /// Decay of the discriminator running means.
    alpha: f64 = "alpha",
    /// DPO temperature; also scales the logged reward margin.
    beta_dpo: f64 = "beta",
    /// SimPO reward scale.
    simpo_beta: f64 = "simpo-beta",
    /// SimPO target margin.
    simpo_gamma: f64 = "simpo-gamma",
    /// Preference pairs per step.
    batch_size: usize = "batch-size",
    /// Passes over the corpus.
    epochs: usize = "epochs",
    /// Stop after this many steps (0 = no limit).
    max_steps: usize = "max-steps",
    /// Fraction of steps spent in linear warmup.
    warmup_fraction: f64 = "warmup-fraction",
    /// Seed for initialization and data order.
    seed: u64 = "seed",
    /// Discriminator learning rate as a fraction of the policy's.
    disc_lr_ratio: f64 = "disc-lr-ratio",
    /// Discriminator: transformer, mlp or mse_fixed.
    disc_arch: DiscArch = "disc-arch",
    /// Discriminator hidden width.
    disc_hidden: usize = "disc-hidden",
    /// Discriminator encoder layers.
    disc_layers: usize = "disc-layers",
    /// Discriminator attention heads.
    disc_heads: usize = "disc-heads",
    /// Length of the discriminator positional table.
    disc_max_positions: usize = "disc-max-positions",
    /// Spectral-norm power iterations per discriminator step.
    sn_power_iters: usize = "sn-power-iters",
    /// Optimizer: adamw or sgd.
    optimizer: OptimizerKind = "optimizer",
    /// Decoupled weight decay.
    weight_decay: f64 = "weight-decay",
    /// Global gradient-norm clip (0 disables).
    clip_norm: f64 = "clip-norm",
    /// Positions the discriminators see: all or response.
    latent_positions: LatentPositions = "latent-positions",
    /// Discriminator weights for the generator loss: post-update or pre-update.
    gen_scoring: GenScoring = "gen-scoring",
    /// Language-model width.
    lm_d_model: usize = "lm-d-model",
    /// Language-model layers.
    lm_layers: usize = "lm-layers",
    /// Language-model attention heads.
    lm_heads: usize = "lm-heads",
    /// Language-model context length.
    lm_max_seq_len: usize = "lm-max-seq-len",
    /// Extra checkpoint interval in steps (0 = epoch boundaries only).
    checkpoint_every: usize = "checkpoint-every",
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Task: sorted-run, balanced-brackets or target-count.
    #[arg(long, default_value = "sorted-run")]
    pub task: Task,
    /// Records to emit.
    #[arg(long, default_value_t = 200)]
    pub n_records: usize,
    /// Sampling temperature of the seed model.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Longest response in characters.
    #[arg(long, default_value_t = 10)]
    pub max_response_len: usize,
    /// Extra draws when both responses tie under the oracle.
    #[arg(long, default_value_t = 8)]
    pub max_resamples: usize,
    /// Seed model checkpoint (a nanolm or train-state file). Without it the
    /// model is initialized from the training configuration.
    #[arg(long)]
    pub seed_model: Option<PathBuf>,
    /// Training configuration supplying the model shape and init seed.
    #[arg(long, conflicts_with = "seed_model")]
    pub config: Option<PathBuf>,
    /// Initialization seed of the seed model [default: the config's seed].
    #[arg(long, conflicts_with = "seed_model")]
    pub model_seed: Option<u64>,
    /// Output file [default: $GANPO_OUT_DIR/data/<task>.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat TOML configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preference corpus written by gen-data.
    #[arg(long, required_unless_present = "dump_config")]
    pub data: Option<PathBuf>,
    /// Output directory [default: $GANPO_OUT_DIR/train].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a train-state checkpoint of the same configuration.
    #[arg(long, conflicts_with = "dump_config")]
    pub resume: Option<PathBuf>,
    /// Print the merged configuration as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
    /// Progress line interval in steps (0 = silent).
    #[arg(long, default_value_t = 25)]
    pub log_every: usize,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalSweepArgs {
    /// Model A checkpoint (nanolm or train state; a train state contributes its policy).
    #[arg(long)]
    pub model_a: PathBuf,
    /// Model B checkpoint [default: the reference stored in model A's train state].
    #[arg(long)]
    pub model_b: Option<PathBuf>,
    /// Series label of model A.
    #[arg(long, default_value = "a")]
    pub label_a: String,
    /// Series label of model B.
    #[arg(long, default_value = "b")]
    pub label_b: String,
    /// Task whose oracle judges the responses.
    #[arg(long, default_value = "sorted-run")]
    pub task: Task,
    /// Number of evaluation prompts.
    #[arg(long, default_value_t = 200)]
    pub n_prompts: usize,
    /// Seed of the evaluation prompts.
    #[arg(long, default_value_t = 99)]
    pub prompt_seed: u64,
    /// Comma-separated temperatures.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1,1.25,1.5")]
    pub temperatures: Vec<f64>,
    /// Sampling seed of model A.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampling seed of model B [default: same as model A].
    #[arg(long)]
    pub seed_b: Option<u64>,
    /// Longest response in characters.
    #[arg(long, default_value_t = 10)]
    pub max_response_len: usize,
    /// Comma-separated length-bucket edges, starting at 0.
    #[arg(long, value_delimiter = ',', default_value = "0,2,4,8")]
    pub bucket_edges: Vec<usize>,
    /// Temperature of the length-bucket comparison.
    #[arg(long, default_value_t = 1.0)]
    pub bucket_temperature: f64,
    /// Sweep table [default: $GANPO_OUT_DIR/eval/sweep.jsonl]. Buckets and a
    /// summary are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalMarginsArgs {
    /// Metrics log as NAME=PATH; repeat to overlay runs.
    #[arg(long = "run", required = true, value_parser = parse_named_path)]
    pub runs: Vec<(String, PathBuf)>,
    /// Margin table [default: $GANPO_OUT_DIR/eval/margins.jsonl]. A summary
    /// is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DiscSide {
    Pos,
    Neg,
}

#[derive(Args, Debug)]
pub struct EvalCorrArgs {
    /// Train-state checkpoint holding the policy and discriminators.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task whose oracle judges the responses.
    #[arg(long, default_value = "sorted-run")]
    pub task: Task,
    /// Sampling temperature.
    #[arg(long, default_value_t = 1.5)]
    pub temperature: f64,
    /// Number of sampled responses.
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    /// Seed of the evaluation prompts.
    #[arg(long, default_value_t = 99)]
    pub prompt_seed: u64,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Longest response in characters.
    #[arg(long, default_value_t = 10)]
    pub max_response_len: usize,
    /// Model that encodes the samples: policy or reference.
    #[arg(long, default_value = "policy")]
    pub latents: LatentSource,
    /// Which discriminator scores the latents.
    #[arg(long, value_enum, default_value = "pos")]
    pub disc: DiscSide,
    /// Score table [default: $GANPO_OUT_DIR/eval/corr.jsonl]. A summary is
    /// written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Support size of the random distributions (at most 16).
    #[arg(long, default_value_t = 4)]
    pub support: usize,
    /// Random pairs per property.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Seed of the random distributions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Margins,
    Sweep,
    Corr,
    Buckets,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Table type of the input.
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Input table (JSON Lines) written by an eval command.
    #[arg(long)]
    pub input: PathBuf,
    /// Sweep column on the y axis: mean_reward or win_rate.
    #[arg(long, default_value = "mean_reward")]
    pub y: String,
    /// Output file [default: $GANPO_OUT_DIR/plots/<kind>.svg].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
