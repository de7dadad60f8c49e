use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;

#[derive(Parser, Debug, Serialize)]
#[command(name = "hyperground", version, about = "Hyperbolic-Euclidean grounding toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalArgs {
    /// Seed for every random stream
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    /// Main output path (weights file, predictions file or output directory)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Run the randomized geometry property suite
    GeomCheck(GeomCheckArgs),
    /// Compare analytic contrastive gradients with finite differences
    GradCheck(GradCheckArgs),
    /// Closed-form analysis of the mixing weight
    AnalyzeAlpha(AnalyzeAlphaArgs),
    /// Train on the synthetic concept hierarchy
    TrainToy(TrainToyArgs),
    /// Split a referring expression into single-target phrases
    Decouple(DecoupleArgs),
    /// Select one anchor box per phrase
    Ground(GroundArgs),
    /// Score predictions against ground truth
    Eval(EvalArgs),
    /// decouple -> ground -> eval over JSONL inputs
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GeomCheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    #[arg(long, default_value_t = 16)]
    pub max_dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeAlphaArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub b_e: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub b_h: f64,
    #[arg(long)]
    pub sigma_e: f64,
    #[arg(long)]
    pub sigma_h: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub rho: f64,
    /// Monte-Carlo draws per spot check; 0 skips the oracle
    #[arg(long, default_value_t = 200_000)]
    pub mc_n: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedArg {
    Linear,
    ExpMap,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub negatives: usize,
    /// Include each image's own negatives in its denominator
    #[arg(long)]
    pub intra_negatives: bool,
    #[arg(long, default_value_t = 16)]
    pub batch_images: usize,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 3)]
    pub parents: usize,
    #[arg(long, default_value_t = 3)]
    pub children: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Fraction of generated samples flagged invalid (dropped before training)
    #[arg(long, default_value_t = 0.0)]
    pub invalid_fraction: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = EmbedArg::Linear)]
    pub embed: EmbedArg,
    /// Loss trace CSV (default: next to the weights file)
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Apex report JSON (default: next to the weights file)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ServiceArgs {
    /// Use recorded responses or the rule-based splitter instead of the service
    #[arg(long)]
    pub offline: bool,
    #[arg(long, default_value_t = 30)]
    pub vlm_timeout_s: u64,
    /// Extra attempts after a malformed response
    #[arg(long, default_value_t = 2)]
    pub retries: usize,
    /// Leave the worked examples out of the prompt
    #[arg(long)]
    pub no_examples: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct DecoupleArgs {
    #[arg(long)]
    pub expr: String,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[command(flatten)]
    pub service: ServiceArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct GroundArgs {
    #[arg(long)]
    pub anchors: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    pub top_frac: f64,
    /// Avoid reusing an anchor for several phrases while others remain
    #[arg(long)]
    pub distinct_anchors: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricArg {
    Grec,
    Wrec,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::Grec)]
    pub metric: MetricArg,
    /// Include the per-sample breakdown
    #[arg(long)]
    pub per_sample: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub anchors: PathBuf,
    #[arg(long)]
    pub expressions: PathBuf,
    #[arg(long)]
    pub phrase_features: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    pub top_frac: f64,
    #[arg(long)]
    pub distinct_anchors: bool,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long)]
    pub per_sample: bool,
    #[command(flatten)]
    pub service: ServiceArgs,
}

/// How a run ended when it did not fail outright.
pub enum Outcome {
    Ok,
    /// Finished, but some samples or properties failed.
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = cli.global.log_level.parse().unwrap_or(log::LevelFilter::Warn);
    env_logger::Builder::new().filter_level(filter).target(env_logger::Target::Stderr).init();

    match serde_json::to_string(&cli) {
        Ok(config) => eprintln!("{config}"),
        Err(e) => log::warn!("could not serialize resolved config: {e}"),
    }

    let result = match &cli.command {
        Command::GeomCheck(a) => commands::geom_check(&cli.global, a),
        Command::GradCheck(a) => commands::grad_check(&cli.global, a),
        Command::AnalyzeAlpha(a) => commands::analyze_alpha(&cli.global, a),
        Command::TrainToy(a) => commands::train_toy(&cli.global, a),
        Command::Decouple(a) => commands::decouple(&cli.global, a),
        Command::Ground(a) => commands::ground(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Pipeline(a) => commands::pipeline(&cli.global, a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// Error chain joined with ": ", skipping causes already spelled out by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if text.contains(&msg) {
            continue;
        }
        if !text.is_empty() {
            text.push_str(": ");
        }
        text.push_str(&msg);
    }
    text
}
