use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ordseg_core::dt::{DistanceMetric, DEFAULT_THRESHOLD};
use ordseg_core::losses::{LossConfig, Term, DEFAULT_GAMMA, DEFAULT_MARGIN};
use ordseg_core::trainer::{TrainOptions, TrainTarget, DEFAULT_LAMBDAS};

#[derive(Parser, Debug)]
#[command(name = "ordseg", version, about = "Ordinal segmentation metrics, losses and toy training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Score predicted masks or probability maps against target masks
    Evaluate(EvaluateArgs),
    /// Combined loss value, per-term breakdown and logit gradient
    Loss(LossArgs),
    /// Distance transform of one thresholded class
    Dt(DtArgs),
    /// Cumulative ordinal encoding and decoding
    Ordenc {
        #[command(subcommand)]
        op: OrdencOp,
    },
    /// Write a synthetic nested-region scene
    GenSynthetic(SceneOut),
    /// Gradient descent on the logits of a synthetic scene
    TrainToy(TrainArgs),
    /// λ sweep of one regulariser on a synthetic scene
    Gridsearch(GridArgs),
    /// Re-run the command recorded in a manifest
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Evaluate(_) => "evaluate",
            Command::Loss(_) => "loss",
            Command::Dt(_) => "dt",
            Command::Ordenc { op: OrdencOp::Encode(_) } => "ordenc encode",
            Command::Ordenc { op: OrdencOp::Decode(_) } => "ordenc decode",
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::TrainToy(_) => "train-toy",
            Command::Gridsearch(_) => "gridsearch",
            Command::Replay(_) => "replay",
        }
    }

    /// Makes every path absolute so a manifest can be replayed from any
    /// working directory.
    pub fn absolutize(&mut self) -> std::io::Result<()> {
        let abs = |p: &mut PathBuf| -> std::io::Result<()> {
            *p = std::path::absolute(&*p)?;
            Ok(())
        };
        let abs_opt = |p: &mut Option<PathBuf>| -> std::io::Result<()> {
            if let Some(p) = p {
                *p = std::path::absolute(&*p)?;
            }
            Ok(())
        };
        match self {
            Command::Evaluate(a) => {
                abs(&mut a.pred_dir)?;
                abs(&mut a.target_dir)?;
                abs(&mut a.out)?;
                abs_opt(&mut a.summary)?;
                abs_opt(&mut a.order.order)?;
            }
            Command::Loss(a) => {
                abs(&mut a.logits)?;
                abs(&mut a.target)?;
                abs_opt(&mut a.out)?;
                abs_opt(&mut a.grad_out)?;
                abs_opt(&mut a.order.order)?;
            }
            Command::Dt(a) => {
                abs(&mut a.input)?;
                abs(&mut a.out)?;
            }
            Command::Ordenc { op: OrdencOp::Encode(a) } => {
                abs(&mut a.mask)?;
                abs(&mut a.out)?;
            }
            Command::Ordenc { op: OrdencOp::Decode(a) } => {
                abs(&mut a.input)?;
                abs(&mut a.out)?;
            }
            Command::GenSynthetic(a) => {
                abs(&mut a.out_dir)?;
                abs_opt(&mut a.scene.order.order)?;
            }
            Command::TrainToy(a) => {
                abs(&mut a.out_dir)?;
                abs_opt(&mut a.scene.order.order)?;
            }
            Command::Gridsearch(a) => {
                abs(&mut a.out)?;
                abs_opt(&mut a.scene.order.order)?;
            }
            Command::Replay(a) => {
                abs(&mut a.manifest)?;
                abs_opt(&mut a.out_dir)?;
            }
        }
        Ok(())
    }

    /// Moves every output into `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) {
        let move_to = |p: &mut PathBuf| {
            if let Some(name) = p.file_name() {
                *p = dir.join(name);
            }
        };
        match self {
            Command::Evaluate(a) => {
                move_to(&mut a.out);
                if let Some(s) = &mut a.summary {
                    move_to(s);
                }
            }
            Command::Loss(a) => {
                if let Some(p) = &mut a.out {
                    move_to(p);
                }
                if let Some(p) = &mut a.grad_out {
                    move_to(p);
                }
            }
            Command::Dt(a) => move_to(&mut a.out),
            Command::Ordenc { op: OrdencOp::Encode(a) } => move_to(&mut a.out),
            Command::Ordenc { op: OrdencOp::Decode(a) } => move_to(&mut a.out),
            Command::GenSynthetic(a) => a.out_dir = dir.to_path_buf(),
            Command::TrainToy(a) => a.out_dir = dir.to_path_buf(),
            Command::Gridsearch(a) => move_to(&mut a.out),
            Command::Replay(_) => {}
        }
    }
}

/// Exactly one of an order file or a chain size.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[group(required = true, multiple = false)]
pub struct OrderArgs {
    /// Order file (`classes K`, optional `name i s`, `edge m n` lines)
    #[arg(long)]
    pub order: Option<PathBuf>,
    /// Number of classes of a chain order
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HyperArgs {
    /// Margin of the unimodality term
    #[arg(long, default_value_t = DEFAULT_MARGIN, allow_negative_numbers = true)]
    pub delta_margin: f64,
    /// Activation threshold of the distance-transform term
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub delta_dt: f64,
    /// Distance saturation of the distance-transform term
    #[arg(long, default_value_t = DEFAULT_GAMMA, allow_negative_numbers = true)]
    pub gamma: f64,
    #[arg(long, default_value_t = DistanceMetric::Euclidean)]
    pub dt_metric: DistanceMetric,
}

#[derive(Args, Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lambda_o2: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lambda_csnp: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lambda_csdt: f64,
}

pub fn loss_config(weights: &WeightArgs, hyper: &HyperArgs) -> LossConfig {
    LossConfig {
        lambda_o2: weights.lambda_o2,
        lambda_csnp: weights.lambda_csnp,
        lambda_csdt: weights.lambda_csdt,
        delta_margin: hyper.delta_margin,
        delta_dt: hyper.delta_dt,
        gamma: hyper.gamma,
        dt_metric: hyper.dt_metric,
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Directory of predictions: `.pgm` masks or `.opm` maps
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Directory holding `<stem>.pgm` for every prediction
    #[arg(long)]
    pub target_dir: PathBuf,
    #[command(flatten)]
    pub order: OrderArgs,
    /// Per-image CSV
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary; defaults to the CSV path with a `.json` extension
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct LossArgs {
    /// OPM1 logits
    #[arg(long)]
    pub logits: PathBuf,
    /// PGM target mask
    #[arg(long)]
    pub target: PathBuf,
    #[command(flatten)]
    pub order: OrderArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Also write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the logit gradient as OPM1
    #[arg(long)]
    pub grad_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DtArgs {
    /// OPM1 probability map or PGM mask
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub class: usize,
    /// Activation threshold for probability maps
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DistanceMetric::Euclidean)]
    pub metric: DistanceMetric,
    /// Saturate distances at this value
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    /// Single-channel OPM1 output
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrdencOp {
    /// Mask to cumulative channels
    Encode(EncodeArgs),
    /// Cumulative channels to mask
    Decode(DecodeArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DecodeArgs {
    /// OPM1 with K-1 channels
    #[arg(long)]
    pub input: PathBuf,
    /// Treat the input as conditional outputs and chain them first
    #[arg(long)]
    pub correct: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SceneArgs {
    #[command(flatten)]
    pub order: OrderArgs,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Fraction of pixels whose label is resampled
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SceneOut {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DescentArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Per-pixel step size
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Mask the logits are fitted to
    #[arg(long, default_value_t = TrainTarget::Clean, value_parser = parse_target)]
    pub target: TrainTarget,
}

fn parse_target(s: &str) -> Result<TrainTarget, String> {
    s.parse().map_err(|e: ordseg_core::Error| e.to_string())
}

impl DescentArgs {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            learning_rate: self.lr,
            target: self.target,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Regulariser added to cross-entropy
    #[arg(long, default_value_t = Term::Ce)]
    pub term: Term,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lambda: f64,
    #[command(flatten)]
    pub descent: DescentArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Receives trace.csv and final_mask.pgm
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GridArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub term: Term,
    /// Comma-separated λ values; the λ = 0 baseline is always added
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS.to_vec())]
    pub lambdas: Vec<f64>,
    #[command(flatten)]
    pub descent: DescentArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Sweep CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded locations
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
