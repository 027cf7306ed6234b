//! Command-line arguments. Every argument struct is also the serialised
//! form stored in `run.json`, so a run can be replayed from that file.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use extremal::engine::{EngineConfig, Objective, Schedule};
use extremal::mask::DEFAULT_INV_TEMPERATURE;
use extremal::models::Rect;
use extremal::perturbation::{PerturbationKind, DEFAULT_LEVELS};

#[derive(Parser, Debug)]
#[command(
    name = "extremal",
    version,
    about = "Extremal perturbation attribution for differentiable scorers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Sweep mask areas for one model and image and report the extremal area.
    Attribute(AttributeArgs),
    /// Find the smallest set of intermediate channels that keeps the score.
    Channels(ChannelArgs),
    /// Visualise selected channels by optimising an input image.
    Invert(InvertArgs),
    /// Play the pointing game over an annotated dataset.
    Pointing(PointingArgs),
    /// Run the gradient, max-convolution and smooth-max invariant suites.
    Selftest(SelftestArgs),
    /// Write planted models, images and datasets with known answers.
    Synth(SynthArgs),
    /// Repeat a previous run from its run.json.
    Rerun(RerunArgs),
}

impl Command {
    /// Output directory, if the command has one.
    pub fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Attribute(a) => Some(&a.out),
            Command::Channels(a) => Some(&a.out),
            Command::Invert(a) => Some(&a.out),
            Command::Pointing(a) => Some(&a.out),
            Command::Selftest(a) => a.out.as_ref(),
            Command::Synth(a) => Some(a.kind.out()),
            Command::Rerun(a) => Some(&a.out),
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Attribute(a) => a.out = out,
            Command::Channels(a) => a.out = out,
            Command::Invert(a) => a.out = out,
            Command::Pointing(a) => a.out = out,
            Command::Selftest(a) => a.out = Some(out),
            Command::Synth(a) => *a.kind.out_mut() = out,
            Command::Rerun(a) => a.out = out,
        }
    }
}

/// Comma-separated list, e.g. `0.05,0.1,0.2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Err("the list is empty".into());
        }
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<T>, String>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

fn parse_perturbation(s: &str) -> Result<PerturbationKind, String> {
    match s {
        "blur" | "gaussian-blur" => Ok(PerturbationKind::GaussianBlur),
        "fade" | "fade-to-black" => Ok(PerturbationKind::FadeToBlack),
        other => Err(format!("unknown perturbation {other:?} (expected blur or fade)")),
    }
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    match List::<usize>::from_str(s)?.0.as_slice() {
        &[y0, x0, height, width] => Ok(Rect::new(y0, x0, height, width)),
        _ => Err(format!("expected y0,x0,height,width, got {s:?}")),
    }
}

/// Optimisation and mask settings shared by the spatial commands.
#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineArgs {
    /// preservation, deletion or hybrid.
    #[arg(long, default_value = "preservation")]
    pub objective: Objective,
    #[arg(long, default_value_t = 1600)]
    pub iterations: usize,
    #[arg(long = "lr", default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Initial area-loss multiplier, doubled at 1/3 and 2/3 of the run.
    #[arg(long, default_value_t = 300.0)]
    pub lambda0: f64,
    /// Inverse smooth-max temperature.
    #[arg(long = "inv-temp", default_value_t = DEFAULT_INV_TEMPERATURE)]
    pub inv_temperature: f64,
    /// Flat kernel radius in pixels [default: the sample step].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Sample spacing in pixels [default: max(2, min(H, W) / 32)].
    #[arg(long)]
    pub step: Option<usize>,
    /// Crop margin in pixels [default: ceil(sigma)].
    #[arg(long)]
    pub margin: Option<usize>,
    /// blur or fade.
    #[arg(long, default_value = "blur", value_parser = parse_perturbation)]
    pub perturbation: PerturbationKind,
    /// Strongest perturbation [default: max(2, 0.09 min(H, W)) for blur, 1 for fade].
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// Pyramid levels.
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    pub levels: usize,
    /// Preservation threshold as a fraction of the full score.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Fraction by which deletion must lower the score.
    #[arg(long, default_value_t = 0.5)]
    pub deletion_tau: f64,
}

impl EngineArgs {
    pub fn config(&self) -> EngineConfig {
        EngineConfig {
            objective: self.objective,
            schedule: Schedule {
                iterations: self.iterations,
                momentum: self.momentum,
                learning_rate: self.learning_rate,
                lambda0: self.lambda0,
                inv_temperature: self.inv_temperature,
            },
            sigma: self.sigma,
            step: self.step,
            margin: self.margin,
            perturbation: self.perturbation,
            sigma_max: self.sigma_max,
            levels: self.levels,
            tau: self.tau,
            deletion_tau: self.deletion_tau,
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeArgs {
    /// Model file (JSON with FT1 weights).
    #[arg(long)]
    pub model: PathBuf,
    /// Image file (PNG or FT1).
    #[arg(long)]
    pub image: PathBuf,
    /// Area fractions to sweep.
    #[arg(long, default_value = "0.05,0.1,0.2,0.4,0.6,0.8")]
    pub areas: List<f64>,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Channel counts to try, strictly ascending [default: 1, 2, 4, ... up to K].
    #[arg(long)]
    pub counts: Option<List<usize>>,
    /// Split layer index, overriding the one in the model file.
    #[arg(long)]
    pub split: Option<usize>,
    #[arg(long, default_value_t = 300)]
    pub iterations: usize,
    #[arg(long = "lr", default_value_t = 1e-2)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Final area-loss multiplier, reached halfway through.
    #[arg(long, default_value_t = 1500.0)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image whose activations are inverted.
    #[arg(long)]
    pub image: PathBuf,
    /// Channels to keep; when absent they are chosen by a channel
    /// optimisation keeping `--count` channels.
    #[arg(long)]
    pub channels: Option<List<usize>>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub split: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long = "lr", default_value_t = 0.1)]
    pub learning_rate: f64,
    /// L2 radius of the image [default: half the square root of its size].
    #[arg(long)]
    pub norm: Option<f64>,
    /// Seed of the random starting image.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointingArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "0.025,0.05,0.1,0.2")]
    pub areas: List<f64>,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random inputs per gradient case.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Where to write run.json and the report; nothing is written when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthArgs {
    #[command(subcommand)]
    pub kind: SynthKind,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthKind {
    /// A model scoring the mean of a box, and an image with that box lit.
    Region {
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Box as y0,x0,height,width.
        #[arg(long = "box", default_value = "20,18,17,24", value_parser = parse_rect)]
        rect: Rect,
        #[arg(long, default_value_t = extremal::synth::REGION_WEIGHT)]
        weight: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// A split model whose score sums a planted channel subset.
    Channels {
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Channels at the split.
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value = "2,7,11")]
        channels: List<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// A seeded convolution, ReLU, pooling and linear stack.
    Conv {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        pool: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// A pointing dataset of planted boxes with a manifest.
    Pointing {
        #[arg(long, default_value_t = 20)]
        items: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

impl SynthKind {
    pub fn out(&self) -> &PathBuf {
        match self {
            SynthKind::Region { out, .. }
            | SynthKind::Channels { out, .. }
            | SynthKind::Conv { out, .. }
            | SynthKind::Pointing { out, .. } => out,
        }
    }

    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            SynthKind::Region { out, .. }
            | SynthKind::Channels { out, .. }
            | SynthKind::Conv { out, .. }
            | SynthKind::Pointing { out, .. } => out,
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerunArgs {
    /// run.json written by an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the repeated run.
    #[arg(long)]
    pub out: PathBuf,
}
