use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "stnas", version, about = "Spatio-temporal cell search at desk scale")]
pub struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Record that the run must be bit-reproducible. Every command already
    /// runs single-threaded with seeded streams.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Command {
    /// Search-space cardinalities.
    Count(CountArgs),
    /// Writes train.pvn and val.pvn of the synthetic moving-shape set.
    GenData(GenDataArgs),
    /// One-level architecture search on a supernet.
    Search(SearchArgs),
    /// Genotype from an alpha file.
    Derive(DeriveArgs),
    /// Uniformly random genotype.
    Random(RandomArgs),
    /// Trains a discrete network from scratch and reports validation accuracy.
    Retrain(RetrainArgs),
    /// Parameters and multiply-accumulates of a stacked network.
    Cost(CostArgs),
    /// One Graphviz file per cell category.
    ExportDot(ExportDotArgs),
    /// Finite-difference gradient checks of the candidate ops.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CountArgs {
    #[arg(long, default_value_t = 4)]
    pub nodes: usize,
    /// Print the network total as an exact integer.
    #[arg(long)]
    pub exact: bool,
    /// Also print the total recomputed from the rounded per-cell counts.
    #[arg(long)]
    pub paper_rounded: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 800)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_val: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 16)]
    pub length: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 40)]
    pub size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

/// Clip sampling and augmentation shared by search and retrain.
#[derive(Debug, Args, Serialize, Clone)]
pub struct PipelineArgs {
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Shorter-side scale range, `A,B`.
    #[arg(long, default_value = "36,48", value_parser = parse_pair)]
    pub jitter: (usize, usize),
    #[arg(long, default_value_t = 32)]
    pub crop: usize,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct NetArgs {
    /// Initial width C0.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Stride of temporal reduction cells, `T,H,W`.
    #[arg(long, default_value = "2,2,2", value_parser = parse_stride)]
    pub trc_stride: [usize; 3],
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSchedule {
    Step,
    Constant,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    /// Directory holding train.pvn.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// Epochs between weight learning-rate decays.
    #[arg(long, default_value_t = 10)]
    pub step: usize,
    #[arg(long, default_value_t = 10.0)]
    pub decay: f64,
    #[arg(long, value_enum, default_value_t = WeightSchedule::Step)]
    pub w_sched: WeightSchedule,
    /// Epochs at which a genotype is derived, `e1,e2,…`.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 30, 40])]
    pub snapshot: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr_w: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr_a: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// 80 epochs, decay 10× every 20, snapshots 20,40,60,80.
    #[arg(long)]
    pub paper_scale: bool,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DeriveArgs {
    #[arg(long)]
    pub alpha: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RandomArgs {
    /// Minimum convolutional edges per cell.
    #[arg(long, default_value_t = 4)]
    pub min_convs: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrainArgs {
    #[arg(long)]
    pub arch: PathBuf,
    /// Directory holding train.pvn and val.pvn.
    #[arg(long)]
    pub data: PathBuf,
    /// Normal cells per stage.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.4)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    pub drop_path: f64,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CostArgs {
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Clip extent `TxHxW`.
    #[arg(long, default_value = "8x32x32", value_parser = parse_extent)]
    pub input: [usize; 3],
    #[arg(long, default_value_t = 1)]
    pub in_channels: usize,
    /// Views per video in the printed cost line.
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportDotArgs {
    #[arg(long)]
    pub arch: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// `all` or one op name.
    #[arg(long, default_value = "all")]
    pub op: String,
}

fn parse_list(s: &str, sep: char, n: usize) -> Result<Vec<usize>, String> {
    let parts: Vec<&str> = s.split(sep).collect();
    if parts.len() != n {
        return Err(format!("expected {n} values separated by '{sep}', got {s:?}"));
    }
    parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let v = parse_list(s, ',', 2)?;
    Ok((v[0], v[1]))
}

fn parse_stride(s: &str) -> Result<[usize; 3], String> {
    let v = parse_list(s, ',', 3)?;
    Ok([v[0], v[1], v[2]])
}

fn parse_extent(s: &str) -> Result<[usize; 3], String> {
    let v = parse_list(s, 'x', 3)?;
    Ok([v[0], v[1], v[2]])
}
