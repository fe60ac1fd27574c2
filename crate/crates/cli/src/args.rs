use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "sta", version, about = "Short-term object-interaction anticipation toolkit")]
pub struct Cli {
    /// JSON file with default settings; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Activity-zone database.
    #[command(subcommand)]
    Zones(ZonesCmd),
    /// Affordance priors and fusion.
    #[command(subcommand)]
    Afford(AffordCmd),
    /// Interaction-hotspot re-weighting.
    #[command(subcommand)]
    Hotspot(HotspotCmd),
    /// Evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Ground-truth curation.
    #[command(subcommand)]
    Curate(CurateCmd),
    /// Attention blocks.
    #[command(subcommand)]
    Attn(AttnCmd),
    /// Synthetic end-to-end run.
    #[command(subcommand)]
    Demo(DemoCmd),
}

#[derive(Debug, Subcommand)]
pub enum ZonesCmd {
    /// Group clips into zones and write the database document.
    Build(ZonesBuild),
}

#[derive(Debug, Args)]
pub struct ZonesBuild {
    /// Clip records, one JSON object per line.
    #[arg(long)]
    pub clips: PathBuf,
    /// Join threshold on mean similarity, in [0, 1].
    #[arg(long)]
    pub theta: Option<f64>,
    /// Number of recent zone members compared against.
    #[arg(long)]
    pub m: Option<usize>,
    /// Pairwise similarities `{"a","b","similarity"}` per line; defaults to visual cosine.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// JSON array of noun names.
    #[arg(long)]
    pub noun_vocab: Option<PathBuf>,
    /// JSON array of verb names.
    #[arg(long)]
    pub verb_vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AffordCmd {
    /// KNN affordance distributions for a query descriptor.
    Query(AffordQuery),
    /// Product fusion of two distributions.
    Fuse(AffordFuse),
    /// Fuse every detection's class probabilities with query priors.
    Apply(AffordApply),
}

#[derive(Debug, Args)]
pub struct AffordQuery {
    #[arg(long)]
    pub zones: PathBuf,
    /// JSON array holding the visual query descriptor.
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, action = ArgAction::Set)]
    pub weighted: Option<bool>,
    /// Map cosines to (1 + cos) / 2.
    #[arg(long, action = ArgAction::Set)]
    pub rescale: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AffordFuse {
    /// Affordance distribution `{"probs": [...]}`.
    #[arg(long)]
    pub aff: PathBuf,
    /// Classifier distribution `{"probs": [...]}`.
    #[arg(long)]
    pub sta: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AffordApply {
    /// Output of `afford query`.
    #[arg(long)]
    pub aff: PathBuf,
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum HotspotCmd {
    /// Multiply detection scores by the hotspot value at each box center.
    Reweight(HotspotReweight),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Nearest,
    Bilinear,
}

#[derive(Debug, Args)]
pub struct HotspotReweight {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    /// Frame size as HEIGHTxWIDTH; maps of another size are resampled.
    #[arg(long)]
    pub frame_size: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Top-k mAP under the four criteria.
    Sta(EvalSta),
    /// Deltas and relative gains between two reports.
    Diff(EvalDiff),
}

#[derive(Debug, Args)]
pub struct EvalSta {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long = "ttc-tol")]
    pub ttc_tol: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalDiff {
    /// Report under test.
    #[arg(long)]
    pub x: PathBuf,
    /// Baseline report.
    #[arg(long)]
    pub y: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CurateCmd {
    /// Active-object boxes and action segments to anticipation records.
    Ek(CurateEk),
}

#[derive(Debug, Args)]
pub struct CurateEk {
    /// CSV with header video_id,frame,noun,x1,y1,x2,y2.
    #[arg(long)]
    pub boxes: PathBuf,
    /// CSV with header video_id,start,stop,verb,noun.
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub gap: Option<u64>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AttnCmd {
    /// Compare analytic gradients with central differences.
    CheckGrad(CheckGrad),
}

#[derive(Debug, Args)]
pub struct CheckGrad {
    /// mha, frame_guided_pooling or dual_attention.
    #[arg(long)]
    pub op: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Named tensors to check instead of a random case.
    #[arg(long)]
    pub tensors: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum DemoCmd {
    /// Generate a scenario, refine detections and score them.
    Synth(DemoSynth),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    FuseFirst,
    HotspotFirst,
}

#[derive(Debug, Args)]
pub struct DemoSynth {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving the generated inputs and the report.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, action = ArgAction::Set)]
    pub weighted: Option<bool>,
}
