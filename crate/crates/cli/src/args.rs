//! Argument surface. Engine knobs merge in three layers: built-in defaults,
//! then the `--config` TOML, then explicit flags.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use openground_core::config::{EngineConfig, TimingMode};
use openground_core::scene::VisibilityMode;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "openground",
    version,
    about = "Open-world 3D visual grounding: plan a reference chain, perceive missing objects, resolve the target"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Ground a single query in a scene and print the target box.
    Ground(GroundArgs),
    /// Run a query batch, score it, and write reports.
    Eval(EvalArgs),
    /// Compute weighted-average-edit-distance alignment reports.
    Waed(WaedArgs),
    /// Generate a synthetic scene with ground truth and fixtures.
    Synth(SynthArgs),
    /// Render an annotated view to a PNG.
    Render(RenderArgs),
    /// Run while capturing backend exchanges into fixture files.
    Record(RecordArgs),
    /// Re-run from captured fixtures without any backend.
    Replay(ReplayArgs),
}

#[derive(Args, Clone)]
pub struct EngineArgs {
    /// TOML config file; explicit flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task-chain strategy: full | relevant | difficulty | random | jump.
    #[arg(long)]
    pub strategy: Option<String>,
    /// View budget V.
    #[arg(long)]
    pub max_views: Option<usize>,
    /// Soft margin for per-candidate view selection.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Candidate-retrieval cosine threshold.
    #[arg(long)]
    pub tau_cand: Option<f64>,
    /// 3D mask merge threshold.
    #[arg(long)]
    pub tau_iou: Option<f64>,
    /// Annotation mode: ours | all_mentioned | candidates_only.
    #[arg(long)]
    pub annotation_mode: Option<String>,
    /// Visibility mode: occlusion | frustum_only.
    #[arg(long)]
    pub visibility: Option<String>,
    /// Seed for every stochastic choice.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record real wall times instead of deterministic zeros.
    #[arg(long)]
    pub real_timing: bool,
    /// Save every annotated view as a PNG next to the trace.
    #[arg(long)]
    pub trace_images: bool,
}

impl EngineArgs {
    pub fn resolve(&self) -> Result<EngineConfig> {
        let mut config = match &self.config {
            Some(path) => EngineConfig::load(path)?,
            None => EngineConfig::default(),
        };
        if let Some(s) = &self.strategy {
            config.strategy = s.parse().map_err(anyhow::Error::msg)?;
        }
        if let Some(v) = self.max_views {
            config.max_views = v;
        }
        if let Some(a) = self.alpha {
            config.alpha = a;
        }
        if let Some(t) = self.tau_cand {
            config.tau_cand = t;
        }
        if let Some(t) = self.tau_iou {
            config.tau_iou = t;
        }
        if let Some(m) = &self.annotation_mode {
            config.annotation_mode = m.parse().map_err(anyhow::Error::msg)?;
        }
        if let Some(v) = &self.visibility {
            config.visibility_mode = match v.trim().to_lowercase().replace('-', "_").as_str() {
                "occlusion" => VisibilityMode::Occlusion,
                "frustum_only" | "frustum" => VisibilityMode::FrustumOnly,
                other => bail!("unknown visibility mode {other:?} (occlusion | frustum_only)"),
            };
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if self.real_timing {
            config.timing = TimingMode::Real;
        }
        if self.trace_images {
            config.trace_images = true;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Clone)]
pub struct BackendArgs {
    /// Backend family: wire | mock | oracle.
    #[arg(long, default_value = "oracle")]
    pub backend: String,
    /// VLM fixture file (mock input; record output).
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Segmentation fixture file (mock input; record output).
    #[arg(long)]
    pub seg_fixtures: Option<PathBuf>,
    /// Ground-truth file(s) for the oracle backends. Defaults to the
    /// `gt.json` sibling of each scene directory.
    #[arg(long)]
    pub gt: Vec<PathBuf>,
    /// Embedding provider: exact | hash | wire.
    #[arg(long, default_value = "exact")]
    pub embedding: String,
    /// Segmentation service endpoint for the wire backend.
    #[arg(long)]
    pub seg_endpoint: Option<String>,
    /// Embedding service endpoint for the wire embedding provider.
    #[arg(long)]
    pub embed_endpoint: Option<String>,
}

#[derive(Args)]
pub struct GroundArgs {
    /// Suppress per-step console lines (outputs and traces are unaffected).
    #[arg(short, long)]
    pub quiet: bool,
    /// Scene directory (holding scene.json).
    #[arg(long)]
    pub scene: PathBuf,
    /// Initial lookup-table file; defaults to the scene's sibling olt.json
    /// when present, else an empty table.
    #[arg(long)]
    pub olt: Option<PathBuf>,
    /// The natural-language query to ground.
    #[arg(long)]
    pub query: String,
    /// Where to write the trace JSON.
    #[arg(long, default_value = "trace.json")]
    pub trace: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Suppress the report body on the console (files are unaffected).
    #[arg(short, long)]
    pub quiet: bool,
    /// Root directory holding one subdirectory per scene id.
    #[arg(long)]
    pub scenes: PathBuf,
    /// JSONL query file.
    #[arg(long)]
    pub queries: PathBuf,
    /// Output directory for results, traces, and reports.
    #[arg(long, visible_alias = "out")]
    pub out_dir: PathBuf,
    /// Trace directory; defaults to <out-dir>/traces.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Concurrent queries.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Grid axis: comma-separated strategies to sweep.
    #[arg(long)]
    pub grid_strategies: Option<String>,
    /// Grid axis: comma-separated annotation modes to sweep.
    #[arg(long)]
    pub grid_annotation_modes: Option<String>,
    /// Grid axis: comma-separated view budgets to sweep.
    #[arg(long)]
    pub grid_max_views: Option<String>,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Args)]
pub struct WaedArgs {
    /// Predictions file: {"predictions": [{strategy, task_id, sequence}]}.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Human chains file: {"tasks": [{task_id, chains: [{sequence, weight}]}]}.
    #[arg(long)]
    pub human_chains: PathBuf,
    /// Report output path (JSON).
    #[arg(long, default_value = "waed_report.json")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Scene spec (JSON). Omit to use the built-in cabinet family.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Scene id for the built-in family.
    #[arg(long, default_value = "cabinet")]
    pub scene_id: String,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scenes to generate (seeds increment from --seed).
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Output root; each scene lands in <out>/<scene_id>/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RenderArgs {
    /// Scene directory.
    #[arg(long)]
    pub scene: PathBuf,
    /// Lookup-table file.
    #[arg(long)]
    pub olt: PathBuf,
    /// View to render.
    #[arg(long)]
    pub view: u32,
    /// Entry ids annotated as candidates (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<u32>,
    /// Entry ids annotated as grounded references (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub grounded_ids: Vec<u32>,
    /// Annotation mode: ours | all_mentioned | candidates_only.
    #[arg(long, default_value = "ours")]
    pub mode: String,
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Args)]
pub struct RecordArgs {
    /// Scene directory (single-query mode).
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Initial lookup-table file for single-query mode.
    #[arg(long)]
    pub olt: Option<PathBuf>,
    /// Single query text.
    #[arg(long)]
    pub query: Option<String>,
    /// Scenes root (batch mode).
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// JSONL query file (batch mode).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Concurrent queries in batch mode.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Args)]
pub struct ReplayArgs {
    /// Scene directory (single-query mode).
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Initial lookup-table file for single-query mode.
    #[arg(long)]
    pub olt: Option<PathBuf>,
    /// Single query text.
    #[arg(long)]
    pub query: Option<String>,
    /// Scenes root (batch mode).
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// JSONL query file (batch mode).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Where to write batch results.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trace directory for batch replays.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Concurrent queries in batch mode.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

pub fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| anyhow::anyhow!("{what} {s:?}: {e}"))
        })
        .collect::<Result<Vec<_>>>()
        .with_context(|| format!("parsing {what} list {raw:?}"))
}
