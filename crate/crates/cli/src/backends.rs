//! Backend assembly from CLI flags and the environment.

use crate::args::BackendArgs;
use anyhow::{bail, Context, Result};
use openground_core::backends::embedding::{ExactMatchProvider, HashEmbeddingProvider};
use openground_core::backends::oracle::{OracleSeg, OracleVlm};
use openground_core::backends::scripted::{RecordingSeg, RecordingVlm, ScriptedSeg, ScriptedVlm};
use openground_core::backends::wire::{WireConfig, WireEmbed, WireSeg, WireVlm};
use openground_core::backends::EmbeddingProvider;
use openground_core::config::EngineConfig;
use openground_core::pipeline::Backends;
use openground_core::synth::SceneGroundTruth;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Ground-truth files for the oracle backends: explicit --gt flags, or the
/// `gt.json` siblings found under the given roots.
pub fn gt_paths(args: &BackendArgs, roots: &[&Path]) -> Vec<PathBuf> {
    if !args.gt.is_empty() {
        return args.gt.clone();
    }
    let mut out = Vec::new();
    for root in roots {
        let direct = root.join(openground_core::synth::GT_FILE);
        if direct.exists() {
            out.push(direct);
            continue;
        }
        if let Ok(entries) = std::fs::read_dir(root) {
            let mut dirs: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            for dir in dirs {
                let candidate = dir.join(openground_core::synth::GT_FILE);
                if candidate.exists() {
                    out.push(candidate);
                }
            }
        }
    }
    out
}

fn load_gts(paths: &[PathBuf]) -> Result<Vec<Arc<SceneGroundTruth>>> {
    if paths.is_empty() {
        bail!(
            "oracle backends need ground truth; pass --gt or point at directories holding gt.json"
        );
    }
    paths
        .iter()
        .map(|p| {
            SceneGroundTruth::load(p)
                .map(Arc::new)
                .with_context(|| format!("loading ground truth {}", p.display()))
        })
        .collect()
}

fn embedding_provider(
    args: &BackendArgs,
    config: &EngineConfig,
) -> Result<Arc<dyn EmbeddingProvider>> {
    Ok(match args.embedding.trim().to_lowercase().as_str() {
        "exact" => Arc::new(ExactMatchProvider::new()),
        "hash" => Arc::new(HashEmbeddingProvider::new(64, config.seed)),
        "wire" => {
            let endpoint = args
                .embed_endpoint
                .clone()
                .or_else(|| std::env::var("OPENGROUND_EMBED_ENDPOINT").ok())
                .context("wire embedding needs --embed-endpoint or OPENGROUND_EMBED_ENDPOINT")?;
            Arc::new(WireEmbed::new(WireConfig::new(endpoint, "embedding"))?)
        }
        other => bail!("unknown embedding provider {other:?} (exact | hash | wire)"),
    })
}

/// Assembled backends plus any recorders attached by `record`.
pub struct BuiltBackends {
    pub backends: Backends,
    pub vlm_recorder: Option<Arc<RecordingVlm>>,
    pub seg_recorder: Option<Arc<RecordingSeg>>,
}

pub fn build(
    args: &BackendArgs,
    config: &EngineConfig,
    gt_roots: &[&Path],
    record: bool,
) -> Result<BuiltBackends> {
    let kind = args.backend.trim().to_lowercase();
    let backends = match kind.as_str() {
        "oracle" => {
            let gts = load_gts(&gt_paths(args, gt_roots))?;
            Backends {
                vlm: Arc::new(OracleVlm::new(gts.clone())),
                seg: Arc::new(OracleSeg::new(gts, config.visibility())),
                embed: embedding_provider(args, config)?,
            }
        }
        "mock" => {
            let fixtures = args
                .fixtures
                .as_ref()
                .context("mock backend needs --fixtures")?;
            let vlm = ScriptedVlm::load(fixtures)?;
            let seg: Arc<dyn openground_core::backends::SegBackend> = match &args.seg_fixtures {
                Some(path) => Arc::new(ScriptedSeg::load(path)?),
                // Segmentation is deterministic ground-truth rasterization,
                // so replays may keep using the oracle when gt is available.
                None => {
                    let gts = load_gts(&gt_paths(args, gt_roots)).context(
                        "mock backend needs --seg-fixtures or reachable gt.json for the segmenter",
                    )?;
                    Arc::new(OracleSeg::new(gts, config.visibility()))
                }
            };
            Backends {
                vlm: Arc::new(vlm),
                seg,
                embed: embedding_provider(args, config)?,
            }
        }
        "wire" => {
            let wire = WireConfig::from_env()?;
            let seg_endpoint = args
                .seg_endpoint
                .clone()
                .or_else(|| std::env::var("OPENGROUND_SEG_ENDPOINT").ok())
                .context("wire backend needs --seg-endpoint or OPENGROUND_SEG_ENDPOINT")?;
            let mut seg_cfg = WireConfig::new(seg_endpoint, wire.model.clone());
            seg_cfg.api_key = wire.api_key.clone();
            Backends {
                vlm: Arc::new(WireVlm::new(wire)?),
                seg: Arc::new(WireSeg::new(seg_cfg)?),
                embed: embedding_provider(args, config)?,
            }
        }
        other => bail!("unknown backend {other:?} (wire | mock | oracle)"),
    };

    if record {
        let vlm_recorder = Arc::new(RecordingVlm::new(backends.vlm.clone()));
        let seg_recorder = Arc::new(RecordingSeg::new(backends.seg.clone()));
        Ok(BuiltBackends {
            backends: Backends {
                vlm: vlm_recorder.clone(),
                seg: seg_recorder.clone(),
                embed: backends.embed,
            },
            vlm_recorder: Some(vlm_recorder),
            seg_recorder: Some(seg_recorder),
        })
    } else {
        Ok(BuiltBackends {
            backends,
            vlm_recorder: None,
            seg_recorder: None,
        })
    }
}
