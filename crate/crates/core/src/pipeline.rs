//! The full grounding loop: parse the query, build the task chain, walk it
//! step by step — invoking cognition enhancement whenever a step's label has
//! no candidates — and return the final target box plus a complete trace.
//!
//! Each query runs against its own copy of the initial lookup table, so
//! batched queries never contaminate each other.

use crate::ace;
use crate::backends::{ContextObject, EmbeddingProvider, ImagePayload, SegBackend, VlmBackend};
use crate::chain::{self, ChainError, ChainStrategy, ParsedObjects};
use crate::config::{EngineConfig, TimingMode};
use crate::grounding::{self, AnnotationTarget, ConditionReport, GroundingError, ViewImagePair};
use crate::olt::{OltError, OltTable};
use crate::scene::{Aabb3, PointSet, Scene, SceneError, ViewVisibility};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("target step {label:?} has no candidates even after cognition enhancement")]
    TargetUnresolved { label: String },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Ace(#[from] ace::AceError),
    #[error(transparent)]
    Olt(#[from] OltError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Backend(#[from] crate::backends::BackendError),
    #[error("{path}: {message}")]
    QueryFile { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Machine-readable failure category for result records and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::TargetUnresolved { .. } => "grounding",
            PipelineError::Chain(_) | PipelineError::Grounding(_) => "backend",
            PipelineError::Ace(_) => "backend",
            PipelineError::Olt(_) => "olt",
            PipelineError::Scene(_) => "scene",
            PipelineError::Backend(_) => "backend",
            PipelineError::QueryFile { .. } | PipelineError::Io { .. } => "io",
        }
    }
}

/// Shareable backend handles for one run.
#[derive(Clone)]
pub struct Backends {
    pub vlm: Arc<dyn VlmBackend>,
    pub seg: Arc<dyn SegBackend>,
    pub embed: Arc<dyn EmbeddingProvider>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub label: String,
    pub ace_invoked: bool,
    pub ace_views: Vec<u32>,
    pub new_olt_ids: Vec<u32>,
    pub candidates: Vec<u32>,
    pub selected_views: Vec<u32>,
    pub conditions: Vec<String>,
    pub condition_report: ConditionReport,
    pub chosen_id: Option<u32>,
    pub skipped: bool,
    pub low_confidence: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceTarget {
    pub target_id: u32,
    pub target_box: Aabb3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingTrace {
    pub query: String,
    pub scene_id: String,
    pub strategy: ChainStrategy,
    pub parsed: Option<ParsedObjects>,
    pub chain: Vec<String>,
    pub steps: Vec<StepTrace>,
    pub degraded: bool,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_target: Option<TraceTarget>,
    pub wall_ms: f64,
}

/// An annotated view captured for the trace, PNG-encoded.
pub struct TraceArtifact {
    pub file_name: String,
    pub png: Vec<u8>,
}

/// Outcome of one query: the box (or the failure), the full trace, and any
/// annotated-view artifacts requested via `trace_images`.
pub struct GroundRun {
    pub outcome: Result<Aabb3, PipelineError>,
    pub trace: GroundingTrace,
    pub artifacts: Vec<TraceArtifact>,
}

struct Timer {
    start: Instant,
    mode: TimingMode,
}

impl Timer {
    fn start(mode: TimingMode) -> Self {
        Self {
            start: Instant::now(),
            mode,
        }
    }

    fn elapsed_ms(&self) -> f64 {
        match self.mode {
            TimingMode::Real => self.start.elapsed().as_secs_f64() * 1000.0,
            TimingMode::Fixed => 0.0,
        }
    }
}

fn retrieve(
    table: &OltTable,
    label: &str,
    backends: &Backends,
    config: &EngineConfig,
    after_ace: bool,
) -> Result<Vec<u32>, PipelineError> {
    if after_ace && config.exact_retrieval_after_ace {
        Ok(table.retrieve_exact(label))
    } else {
        Ok(table.retrieve_candidates(label, backends.embed.as_ref(), config.tau_cand)?)
    }
}

fn annotation_target(
    table: &OltTable,
    scene: &Scene,
    id: u32,
) -> Result<AnnotationTarget, PipelineError> {
    let entry = table.get(id)?;
    Ok(AnnotationTarget {
        id,
        label: entry.label.clone(),
        points: table.entry_points(id, scene)?,
        bbox: entry.bbox,
    })
}

/// Grounds one query end to end. Never panics on backend failures: the
/// error and the partial trace both come back in the [`GroundRun`].
pub fn ground(
    scene: &Scene,
    table: &OltTable,
    query: &str,
    config: &EngineConfig,
    backends: &Backends,
) -> GroundRun {
    match ViewVisibility::compute(scene, &config.visibility()) {
        Ok(vis) => ground_with_visibility(scene, &vis, table, query, config, backends),
        Err(e) => {
            let trace = GroundingTrace {
                query: query.to_string(),
                scene_id: scene.scene_id.clone(),
                strategy: config.strategy,
                parsed: None,
                chain: Vec::new(),
                steps: Vec::new(),
                degraded: false,
                status: "failed:scene".into(),
                final_target: None,
                wall_ms: 0.0,
            };
            GroundRun {
                outcome: Err(e.into()),
                trace,
                artifacts: Vec::new(),
            }
        }
    }
}

/// [`ground`] with a precomputed visibility index (shared across a batch).
pub fn ground_with_visibility(
    scene: &Scene,
    vis: &ViewVisibility,
    table: &OltTable,
    query: &str,
    config: &EngineConfig,
    backends: &Backends,
) -> GroundRun {
    let timer = Timer::start(config.timing);
    let mut trace = GroundingTrace {
        query: query.to_string(),
        scene_id: scene.scene_id.clone(),
        strategy: config.strategy,
        parsed: None,
        chain: Vec::new(),
        steps: Vec::new(),
        degraded: false,
        status: "ok".into(),
        final_target: None,
        wall_ms: 0.0,
    };
    let mut artifacts = Vec::new();
    let outcome = drive(
        scene,
        vis,
        table,
        query,
        config,
        backends,
        &mut trace,
        &mut artifacts,
    );
    trace.wall_ms = timer.elapsed_ms();
    trace.status = match &outcome {
        Ok(_) if trace.degraded => "degraded".into(),
        Ok(_) => "ok".into(),
        Err(e) => format!("failed:{}", e.category()),
    };
    GroundRun {
        outcome,
        trace,
        artifacts,
    }
}

fn artifact_name(step_index: usize, label: &str, view_id: u32) -> String {
    let slug: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    format!("step{:02}-{slug}-view{view_id:03}.png", step_index + 1)
}

#[allow(clippy::too_many_arguments)]
fn drive(
    scene: &Scene,
    vis: &ViewVisibility,
    initial: &OltTable,
    query: &str,
    config: &EngineConfig,
    backends: &Backends,
    trace: &mut GroundingTrace,
    artifacts: &mut Vec<TraceArtifact>,
) -> Result<Aabb3, PipelineError> {
    let parsed = chain::parse_objects(query, backends.vlm.as_ref())?;
    trace.parsed = Some(parsed.clone());

    let mut counts = BTreeMap::new();
    for label in parsed.all_labels() {
        let n = retrieve(initial, &label, backends, config, false)?.len();
        counts.insert(label, n);
    }
    let task_chain = chain::construct_chain(
        query,
        &parsed,
        &counts,
        config.strategy,
        backends.vlm.as_ref(),
        config.seed,
    )?;
    trace.chain = task_chain.steps.clone();

    // The lookup table is query-scoped: extensions never leak across queries.
    let mut table = initial.clone();
    let mut grounded: Vec<(String, u32)> = Vec::new();

    let total_steps = task_chain.steps.len();
    for (step_index, label) in task_chain.steps.iter().enumerate() {
        let step_timer = Timer::start(config.timing);
        let is_target = step_index + 1 == total_steps;
        let mut step = StepTrace {
            label: label.clone(),
            ace_invoked: false,
            ace_views: Vec::new(),
            new_olt_ids: Vec::new(),
            candidates: Vec::new(),
            selected_views: Vec::new(),
            conditions: Vec::new(),
            condition_report: ConditionReport::default(),
            chosen_id: None,
            skipped: false,
            low_confidence: false,
            wall_ms: 0.0,
        };

        let mut candidates = retrieve(&table, label, backends, config, false)?;
        if candidates.is_empty() {
            step.ace_invoked = true;
            let grounded_points: Vec<(u32, PointSet)> = grounded
                .iter()
                .map(|(_, id)| Ok((*id, table.entry_points(*id, scene)?)))
                .collect::<Result<_, PipelineError>>()?;
            let outcome = ace::enhance(
                scene,
                vis,
                &mut table,
                &grounded_points,
                label,
                backends.seg.as_ref(),
                &config.ace(),
            )?;
            step.ace_views = outcome.selected_views;
            step.new_olt_ids = outcome.new_ids;
            candidates = retrieve(&table, label, backends, config, true)?;
        }
        step.candidates = candidates.clone();

        if candidates.is_empty() {
            step.skipped = true;
            step.wall_ms = step_timer.elapsed_ms();
            trace.steps.push(step);
            if is_target {
                return Err(PipelineError::TargetUnresolved {
                    label: label.clone(),
                });
            }
            trace.degraded = true;
            continue;
        }

        let grounded_targets: Vec<AnnotationTarget> = grounded
            .iter()
            .map(|(_, id)| annotation_target(&table, scene, *id))
            .collect::<Result<_, _>>()?;
        let candidate_targets: Vec<AnnotationTarget> = candidates
            .iter()
            .map(|id| annotation_target(&table, scene, *id))
            .collect::<Result<_, _>>()?;

        // Per-candidate view selection, then the union across candidates.
        let grounded_point_sets: Vec<PointSet> =
            grounded_targets.iter().map(|t| t.points.clone()).collect();
        let per_candidate: Vec<Vec<u32>> = candidate_targets
            .iter()
            .map(|t| {
                grounding::select_perspectives_step(
                    vis,
                    &t.points,
                    &grounded_point_sets,
                    &config.grounding(),
                )
            })
            .collect();
        let union = grounding::union_perspectives(&per_candidate);
        step.selected_views = union.clone();

        let chosen = if union.is_empty() {
            // No view observes any candidate; nothing to show the VLM.
            // Resolve deterministically to the lowest id and flag it.
            step.low_confidence = true;
            candidates[0]
        } else {
            let conditions = grounding::extract_conditions(
                query,
                &task_chain.steps,
                label,
                backends.vlm.as_ref(),
            )?;
            step.conditions = conditions.clone();

            let mentioned_labels: Vec<String> = parsed.all_labels();
            let mentioned: Vec<AnnotationTarget> = table
                .iter()
                .filter(|e| {
                    mentioned_labels
                        .iter()
                        .any(|l| chain::canonical_label(l) == chain::canonical_label(&e.label))
                })
                .map(|e| annotation_target(&table, scene, e.id))
                .collect::<Result<_, _>>()?;
            let annotate = grounding::annotation_targets(
                config.annotation_mode,
                &grounded_targets,
                &candidate_targets,
                &mentioned,
            );

            let mut pairs = Vec::new();
            let mut drawn_ids: Vec<u32> = Vec::new();
            for &view_id in &union {
                let rendered = grounding::render_annotations(scene, vis, view_id, &annotate)?;
                for d in &rendered.drawn {
                    if !drawn_ids.contains(&d.id) {
                        drawn_ids.push(d.id);
                    }
                }
                let raw = ImagePayload::from_image(&scene.view(view_id)?.image)?;
                let annotated = ImagePayload::from_image(&rendered.image)?;
                if config.trace_images {
                    artifacts.push(TraceArtifact {
                        file_name: artifact_name(step_index, label, view_id),
                        png: annotated.png_bytes().to_vec(),
                    });
                }
                pairs.push(ViewImagePair { raw, annotated });
            }

            let references: Vec<ContextObject> = drawn_ids
                .iter()
                .filter(|id| !candidates.contains(id))
                .map(|&id| {
                    let entry = table.get(id)?;
                    Ok(ContextObject {
                        id,
                        label: entry.label.clone(),
                        points: table.entry_points(id, scene)?,
                    })
                })
                .collect::<Result<_, PipelineError>>()?;
            let candidate_objects: Vec<ContextObject> = candidate_targets
                .iter()
                .map(|t| ContextObject {
                    id: t.id,
                    label: t.label.clone(),
                    points: t.points.clone(),
                })
                .collect();

            let choice = grounding::reason_and_choose(
                &pairs,
                query,
                label,
                &conditions,
                &candidates,
                backends.vlm.as_ref(),
                references,
                candidate_objects,
            )?;
            step.condition_report = choice.report.clone();
            step.low_confidence = !choice.satisfied_all;
            choice.chosen
        };

        step.chosen_id = Some(chosen);
        step.wall_ms = step_timer.elapsed_ms();
        trace.steps.push(step);
        grounded.push((label.clone(), chosen));
    }

    let (_, target_id) = grounded
        .last()
        .expect("chains are non-empty and the target step either grounds or errors");
    let bbox = table.get(*target_id)?.bbox;
    trace.final_target = Some(TraceTarget {
        target_id: *target_id,
        target_box: bbox,
    });
    Ok(bbox)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub scene_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<Aabb3>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Aabb3>,
    pub status: String,
    pub ace_invocations: usize,
    pub chain: Vec<String>,
    pub wall_ms: f64,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Reads a JSONL query file, validating ids (they become trace file names).
pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>, PipelineError> {
    let raw = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::QueryFile {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
        if !valid_id(&record.query_id) {
            return Err(PipelineError::QueryFile {
                path: path.to_path_buf(),
                message: format!(
                    "line {}: query_id {:?} (allowed: alphanumerics, '-', '_', '.')",
                    lineno + 1,
                    record.query_id
                ),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<(), PipelineError> {
    let mut body = String::new();
    for record in records {
        body.push_str(&serde_json::to_string(record).expect("result records serialize"));
        body.push('\n');
    }
    crate::util::write_atomic(path, body.as_bytes()).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRecord>, PipelineError> {
    let raw = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| PipelineError::QueryFile {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// One scene's loaded state within a batch.
struct SceneBundle {
    scene: Arc<Scene>,
    vis: Arc<ViewVisibility>,
    olt: Arc<OltTable>,
}

fn load_bundle(
    scenes_root: &Path,
    scene_id: &str,
    config: &EngineConfig,
) -> Result<SceneBundle, PipelineError> {
    let dir = scenes_root.join(scene_id);
    let scene = crate::scene::load_scene(&dir.join(crate::synth::SCENE_SUBDIR))?;
    let olt_path = dir.join(crate::synth::OLT_FILE);
    let olt = if olt_path.exists() {
        crate::olt::load_olt(&olt_path, &scene)?
    } else {
        OltTable::new()
    };
    let vis = ViewVisibility::compute(&scene, &config.visibility())?;
    Ok(SceneBundle {
        scene: Arc::new(scene),
        vis: Arc::new(vis),
        olt: Arc::new(olt),
    })
}

/// Runs every query, isolating failures per record. Results keep input
/// order; traces are written one JSON file per query id.
///
/// Scene directories live under `scenes_root/<scene_id>/` with a `scene/`
/// subdirectory and an optional sibling `olt.json`.
pub fn ground_batch(
    scenes_root: &Path,
    queries: &[QueryRecord],
    config: &EngineConfig,
    backends: &Backends,
    trace_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<ResultRecord>, PipelineError> {
    // Load each referenced scene once, keeping per-scene failures isolated.
    let mut bundles: BTreeMap<String, Result<SceneBundle, String>> = BTreeMap::new();
    for record in queries {
        if !bundles.contains_key(&record.scene_id) {
            let bundle =
                load_bundle(scenes_root, &record.scene_id, config).map_err(|e| e.to_string());
            bundles.insert(record.scene_id.clone(), bundle);
        }
    }

    type RunPayload = Option<(GroundingTrace, Vec<TraceArtifact>)>;
    let run_one = |record: &QueryRecord| -> (ResultRecord, RunPayload) {
        match &bundles[&record.scene_id] {
            Err(message) => (
                ResultRecord {
                    query_id: record.query_id.clone(),
                    bbox: None,
                    status: format!("failed:scene ({message})"),
                    ace_invocations: 0,
                    chain: Vec::new(),
                    wall_ms: 0.0,
                },
                None,
            ),
            Ok(bundle) => {
                let run = ground_with_visibility(
                    &bundle.scene,
                    &bundle.vis,
                    &bundle.olt,
                    &record.query,
                    config,
                    backends,
                );
                let result = ResultRecord {
                    query_id: record.query_id.clone(),
                    bbox: run.outcome.as_ref().ok().copied(),
                    status: run.trace.status.clone(),
                    ace_invocations: run.trace.steps.iter().filter(|s| s.ace_invoked).count(),
                    chain: run.trace.chain.clone(),
                    wall_ms: run.trace.wall_ms,
                };
                (result, Some((run.trace, run.artifacts)))
            }
        }
    };

    let outputs: Vec<(ResultRecord, RunPayload)> = if jobs <= 1 {
        queries.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| PipelineError::QueryFile {
                path: PathBuf::from("<jobs>"),
                message: e.to_string(),
            })?;
        pool.install(|| {
            use rayon::prelude::*;
            queries.par_iter().map(run_one).collect()
        })
    };

    let mut results = Vec::with_capacity(outputs.len());
    for (record, run) in outputs {
        if let (Some(dir), Some((trace, artifacts))) = (trace_dir, run.as_ref()) {
            let path = dir.join(format!("{}.json", record.query_id));
            crate::util::write_json_atomic(&path, trace)
                .map_err(|source| PipelineError::Io { path, source })?;
            for artifact in artifacts {
                let path = dir.join(&record.query_id).join(&artifact.file_name);
                crate::util::write_atomic(&path, &artifact.png)
                    .map_err(|source| PipelineError::Io { path, source })?;
            }
        }
        results.push(record);
    }
    Ok(results)
}
