//! Single-step grounding: pick observation views per candidate with a
//! lexicographic soft margin, annotate them, extract the query's conditions
//! for this step, and let the VLM decide which candidate satisfies them.

use crate::annotate::{
    color_for_id, draw_rect_outline, draw_text, text_width, PixelRect, TEXT_HEIGHT,
};
use crate::backends::prompts::{self, ReplyPayload};
use crate::backends::{
    complete_validated, BackendError, ImagePayload, RequestContext, TemplateId, VlmBackend,
    VlmRequest,
};
use crate::scene::{project, Aabb3, PointSet, Scene, SceneError, ViewVisibility};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("no candidates supplied")]
    NoCandidates,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// Previously grounded objects plus the current candidates.
    #[default]
    Ours,
    /// Every lookup-table entry whose label appears in the query.
    AllMentioned,
    /// Current candidates only.
    CandidatesOnly,
}

impl std::str::FromStr for AnnotationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "ours" => Ok(AnnotationMode::Ours),
            "all_mentioned" => Ok(AnnotationMode::AllMentioned),
            "candidates_only" => Ok(AnnotationMode::CandidatesOnly),
            other => Err(format!("unknown annotation mode {other:?}")),
        }
    }
}

impl AnnotationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationMode::Ours => "ours",
            AnnotationMode::AllMentioned => "all_mentioned",
            AnnotationMode::CandidatesOnly => "candidates_only",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub max_views: usize,
    /// Soft margin: a view whose primary gain stays above `alpha` times the
    /// incumbent best may win on secondary gain.
    pub alpha: f64,
    pub annotation_mode: AnnotationMode,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            max_views: 3,
            alpha: 0.9,
            annotation_mode: AnnotationMode::Ours,
        }
    }
}

const GAIN_EPSILON: f64 = 1e-9;

/// Greedy per-candidate view selection with a lexicographic soft margin.
///
/// Per round each unselected view gets a primary gain (new candidate points
/// over candidate size) and a secondary gain (summed new-coverage ratios over
/// grounded objects). A view displaces the incumbent if its primary gain is
/// strictly higher, or within the `alpha` fraction of the best while its
/// secondary gain is strictly higher. The loop stops when no incumbent
/// emerges, the incumbent contributes (numerically) nothing, or the candidate
/// and every grounded object are fully observed.
pub fn select_perspectives_step(
    vis: &ViewVisibility,
    candidate: &PointSet,
    grounded: &[PointSet],
    config: &GroundingConfig,
) -> Vec<u32> {
    if candidate.is_empty() {
        return Vec::new();
    }
    let grounded: Vec<&PointSet> = grounded.iter().filter(|g| !g.is_empty()).collect();
    let view_ids: Vec<u32> = vis.view_ids().collect();
    let mut selected = Vec::new();
    let mut observed_candidate = PointSet::empty();
    let mut observed: Vec<PointSet> = grounded.iter().map(|_| PointSet::empty()).collect();

    for _round in 0..config.max_views {
        let mut best_primary = 0.0f64;
        let mut best_secondary = 0.0f64;
        let mut incumbent: Option<(u32, f64, f64)> = None;
        for &k in &view_ids {
            if selected.contains(&k) {
                continue;
            }
            let visible = vis.get(k).expect("view ids come from the index");
            let primary =
                candidate.count_new(visible, &observed_candidate) as f64 / candidate.len() as f64;
            let secondary: f64 = grounded
                .iter()
                .enumerate()
                .map(|(i, g)| g.count_new(visible, &observed[i]) as f64 / g.len() as f64)
                .sum();
            if primary > best_primary
                || (primary > config.alpha * best_primary && secondary > best_secondary)
            {
                best_primary = best_primary.max(primary);
                best_secondary = secondary;
                incumbent = Some((k, primary, secondary));
            }
        }
        let Some((winner, primary, secondary)) = incumbent else {
            break;
        };
        if primary < GAIN_EPSILON && secondary < GAIN_EPSILON {
            break;
        }
        selected.push(winner);
        let visible = vis.get(winner).expect("view ids come from the index");
        observed_candidate = observed_candidate.union(&candidate.intersection(visible));
        for (i, g) in grounded.iter().enumerate() {
            observed[i] = observed[i].union(&g.intersection(visible));
        }
        let full = observed_candidate.len() == candidate.len()
            && grounded
                .iter()
                .enumerate()
                .all(|(i, g)| observed[i].len() == g.len());
        if full {
            break;
        }
    }
    selected
}

/// Union of per-candidate view lists preserving first-seen order.
pub fn union_perspectives(lists: &[Vec<u32>]) -> Vec<u32> {
    let mut out = Vec::new();
    for list in lists {
        for &view in list {
            if !out.contains(&view) {
                out.push(view);
            }
        }
    }
    out
}

/// One object to annotate into a view.
#[derive(Debug, Clone)]
pub struct AnnotationTarget {
    pub id: u32,
    pub label: String,
    pub points: PointSet,
    pub bbox: Aabb3,
}

/// Picks what gets annotated under a mode. `grounded` and `candidates` are
/// this step's context; `mentioned` holds every table entry whose label
/// appears in the query.
pub fn annotation_targets(
    mode: AnnotationMode,
    grounded: &[AnnotationTarget],
    candidates: &[AnnotationTarget],
    mentioned: &[AnnotationTarget],
) -> Vec<AnnotationTarget> {
    let mut out: Vec<AnnotationTarget> = Vec::new();
    let mut push = |t: &AnnotationTarget| {
        if !out.iter().any(|x| x.id == t.id) {
            out.push(t.clone());
        }
    };
    match mode {
        AnnotationMode::Ours => {
            grounded.iter().for_each(&mut push);
            candidates.iter().for_each(&mut push);
        }
        AnnotationMode::CandidatesOnly => {
            candidates.iter().for_each(&mut push);
        }
        AnnotationMode::AllMentioned => {
            mentioned.iter().for_each(&mut push);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawnAnnotation {
    pub id: u32,
    pub label: String,
    /// Inclusive pixel rectangle [x0, y0, x1, y1].
    pub rect: [u32; 4],
}

#[derive(Debug, Clone)]
pub struct AnnotatedView {
    pub view_id: u32,
    pub image: image::RgbImage,
    pub drawn: Vec<DrawnAnnotation>,
}

/// Draws one labeled box per target visible in the view.
///
/// The box is the pixel hull of the projected 3D box corners, clipped to the
/// image; the caption is `label:id`. Targets with no visible point in this
/// view are skipped entirely.
pub fn render_annotations(
    scene: &Scene,
    vis: &ViewVisibility,
    view_id: u32,
    targets: &[AnnotationTarget],
) -> Result<AnnotatedView, SceneError> {
    let view = scene.view(view_id)?;
    let visible = vis.get(view_id)?;
    let mut image = view.image.clone();
    let mut drawn = Vec::new();
    for target in targets {
        if target.points.intersection_len(visible) == 0 {
            continue;
        }
        let mut min_u = f64::INFINITY;
        let mut min_v = f64::INFINITY;
        let mut max_u = f64::NEG_INFINITY;
        let mut max_v = f64::NEG_INFINITY;
        let mut any = false;
        for corner in target.bbox.corners() {
            if let Some((u, v)) = project(&corner, view) {
                min_u = min_u.min(u);
                min_v = min_v.min(v);
                max_u = max_u.max(u);
                max_v = max_v.max(v);
                any = true;
            }
        }
        if !any {
            continue;
        }
        let Some(rect) = PixelRect::clip(min_u, min_v, max_u, max_v, image.width(), image.height())
        else {
            continue;
        };
        let color = color_for_id(target.id);
        draw_rect_outline(&mut image, rect, color, 2);
        let caption = format!("{}:{}", target.label, target.id);
        let text_y = i64::from(rect.y0) - i64::from(TEXT_HEIGHT) - 1;
        let text_y = text_y.max(0);
        let text_x = i64::from(rect.x0).min(i64::from(
            image.width().saturating_sub(text_width(&caption)),
        ));
        draw_text(&mut image, text_x.max(0), text_y, &caption, color);
        drawn.push(DrawnAnnotation {
            id: target.id,
            label: target.label.clone(),
            rect: [rect.x0, rect.y0, rect.x1, rect.y1],
        });
    }
    Ok(AnnotatedView {
        view_id,
        image,
        drawn,
    })
}

/// Extracts the per-step condition strings from the query via the VLM.
/// Duplicates are dropped (order preserved); an empty list is a schema
/// violation and re-prompted.
pub fn extract_conditions(
    query: &str,
    related_labels: &[String],
    step_label: &str,
    vlm: &dyn VlmBackend,
) -> Result<Vec<String>, GroundingError> {
    let related = related_labels
        .iter()
        .map(|l| format!("\"{l}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let bindings = BTreeMap::from([
        ("query", query.to_string()),
        ("related objects", format!("[{related}]")),
        ("target", format!("\"{step_label}\"")),
    ]);
    let prompt = prompts::instantiate(TemplateId::Conditions, &bindings)?;
    let mut request = VlmRequest::new(TemplateId::Conditions, prompt);
    request.context = RequestContext::Conditions {
        query: query.to_string(),
        step_label: step_label.to_string(),
    };
    let conditions = complete_validated(vlm, &request, |payload| {
        let ReplyPayload::Conditions(reply) = payload else {
            unreachable!("parse_reply returns the payload for the request template");
        };
        let mut out: Vec<String> = Vec::new();
        for condition in reply.conditions {
            if !out.contains(&condition) {
                out.push(condition);
            }
        }
        if out.is_empty() {
            return Err(BackendError::schema("conditions list is empty", "[]"));
        }
        Ok(out)
    })?;
    Ok(conditions)
}

/// Per-candidate satisfied conditions as reported by the VLM.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionReport(pub BTreeMap<u32, Vec<String>>);

impl ConditionReport {
    pub fn satisfied_count(&self, id: u32) -> usize {
        self.0.get(&id).map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone)]
pub struct StepChoice {
    pub chosen: u32,
    pub report: ConditionReport,
    /// False when no candidate satisfied every condition and the max-count
    /// tie-break decided; recorded as low confidence in the trace.
    pub satisfied_all: bool,
}

/// Raw/annotated image pair for one view, in presentation order.
#[derive(Debug, Clone)]
pub struct ViewImagePair {
    pub raw: ImagePayload,
    pub annotated: ImagePayload,
}

/// Runs the condition-matching call and resolves the step's object id.
///
/// Images interleave raw and annotated per view. The reply must reference
/// only known candidate ids and verbatim condition strings. The candidate
/// satisfying all conditions wins; otherwise the highest satisfied count
/// wins with ties broken towards the lowest id.
#[allow(clippy::too_many_arguments)]
pub fn reason_and_choose(
    pairs: &[ViewImagePair],
    query: &str,
    step_label: &str,
    conditions: &[String],
    candidates: &[u32],
    vlm: &dyn VlmBackend,
    references: Vec<crate::backends::ContextObject>,
    candidate_objects: Vec<crate::backends::ContextObject>,
) -> Result<StepChoice, GroundingError> {
    if candidates.is_empty() {
        return Err(GroundingError::NoCandidates);
    }
    let conditions_cell = conditions
        .iter()
        .map(|c| format!("\"{c}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let bindings = BTreeMap::from([
        ("images", prompts::image_markers(pairs.len() * 2)),
        ("query", query.to_string()),
        ("conditions", format!("[{conditions_cell}]")),
    ]);
    let prompt = prompts::instantiate(TemplateId::Reasoning, &bindings)?;
    let mut request = VlmRequest::new(TemplateId::Reasoning, prompt);
    for pair in pairs {
        request.images.push(pair.raw.clone());
        request.images.push(pair.annotated.clone());
    }
    request.context = RequestContext::Reasoning {
        query: query.to_string(),
        step_label: step_label.to_string(),
        conditions: conditions.to_vec(),
        candidates: candidate_objects,
        references,
    };

    let report = complete_validated(vlm, &request, |payload| {
        let ReplyPayload::Reasoning(reply) = payload else {
            unreachable!("parse_reply returns the payload for the request template");
        };
        for (id, satisfied) in &reply {
            if !candidates.contains(id) {
                return Err(BackendError::schema(
                    format!("report names unknown candidate id {id}"),
                    format!("{id}: {satisfied:?}"),
                ));
            }
            if let Some(stranger) = satisfied.iter().find(|c| !conditions.contains(c)) {
                return Err(BackendError::schema(
                    format!("reported condition is not a verbatim member of the extracted list: {stranger:?}"),
                    format!("{id}: {satisfied:?}"),
                ));
            }
        }
        // Deduplicate repeats inside one candidate's list.
        let cleaned: BTreeMap<u32, Vec<String>> = reply
            .into_iter()
            .map(|(id, list)| {
                let mut seen = Vec::new();
                for c in list {
                    if !seen.contains(&c) {
                        seen.push(c);
                    }
                }
                (id, seen)
            })
            .collect();
        Ok(ConditionReport(cleaned))
    })?;

    let mut chosen = candidates[0];
    let mut best_count = report.satisfied_count(chosen);
    for &id in candidates {
        let count = report.satisfied_count(id);
        if count > best_count || (count == best_count && id < chosen) {
            chosen = id;
            best_count = count;
        }
    }
    Ok(StepChoice {
        chosen,
        satisfied_all: best_count == conditions.len(),
        report,
    })
}

#[cfg(test)]
mod tests;
