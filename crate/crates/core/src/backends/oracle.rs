//! Ground-truth-driven backends.
//!
//! These answer every capability call from a synthetic scene's ground truth,
//! making the full pipeline runnable and checkable offline. The language
//! side emulates a careful model that can verify a relational condition only
//! when the referenced object is actually annotated in the images it was
//! shown — which is precisely what makes reference-skipping strategies fail
//! on fixtures designed to need that context.

use super::prompts::{
    canonical_reply, ChainEntry, ChainReply, ConditionsReply, ParsedObjectEntry,
    ParsedObjectsReply, ReasoningReply, ReplyPayload,
};
use super::{BackendError, ContextObject, RequestContext, SegBackend, VlmBackend, VlmRequest};
use crate::chain::canonical_label;
use crate::scene::{rasterize_points, visible_points, Mask2D, Scene, VisibilityConfig};
use crate::synth::{CondCheck, GtQuery, SceneGroundTruth};
use std::sync::Arc;

/// VLM oracle over one or more scenes' ground truth. Requests are matched to
/// their query via the structured request context.
pub struct OracleVlm {
    gts: Vec<Arc<SceneGroundTruth>>,
}

impl OracleVlm {
    pub fn new(gts: Vec<Arc<SceneGroundTruth>>) -> Self {
        Self { gts }
    }

    pub fn single(gt: Arc<SceneGroundTruth>) -> Self {
        Self { gts: vec![gt] }
    }

    fn lookup(&self, query: &str) -> Result<(&SceneGroundTruth, &GtQuery), BackendError> {
        for gt in &self.gts {
            if let Some(q) = gt.query_by_text(query) {
                return Ok((gt, q));
            }
        }
        Err(BackendError::Config(format!(
            "query is not part of any loaded ground truth: {query:?}"
        )))
    }
}

fn satisfied_conditions(
    gt: &SceneGroundTruth,
    q: &GtQuery,
    step_label: &str,
    conditions: &[String],
    candidate: &ContextObject,
    references: &[ContextObject],
) -> Vec<String> {
    let Some(step) = q
        .steps
        .iter()
        .find(|s| canonical_label(&s.label) == canonical_label(step_label))
    else {
        return Vec::new();
    };
    let Some(instance) = gt.owner_instance(&candidate.points) else {
        return Vec::new();
    };
    conditions
        .iter()
        .filter(|text| {
            let Some(spec) = step.conditions.iter().find(|c| &&c.text == text) else {
                return false;
            };
            match &spec.check {
                CondCheck::Attribute { attr } => gt.instances[instance]
                    .attributes
                    .iter()
                    .any(|a| canonical_label(a) == canonical_label(attr)),
                CondCheck::Relation { ref_label } => references.iter().any(|r| {
                    canonical_label(&r.label) == canonical_label(ref_label)
                        && gt
                            .owner_instance(&r.points)
                            .is_some_and(|ref_instance| gt.is_ancestor(instance, ref_instance))
                }),
            }
        })
        .cloned()
        .collect()
}

impl VlmBackend for OracleVlm {
    fn complete(&self, request: &VlmRequest) -> Result<String, BackendError> {
        let payload = match &request.context {
            RequestContext::None => {
                return Err(BackendError::Config(
                    "oracle backend requires a structured request context".into(),
                ))
            }
            RequestContext::Parsing { query } => {
                let (_, q) = self.lookup(query)?;
                let mut objects = vec![ParsedObjectEntry {
                    name: q.parsed.target_label.clone(),
                    is_target: true,
                }];
                objects.extend(q.parsed.relevant_labels.iter().map(|l| ParsedObjectEntry {
                    name: l.clone(),
                    is_target: false,
                }));
                ReplyPayload::Objects(ParsedObjectsReply { objects })
            }
            RequestContext::Chain { query } => {
                let (_, q) = self.lookup(query)?;
                let mut sequence = Vec::new();
                for (pos, label) in q.chain.iter().enumerate() {
                    let is_last = pos + 1 == q.chain.len();
                    let origin_index = if is_last {
                        -1
                    } else {
                        q.parsed
                            .relevant_labels
                            .iter()
                            .position(|l| canonical_label(l) == canonical_label(label))
                            .map(|i| i as i64)
                            .ok_or_else(|| {
                                BackendError::Config(format!(
                                    "ground-truth chain label {label:?} is not a parsed label"
                                ))
                            })?
                    };
                    sequence.push(ChainEntry {
                        name: label.clone(),
                        origin_index,
                    });
                }
                ReplyPayload::Chain(ChainReply {
                    reason: "reference-first ordering from scene ground truth".into(),
                    sequence,
                })
            }
            RequestContext::Conditions { query, step_label } => {
                let (_, q) = self.lookup(query)?;
                let step = q
                    .steps
                    .iter()
                    .find(|s| canonical_label(&s.label) == canonical_label(step_label))
                    .ok_or_else(|| {
                        BackendError::Config(format!(
                            "no ground-truth step for label {step_label:?}"
                        ))
                    })?;
                ReplyPayload::Conditions(ConditionsReply {
                    conditions: step.conditions.iter().map(|c| c.text.clone()).collect(),
                })
            }
            RequestContext::Reasoning {
                query,
                step_label,
                conditions,
                candidates,
                references,
            } => {
                let (gt, q) = self.lookup(query)?;
                let report: ReasoningReply = candidates
                    .iter()
                    .map(|candidate| {
                        (
                            candidate.id,
                            satisfied_conditions(
                                gt, q, step_label, conditions, candidate, references,
                            ),
                        )
                    })
                    .collect();
                ReplyPayload::Reasoning(report)
            }
        };
        Ok(canonical_reply(&payload))
    }
}

/// Segmentation oracle: rasterizes the visible points of every ground-truth
/// instance whose label matches, one mask per instance.
pub struct OracleSeg {
    gts: Vec<Arc<SceneGroundTruth>>,
    visibility: VisibilityConfig,
}

impl OracleSeg {
    pub fn new(gts: Vec<Arc<SceneGroundTruth>>, visibility: VisibilityConfig) -> Self {
        Self { gts, visibility }
    }

    pub fn single(gt: Arc<SceneGroundTruth>, visibility: VisibilityConfig) -> Self {
        Self {
            gts: vec![gt],
            visibility,
        }
    }
}

impl SegBackend for OracleSeg {
    fn segment(
        &self,
        scene: &Scene,
        view_id: u32,
        label: &str,
    ) -> Result<Vec<Mask2D>, BackendError> {
        let gt = self
            .gts
            .iter()
            .find(|g| g.scene_id == scene.scene_id)
            .ok_or_else(|| {
                BackendError::Config(format!("no ground truth for scene {:?}", scene.scene_id))
            })?;
        let visible = visible_points(scene, view_id, &self.visibility)
            .map_err(|e| BackendError::Scene(e.to_string()))?;
        let mut masks = Vec::new();
        for instance in &gt.instances {
            if canonical_label(&instance.label) != canonical_label(label) {
                continue;
            }
            let mask = rasterize_points(scene, view_id, &instance.points, &visible)
                .map_err(|e| BackendError::Scene(e.to_string()))?;
            if mask.count_true() > 0 {
                masks.push(mask);
            }
        }
        Ok(masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::prompts;
    use crate::backends::TemplateId;
    use crate::scene::{lift_mask_with, PointSet, ViewVisibility};
    use crate::synth::{cabinet_spec, generate};

    fn fixture() -> (crate::synth::SynthOutput, Arc<SceneGroundTruth>) {
        let output = generate(&cabinet_spec("oracle-test", 5)).unwrap();
        let gt = Arc::new(output.gt.clone());
        (output, gt)
    }

    #[test]
    fn oracle_replies_parse_under_the_strict_schemas() {
        let (output, gt) = fixture();
        let vlm = OracleVlm::single(gt);
        let query = output.gt.queries[0].text.clone();

        let mut request = VlmRequest::new(TemplateId::ObjectsParsing, "p".into());
        request.context = RequestContext::Parsing {
            query: query.clone(),
        };
        let reply = vlm.complete(&request).unwrap();
        let parsed = prompts::parse_reply(TemplateId::ObjectsParsing, &reply).unwrap();
        let ReplyPayload::Objects(objects) = parsed else {
            panic!()
        };
        assert_eq!(objects.objects[0].name, "handle");

        let mut request = VlmRequest::new(TemplateId::TaskChain, "c".into());
        request.context = RequestContext::Chain {
            query: query.clone(),
        };
        let reply = vlm.complete(&request).unwrap();
        let ReplyPayload::Chain(chain) =
            prompts::parse_reply(TemplateId::TaskChain, &reply).unwrap()
        else {
            panic!()
        };
        assert_eq!(chain.sequence.last().unwrap().origin_index, -1);

        let mut request = VlmRequest::new(TemplateId::Conditions, "k".into());
        request.context = RequestContext::Conditions {
            query: query.clone(),
            step_label: "drawer".into(),
        };
        let reply = vlm.complete(&request).unwrap();
        let ReplyPayload::Conditions(conditions) =
            prompts::parse_reply(TemplateId::Conditions, &reply).unwrap()
        else {
            panic!()
        };
        assert_eq!(conditions.conditions.len(), 3);
    }

    #[test]
    fn oracle_unknown_query_is_a_hard_error() {
        let (_, gt) = fixture();
        let vlm = OracleVlm::single(gt);
        let mut request = VlmRequest::new(TemplateId::ObjectsParsing, "p".into());
        request.context = RequestContext::Parsing {
            query: "never generated".into(),
        };
        assert!(matches!(
            vlm.complete(&request),
            Err(BackendError::Config(_))
        ));
    }

    #[test]
    fn oracle_masks_lift_into_their_instance() {
        let (output, gt) = fixture();
        let vis_cfg = VisibilityConfig::default();
        let seg = OracleSeg::single(gt.clone(), vis_cfg);
        let vis = ViewVisibility::compute(&output.scene, &vis_cfg).unwrap();
        for view_id in output.scene.view_ids() {
            let masks = seg.segment(&output.scene, view_id, "handle").unwrap();
            assert!(!masks.is_empty(), "handles are visible from every arc view");
            for mask in &masks {
                let lifted =
                    lift_mask_with(&output.scene, mask, vis.get(view_id).unwrap()).unwrap();
                assert!(!lifted.is_empty());
                let owner = gt.owner_instance(&lifted).unwrap();
                let instance = &gt.instances[owner];
                assert_eq!(instance.label, "handle");
                assert!(
                    lifted.is_subset_of(&instance.points),
                    "view {view_id}: lifted mask bleeds outside its instance"
                );
            }
        }
    }

    #[test]
    fn relational_conditions_need_an_annotated_reference() {
        let (_, gt) = fixture();
        let q = &gt.queries[0];
        let top_handle = &gt.instances[3];
        let bottom_handle = &gt.instances[4];
        let top_drawer = &gt.instances[1];
        let conditions: Vec<String> = q.steps[2]
            .conditions
            .iter()
            .map(|c| c.text.clone())
            .collect();
        let candidate = |inst: &crate::synth::GtInstance, id: u32| ContextObject {
            id,
            label: "handle".into(),
            points: inst.points.clone(),
        };
        let drawer_ref = ContextObject {
            id: 50,
            label: "drawer".into(),
            points: top_drawer.points.clone(),
        };

        // With the grounded top drawer annotated, only the top handle
        // satisfies the relation.
        let with_ref = satisfied_conditions(
            &gt,
            q,
            "handle",
            &conditions,
            &candidate(top_handle, 10),
            std::slice::from_ref(&drawer_ref),
        );
        assert_eq!(with_ref.len(), 2);
        let wrong = satisfied_conditions(
            &gt,
            q,
            "handle",
            &conditions,
            &candidate(bottom_handle, 11),
            &[drawer_ref],
        );
        assert_eq!(wrong.len(), 1, "attribute only");

        // Without any annotated drawer the relation is unverifiable for both.
        let blind = satisfied_conditions(
            &gt,
            q,
            "handle",
            &conditions,
            &candidate(top_handle, 10),
            &[],
        );
        assert_eq!(blind.len(), 1);
    }

    #[test]
    fn empty_point_context_objects_satisfy_nothing() {
        let (_, gt) = fixture();
        let q = &gt.queries[0];
        let conditions: Vec<String> = q.steps[2]
            .conditions
            .iter()
            .map(|c| c.text.clone())
            .collect();
        let ghost = ContextObject {
            id: 1,
            label: "handle".into(),
            points: PointSet::empty(),
        };
        assert!(satisfied_conditions(&gt, q, "handle", &conditions, &ghost, &[]).is_empty());
    }
}
