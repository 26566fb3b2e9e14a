//! Query parsing, cognitive task-chain construction, and the edit-distance
//! alignment metrics.
//!
//! A chain orders the query's object labels into a grounding plan that always
//! ends with the target. Five strategies are supported; `Full` and `Relevant`
//! delegate the ordering to the VLM, the rest are deterministic rules.

use crate::backends::prompts::{self, ReplyPayload};
use crate::backends::{
    complete_validated, BackendError, RequestContext, TemplateId, VlmBackend, VlmRequest,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("query is empty")]
    EmptyQuery,
    #[error("no predictions supplied")]
    EmptyPredictions,
    #[error("missing candidate count for label {0:?}")]
    MissingCount(String),
    #[error("task {0:?} has no human sequences")]
    NoHumanData(String),
    #[error("task ids do not match human data; missing {missing:?}, extra {extra:?}")]
    TaskIdMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
}

/// Trimmed, lowercased label form used for all label comparisons.
pub fn canonical_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Target and reference labels extracted from a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedObjects {
    pub target_label: String,
    pub relevant_labels: Vec<String>,
}

impl ParsedObjects {
    /// All labels with the target last.
    pub fn all_labels(&self) -> Vec<String> {
        let mut labels = self.relevant_labels.clone();
        labels.push(self.target_label.clone());
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStrategy {
    Full,
    Relevant,
    Difficulty,
    Random,
    Jump,
}

impl ChainStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainStrategy::Full => "full",
            ChainStrategy::Relevant => "relevant",
            ChainStrategy::Difficulty => "difficulty",
            ChainStrategy::Random => "random",
            ChainStrategy::Jump => "jump",
        }
    }
}

impl std::str::FromStr for ChainStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "full" => Ok(ChainStrategy::Full),
            "relevant" => Ok(ChainStrategy::Relevant),
            "difficulty" => Ok(ChainStrategy::Difficulty),
            "random" => Ok(ChainStrategy::Random),
            "jump" => Ok(ChainStrategy::Jump),
            other => Err(format!("unknown chain strategy {other:?}")),
        }
    }
}

/// Ordered grounding plan. The last step is always the target label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskChain {
    pub steps: Vec<String>,
    pub strategy: ChainStrategy,
}

impl TaskChain {
    pub fn target(&self) -> &str {
        self.steps.last().expect("chains are never empty")
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Extracts the target label and relevant labels from a query via the VLM.
///
/// Labels are trimmed and deduplicated case-insensitively; a relevant label
/// colliding with the target is dropped. Malformed replies are re-prompted,
/// then fail.
pub fn parse_objects(query: &str, vlm: &dyn VlmBackend) -> Result<ParsedObjects, ChainError> {
    if query.trim().is_empty() {
        return Err(ChainError::EmptyQuery);
    }
    let bindings = BTreeMap::from([("query", query.to_string())]);
    let prompt = prompts::instantiate(TemplateId::ObjectsParsing, &bindings)?;
    let mut request = VlmRequest::new(TemplateId::ObjectsParsing, prompt);
    request.context = RequestContext::Parsing {
        query: query.to_string(),
    };
    let parsed = complete_validated(vlm, &request, |payload| {
        let ReplyPayload::Objects(reply) = payload else {
            unreachable!("parse_reply returns the payload for the request template");
        };
        let target = reply
            .objects
            .iter()
            .find(|o| o.is_target)
            .expect("parse_reply enforces exactly one target")
            .name
            .trim()
            .to_string();
        let mut seen = vec![canonical_label(&target)];
        let mut relevant = Vec::new();
        for obj in &reply.objects {
            if obj.is_target {
                continue;
            }
            let label = obj.name.trim().to_string();
            let canon = canonical_label(&label);
            if canon.is_empty() || seen.contains(&canon) {
                continue;
            }
            seen.push(canon);
            relevant.push(label);
        }
        Ok(ParsedObjects {
            target_label: target,
            relevant_labels: relevant,
        })
    })?;
    Ok(parsed)
}

fn format_labeled_counts(labels: &[String], counts: &BTreeMap<String, usize>) -> String {
    let cells: Vec<String> = labels
        .iter()
        .map(|l| format!("(\"{}\", {})", l, counts.get(l).copied().unwrap_or(0)))
        .collect();
    format!("[{}]", cells.join(", "))
}

fn format_labels(labels: &[String]) -> String {
    let cells: Vec<String> = labels.iter().map(|l| format!("\"{l}\"")).collect();
    format!("[{}]", cells.join(", "))
}

fn vlm_ordered_chain(
    query: &str,
    parsed: &ParsedObjects,
    counts: Option<&BTreeMap<String, usize>>,
    vlm: &dyn VlmBackend,
) -> Result<Vec<String>, ChainError> {
    let relevant_cell = match counts {
        Some(counts) => format_labeled_counts(&parsed.relevant_labels, counts),
        None => format_labels(&parsed.relevant_labels),
    };
    let target_cell = match counts {
        Some(counts) => format!(
            "(\"{}\", {})",
            parsed.target_label,
            counts.get(&parsed.target_label).copied().unwrap_or(0)
        ),
        None => format!("\"{}\"", parsed.target_label),
    };
    let bindings = BTreeMap::from([
        ("query", query.to_string()),
        ("relevant objects", relevant_cell),
        ("target", target_cell),
    ]);
    let prompt = prompts::instantiate(TemplateId::TaskChain, &bindings)?;
    let mut request = VlmRequest::new(TemplateId::TaskChain, prompt);
    request.context = RequestContext::Chain {
        query: query.to_string(),
    };
    let ordered = complete_validated(vlm, &request, |payload| {
        let ReplyPayload::Chain(reply) = payload else {
            unreachable!("parse_reply returns the payload for the request template");
        };
        validate_chain_sequence(parsed, &reply).map_err(|reason| {
            BackendError::schema(
                reason,
                prompts::canonical_reply(&ReplyPayload::Chain(reply.clone())),
            )
        })
    })?;
    Ok(ordered)
}

/// Checks a chain reply against the parsed labels: every relevant label
/// exactly once with its advertised index, the target last with index -1.
fn validate_chain_sequence(
    parsed: &ParsedObjects,
    reply: &prompts::ChainReply,
) -> Result<Vec<String>, String> {
    let target_canon = canonical_label(&parsed.target_label);
    let mut ordered = Vec::new();
    let mut used = Vec::new();
    for (pos, entry) in reply.sequence.iter().enumerate() {
        let canon = canonical_label(&entry.name);
        let is_last = pos + 1 == reply.sequence.len();
        if is_last {
            if canon != target_canon || entry.origin_index != -1 {
                return Err(format!(
                    "last sequence entry must be the target {:?} with origin_index -1",
                    parsed.target_label
                ));
            }
            ordered.push(parsed.target_label.clone());
        } else {
            let idx = parsed
                .relevant_labels
                .iter()
                .position(|l| canonical_label(l) == canon)
                .ok_or_else(|| format!("sequence entry {:?} is not a parsed label", entry.name))?;
            if entry.origin_index != idx as i64 {
                return Err(format!(
                    "sequence entry {:?} carries origin_index {}, expected {idx}",
                    entry.name, entry.origin_index
                ));
            }
            if used.contains(&idx) {
                return Err(format!("sequence repeats label {:?}", entry.name));
            }
            used.push(idx);
            ordered.push(parsed.relevant_labels[idx].clone());
        }
    }
    if ordered.last().map(|l| canonical_label(l)).as_deref() != Some(target_canon.as_str()) {
        return Err("sequence omits the target".into());
    }
    if used.len() != parsed.relevant_labels.len() {
        return Err("sequence omits some relevant labels".into());
    }
    Ok(ordered)
}

/// Builds the task chain for a parsed query under the given strategy.
///
/// `candidate_counts` must cover every label (target included); it feeds the
/// `Full` prompt and the `Difficulty` sort. `rng_seed` drives the seeded
/// shuffles in `Difficulty` and `Random`.
pub fn construct_chain(
    query: &str,
    parsed: &ParsedObjects,
    candidate_counts: &BTreeMap<String, usize>,
    strategy: ChainStrategy,
    vlm: &dyn VlmBackend,
    rng_seed: u64,
) -> Result<TaskChain, ChainError> {
    for label in parsed.all_labels() {
        if !candidate_counts.contains_key(&label) {
            return Err(ChainError::MissingCount(label));
        }
    }
    // Nothing to order for a single-object query.
    if parsed.relevant_labels.is_empty() {
        return Ok(TaskChain {
            steps: vec![parsed.target_label.clone()],
            strategy,
        });
    }
    let steps = match strategy {
        ChainStrategy::Full => vlm_ordered_chain(query, parsed, Some(candidate_counts), vlm)?,
        ChainStrategy::Relevant => vlm_ordered_chain(query, parsed, None, vlm)?,
        ChainStrategy::Difficulty => {
            let mut known: Vec<&String> = parsed
                .relevant_labels
                .iter()
                .filter(|l| candidate_counts[*l] > 0)
                .collect();
            known.sort_by_key(|l| candidate_counts[*l]);
            let mut unknown: Vec<&String> = parsed
                .relevant_labels
                .iter()
                .filter(|l| candidate_counts[*l] == 0)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            unknown.shuffle(&mut rng);
            let mut steps: Vec<String> = known.into_iter().cloned().collect();
            steps.extend(unknown.into_iter().cloned());
            steps.push(parsed.target_label.clone());
            steps
        }
        ChainStrategy::Random => {
            let mut labels = parsed.relevant_labels.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            labels.shuffle(&mut rng);
            labels.push(parsed.target_label.clone());
            labels
        }
        ChainStrategy::Jump => {
            let full = vlm_ordered_chain(query, parsed, Some(candidate_counts), vlm)?;
            vec![full[0].clone(), full[full.len() - 1].clone()]
        }
    };
    Ok(TaskChain { steps, strategy })
}

/// Levenshtein distance: minimum insertions, deletions, and substitutions
/// turning `a` into `b`, each of unit cost.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ai != bj);
            curr[j + 1] = substitute.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Edit distance over canonicalized label sequences.
pub fn label_edit_distance(a: &[String], b: &[String]) -> usize {
    let ca: Vec<String> = a.iter().map(|s| canonical_label(s)).collect();
    let cb: Vec<String> = b.iter().map(|s| canonical_label(s)).collect();
    edit_distance(&ca, &cb)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedChain {
    pub sequence: Vec<String>,
    pub weight: f64,
}

/// Frequency-weighted human orderings, one bundle per task instance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HumanChainSet {
    pub tasks: BTreeMap<String, Vec<WeightedChain>>,
}

#[derive(Debug, Deserialize)]
struct HumanChainFileTask {
    task_id: String,
    chains: Vec<WeightedChain>,
}

#[derive(Debug, Deserialize)]
struct HumanChainFile {
    tasks: Vec<HumanChainFileTask>,
}

impl HumanChainSet {
    pub fn load(path: &Path) -> Result<Self, ChainError> {
        let raw = std::fs::read(path).map_err(|e| ChainError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let file: HumanChainFile = serde_json::from_slice(&raw).map_err(|e| ChainError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut tasks = BTreeMap::new();
        for task in file.tasks {
            if task.chains.is_empty() {
                return Err(ChainError::NoHumanData(task.task_id));
            }
            if task
                .chains
                .iter()
                .any(|c| !c.weight.is_finite() || c.weight <= 0.0)
            {
                return Err(ChainError::Load {
                    path: path.to_path_buf(),
                    message: format!("task {:?} has a non-positive weight", task.task_id),
                });
            }
            tasks.insert(task.task_id, task.chains);
        }
        Ok(Self { tasks })
    }
}

/// Model-to-human alignment: per task, the weighted mean edit distance from
/// the prediction to each human sequence; then the unweighted mean over tasks.
pub fn waed_model(
    predictions: &BTreeMap<String, Vec<String>>,
    humans: &HumanChainSet,
) -> Result<f64, ChainError> {
    let missing: Vec<String> = predictions
        .keys()
        .filter(|t| !humans.tasks.contains_key(*t))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(ChainError::TaskIdMismatch {
            missing,
            extra: Vec::new(),
        });
    }
    if predictions.is_empty() {
        return Err(ChainError::EmptyPredictions);
    }
    let mut total = 0.0;
    for (task_id, prediction) in predictions {
        let chains = &humans.tasks[task_id];
        if chains.is_empty() {
            return Err(ChainError::NoHumanData(task_id.clone()));
        }
        let weight_sum: f64 = chains.iter().map(|c| c.weight).sum();
        let weighted: f64 = chains
            .iter()
            .map(|c| c.weight * label_edit_distance(prediction, &c.sequence) as f64)
            .sum();
        total += weighted / weight_sum;
    }
    Ok(total / predictions.len() as f64)
}

/// Human-human inconsistency: per task, the pairwise weighted edit distance
/// `Σ_{i<j} w_i w_j / (Σ_k w_k)² · ED(h_i, h_j)`; tasks are then averaged
/// weighted by their total response weight.
pub fn waed_human(humans: &HumanChainSet) -> f64 {
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for chains in humans.tasks.values() {
        let weight_sum: f64 = chains.iter().map(|c| c.weight).sum();
        if weight_sum <= 0.0 {
            continue;
        }
        let mut task_value = 0.0;
        for i in 0..chains.len() {
            for j in (i + 1)..chains.len() {
                let ed = label_edit_distance(&chains[i].sequence, &chains[j].sequence) as f64;
                task_value += chains[i].weight * chains[j].weight / (weight_sum * weight_sum) * ed;
            }
        }
        numerator += weight_sum * task_value;
        denominator += weight_sum;
    }
    if denominator == 0.0 {
        0.0
    } else {
        numerator / denominator
    }
}
