//! Prompt templates and strict reply parsing.
//!
//! Each pipeline call instantiates one of four templates. Replies must carry
//! a JSON payload in the mandated shape; surrounding prose and fenced code
//! blocks are tolerated, but the payload itself is parsed strictly (unknown
//! keys rejected, exactly one target for objects parsing, and so on).

use super::{BackendError, TemplateId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const OBJECTS_PARSING_TEMPLATE: &str = r#"Please analyze the user's input query and identify all specific physical objects mentioned in it (exclude abstract concepts, actions, areas, or standalone attributes). Explicitly relevant objects should also be considered. Return the result strictly in this JSON format without any additional content:
{
    "objects": [
        {"name": "object1", "is_target": true},
        {"name": "object2", "is_target": false}
    ]
}

Only one object may be marked as target (is_target=true). All other objects must be marked as non-target (is_target=false).

Here is an example:

Query: "Locate the box which is the top one of the stack of boxes on the floor. Additionally, the box is near a black door and a sink in a storage room."

Response:
{
    "objects": [
        {"name": "box", "is_target": true},
        {"name": "boxes stack", "is_target": false},
        {"name": "door", "is_target": false},
        {"name": "sink", "is_target": false}
    ]
}

Now, start your task:

Query: {query}.
"#;

pub const TASK_CHAIN_TEMPLATE: &str = r#"Please analyze the user's input query, related objects and corresponding candidates counts. Your task is sorting it into a sequence which follows human manner and considers both semantic relevance and difficulty (including both candidates counts and visibility), for a robot to ground it in a room. Return the result strictly in the following JSON format without any additional content:
{
    "reason": "xxx",
    "sequence": [
        {"name": "object2", "origin_index": 1},
        {"name": "object1", "origin_index": 0},
        {"name": "object3", "origin_index": -1}
    ]
}

The entry with origin_index -1 is the target object. The target object should always be placed at last.

Here is an example:

Query: "Locate the box which is the top one of the stack of boxes on the floor. Additionally, the box is near a black door and a sink in a storage room."

Relevant Objects: [("boxes stack", 0), ("door", 3), ("sink", 2)]

Target Object: ("box", 17)

Response:
{
    "reason": "Sink (2 candidates) is the most salient fixture in storage rooms and easiest to detect first. Door (3 candidates) provides critical spatial context as secondary landmark. Boxes stack (0 candidates) requires prior landmark context to localize the specific stack referenced. Target box (17 candidates) has highest ambiguity and depends on all prior context for accurate identification.",
    "sequence": [
        {"name": "sink", "origin_index": 2},
        {"name": "door", "origin_index": 1},
        {"name": "boxes stack", "origin_index": 0},
        {"name": "box", "origin_index": -1}
    ]
}

Now, start your task:

Query: {query}. Relevant Objects: {relevant objects}. Target Object: {target}.
"#;

pub const CONDITIONS_TEMPLATE: &str = r#"Please analyze the user's input query, related objects and the target object. Your task is summarize the conditions of the target object. Return the result strictly in the following JSON format without any additional content:
{
    "conditions": [
        "condition1", "condition2"
    ]
}

The output conditions should be detailed and sufficient.

Here is an example:

Query: "Locate the box which is the top one of the stack of boxes on the floor. Additionally, the box is near a black door and a sink in a storage room."

Related Objects: ["sink", "door", "boxes stack", "box"]

Target Object: "boxes stack"

Response:
{
    "conditions": [
        "it is a stack of boxes",
        "it is on the floor",
        "it is near a black door",
        "it is near a sink"
    ]
}

Now, start your task:

Query: {query}. Related Objects: {related objects}. Target Object: {target}.
"#;

pub const REASONING_TEMPLATE: &str = r#"Please analyze user's input query, the conditions of the target object and images. For each N, <image_2N-1> is the origin image without any annotation, <image_2N> is the annotated image with previously grounded objects (which might be appeared in the conditions) and current candidates. Each annotation consists of a bounding box, a label and corresponding id. Your task is matching each candidate with the conditions. Return the result strictly in the following JSON format without any additional content:
{
    "id1": ["condition1", "condition3"],
    "id2": ["condition2"]
}

You should observe and compare the images carefully. The output conditions should be exactly the same as the input.

Here is an example:

Images: <image_1>, <image_2>, <image_3>, <image_4>

Query: "Locate the box which is the top one of the stack of boxes on the floor. Additionally, the box is near a black door and a sink in a storage room."

Conditions: ["it is a stack of boxes", "it is on the floor", "it is near a black door", "it is near a sink"]

Response:
{
    "128": ["it is a stack of boxes", "it is on the floor"],
    "127": ["it is a stack of boxes"],
    "131": ["it is a stack of boxes", "it is on the floor", "it is near a black door", "it is near a sink"]
}

Now, start your task:

Images: {images}. Query: {query}. Conditions: {conditions}.
"#;

impl TemplateId {
    pub fn body(self) -> &'static str {
        match self {
            TemplateId::ObjectsParsing => OBJECTS_PARSING_TEMPLATE,
            TemplateId::TaskChain => TASK_CHAIN_TEMPLATE,
            TemplateId::Conditions => CONDITIONS_TEMPLATE,
            TemplateId::Reasoning => REASONING_TEMPLATE,
        }
    }

    /// Placeholder names the template body contains, all of which must be bound.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::ObjectsParsing => &["query"],
            TemplateId::TaskChain => &["query", "relevant objects", "target"],
            TemplateId::Conditions => &["query", "related objects", "target"],
            TemplateId::Reasoning => &["images", "query", "conditions"],
        }
    }
}

/// Ordinal image markers matching attachment order: `<image_1>, <image_2>, …`.
pub fn image_markers(count: usize) -> String {
    (1..=count)
        .map(|i| format!("<image_{i}>"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Substitutes every placeholder in the template.
///
/// Bindings must cover the template's placeholder set exactly: a missing or
/// extra binding is an error, as is any placeholder surviving substitution.
pub fn instantiate(
    template: TemplateId,
    bindings: &BTreeMap<&str, String>,
) -> Result<String, BackendError> {
    let expected = template.placeholders();
    for name in expected {
        if !bindings.contains_key(name) {
            return Err(BackendError::Template(format!(
                "missing binding for placeholder {{{name}}} in template {}",
                template.as_str()
            )));
        }
    }
    for name in bindings.keys() {
        if !expected.contains(name) {
            return Err(BackendError::Template(format!(
                "extra binding {{{name}}} not used by template {}",
                template.as_str()
            )));
        }
    }
    let mut prompt = template.body().to_string();
    for (name, value) in bindings {
        prompt = prompt.replace(&format!("{{{name}}}"), value);
    }
    for name in expected {
        let marker = format!("{{{name}}}");
        if prompt.contains(&marker) {
            return Err(BackendError::Template(format!(
                "placeholder {marker} survived substitution in template {}",
                template.as_str()
            )));
        }
    }
    Ok(prompt)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsedObjectEntry {
    pub name: String,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsedObjectsReply {
    pub objects: Vec<ParsedObjectEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainEntry {
    pub name: String,
    pub origin_index: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainReply {
    pub reason: String,
    pub sequence: Vec<ChainEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionsReply {
    pub conditions: Vec<String>,
}

/// Per-candidate satisfied conditions, keyed by object id.
pub type ReasoningReply = BTreeMap<u32, Vec<String>>;

#[derive(Debug, Clone, PartialEq)]
pub enum ReplyPayload {
    Objects(ParsedObjectsReply),
    Chain(ChainReply),
    Conditions(ConditionsReply),
    Reasoning(ReasoningReply),
}

/// Locates the JSON payload inside a possibly decorated reply: the whole
/// trimmed text, the first fenced code block, or the outermost brace span.
pub fn extract_json_block(reply: &str) -> Result<String, BackendError> {
    let trimmed = reply.trim();
    if trimmed.starts_with('{') && trimmed.ends_with('}') {
        return Ok(trimmed.to_string());
    }
    if let Some(fence_start) = trimmed.find("```") {
        let after = &trimmed[fence_start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        if let Some(fence_end) = body.find("```") {
            let inner = body[..fence_end].trim();
            if inner.starts_with('{') {
                return Ok(inner.to_string());
            }
        }
    }
    if let (Some(open), Some(close)) = (trimmed.find('{'), trimmed.rfind('}')) {
        if open < close {
            return Ok(trimmed[open..=close].to_string());
        }
    }
    Err(BackendError::schema("no JSON object found in reply", reply))
}

fn parse_strict<T: serde::de::DeserializeOwned>(json: &str) -> Result<T, BackendError> {
    serde_json::from_str(json).map_err(|e| BackendError::schema(e.to_string(), json))
}

/// Strictly parses the schema mandated for a template, tolerating surrounding
/// prose and code fences.
pub fn parse_reply(template: TemplateId, reply: &str) -> Result<ReplyPayload, BackendError> {
    let json = extract_json_block(reply)?;
    match template {
        TemplateId::ObjectsParsing => {
            let parsed: ParsedObjectsReply = parse_strict(&json)?;
            let targets = parsed.objects.iter().filter(|o| o.is_target).count();
            if targets != 1 {
                return Err(BackendError::schema(
                    format!("expected exactly one target object, found {targets}"),
                    &json,
                ));
            }
            if parsed.objects.iter().any(|o| o.name.trim().is_empty()) {
                return Err(BackendError::schema("empty object name", &json));
            }
            Ok(ReplyPayload::Objects(parsed))
        }
        TemplateId::TaskChain => {
            let parsed: ChainReply = parse_strict(&json)?;
            if parsed.sequence.is_empty() {
                return Err(BackendError::schema("empty sequence", &json));
            }
            Ok(ReplyPayload::Chain(parsed))
        }
        TemplateId::Conditions => {
            let parsed: ConditionsReply = parse_strict(&json)?;
            Ok(ReplyPayload::Conditions(parsed))
        }
        TemplateId::Reasoning => {
            let raw: BTreeMap<String, Vec<String>> = parse_strict(&json)?;
            let mut out = ReasoningReply::new();
            for (key, conditions) in raw {
                let id: u32 = key.parse().map_err(|_| {
                    BackendError::schema(
                        format!("reasoning key {key:?} is not an object id"),
                        &json,
                    )
                })?;
                out.insert(id, conditions);
            }
            Ok(ReplyPayload::Reasoning(out))
        }
    }
}

/// Canonical serialization of a payload; `parse_reply` inverts it exactly.
pub fn canonical_reply(payload: &ReplyPayload) -> String {
    match payload {
        ReplyPayload::Objects(p) => serde_json::to_string_pretty(p),
        ReplyPayload::Chain(p) => serde_json::to_string_pretty(p),
        ReplyPayload::Conditions(p) => serde_json::to_string_pretty(p),
        ReplyPayload::Reasoning(p) => {
            let keyed: BTreeMap<String, &Vec<String>> = p
                .iter()
                .map(|(id, conds)| (id.to_string(), conds))
                .collect();
            serde_json::to_string_pretty(&keyed)
        }
    }
    .expect("reply payloads always serialize")
}
