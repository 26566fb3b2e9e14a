//! Capability layer over external models.
//!
//! Three capabilities drive the pipeline: a vision-language backend
//! ([`VlmBackend`]), an open-vocabulary 2D segmenter ([`SegBackend`]), and a
//! text embedder ([`EmbeddingProvider`]). Each has a wire-protocol client, a
//! scripted fixture mock, and (for VLM/segmentation) an oracle that answers
//! from synthetic-scene ground truth, so the whole pipeline runs offline.

pub mod embedding;
pub mod oracle;
pub mod prompts;
pub mod scripted;
pub mod wire;

use crate::scene::{Mask2D, PointSet, Scene};
use sha2::{Digest, Sha256};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {message}")]
    Transport { message: String, retryable: bool },
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed reply ({reason}); offending fragment: {fragment}")]
    Schema { reason: String, fragment: String },
    #[error("no fixture matches request (template {template}, prompt digest {prompt_digest})")]
    MissingFixture {
        template: String,
        prompt_digest: String,
    },
    #[error("embedding failed for {text:?}: {reason}")]
    Embedding { text: String, reason: String },
    #[error("prompt template: {0}")]
    Template(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("scene: {0}")]
    Scene(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    pub fn schema(reason: impl Into<String>, fragment: impl Into<String>) -> Self {
        let mut fragment = fragment.into();
        const LIMIT: usize = 400;
        if fragment.len() > LIMIT {
            let mut cut = LIMIT;
            while !fragment.is_char_boundary(cut) {
                cut -= 1;
            }
            fragment.truncate(cut);
            fragment.push('…');
        }
        BackendError::Schema {
            reason: reason.into(),
            fragment,
        }
    }

    pub fn is_schema(&self) -> bool {
        matches!(self, BackendError::Schema { .. })
    }
}

/// Which prompt template a request was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ObjectsParsing,
    TaskChain,
    Conditions,
    Reasoning,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ObjectsParsing => "objects_parsing",
            TemplateId::TaskChain => "task_chain",
            TemplateId::Conditions => "conditions",
            TemplateId::Reasoning => "reasoning",
        }
    }
}

/// A PNG-encoded image attachment. The digest keys scripted fixtures and is
/// stable because the encoder is deterministic for a given raster.
#[derive(Debug, Clone)]
pub struct ImagePayload {
    png: Arc<Vec<u8>>,
    digest: String,
}

impl ImagePayload {
    pub fn from_image(image: &image::RgbImage) -> Result<Self, BackendError> {
        let mut png = Vec::new();
        image
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| BackendError::Config(format!("png encode: {e}")))?;
        let digest = hex::encode(Sha256::digest(&png));
        Ok(Self {
            png: Arc::new(png),
            digest,
        })
    }

    pub fn png_bytes(&self) -> &[u8] {
        &self.png
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Sampling parameters for a VLM call.
#[derive(Debug, Clone, Copy)]
pub struct DecodeParams {
    pub temperature: f32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 0.2 }
    }
}

/// An object reference carried in [`RequestContext::Reasoning`].
#[derive(Debug, Clone)]
pub struct ContextObject {
    pub id: u32,
    pub label: String,
    pub points: PointSet,
}

/// Structured request context for ground-truth-driven backends.
///
/// A live VLM reads ids and spatial relations out of the attached images;
/// an oracle backend cannot, so the pipeline mirrors the machine-readable
/// facts here. Wire and scripted backends ignore this field entirely and it
/// never contributes to fixture digests.
#[derive(Debug, Clone, Default)]
pub enum RequestContext {
    #[default]
    None,
    Parsing {
        query: String,
    },
    Chain {
        query: String,
    },
    Conditions {
        query: String,
        step_label: String,
    },
    Reasoning {
        query: String,
        step_label: String,
        conditions: Vec<String>,
        candidates: Vec<ContextObject>,
        /// Previously grounded or mentioned objects that were actually drawn
        /// into the annotated images.
        references: Vec<ContextObject>,
    },
}

#[derive(Debug, Clone)]
pub struct VlmRequest {
    pub template: TemplateId,
    pub prompt: String,
    pub images: Vec<ImagePayload>,
    pub params: DecodeParams,
    pub context: RequestContext,
}

impl VlmRequest {
    pub fn new(template: TemplateId, prompt: String) -> Self {
        Self {
            template,
            prompt,
            images: Vec::new(),
            params: DecodeParams::default(),
            context: RequestContext::None,
        }
    }

    pub fn prompt_digest(&self) -> String {
        sha256_hex(self.prompt.as_bytes())
    }

    pub fn image_digests(&self) -> Vec<String> {
        self.images.iter().map(|i| i.digest().to_string()).collect()
    }
}

pub trait VlmBackend: Send + Sync {
    fn complete(&self, request: &VlmRequest) -> Result<String, BackendError>;
}

pub trait SegBackend: Send + Sync {
    /// Segments instances of `label` in the given view. Mask dimensions match
    /// the view's image; masks are returned in the backend's native order.
    fn segment(
        &self,
        scene: &Scene,
        view_id: u32,
        label: &str,
    ) -> Result<Vec<Mask2D>, BackendError>;
}

/// Text embedding capability. Implementations return unit-L2 vectors and are
/// deterministic within a session.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError>;

    /// Cosine similarity between two labels. The default route embeds both
    /// sides; mocks may override with an analytic rule.
    fn similarity(&self, a: &str, b: &str) -> Result<f64, BackendError> {
        if a == b {
            return Ok(1.0);
        }
        let ea = self.embed(a)?;
        let eb = self.embed(b)?;
        if ea.len() != eb.len() {
            return Err(BackendError::Embedding {
                text: b.to_string(),
                reason: format!("dimension mismatch: {} vs {}", ea.len(), eb.len()),
            });
        }
        let dot: f64 = ea
            .iter()
            .zip(&eb)
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum();
        Ok(dot.clamp(-1.0, 1.0))
    }
}

/// Number of re-prompts after a malformed reply before giving up.
pub const SCHEMA_RETRIES: u32 = 2;

/// Issues a request, strictly parses the reply, and runs a caller-supplied
/// validation; schema violations from either stage are re-prompted up to
/// [`SCHEMA_RETRIES`] times.
pub fn complete_validated<T>(
    vlm: &dyn VlmBackend,
    request: &VlmRequest,
    mut validate: impl FnMut(prompts::ReplyPayload) -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut last = None;
    for _ in 0..=SCHEMA_RETRIES {
        let reply = vlm.complete(request)?;
        match prompts::parse_reply(request.template, &reply).and_then(&mut validate) {
            Ok(value) => return Ok(value),
            Err(e) if e.is_schema() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Issues a request and strictly parses the reply, re-prompting on schema
/// violations up to [`SCHEMA_RETRIES`] times.
pub fn complete_parsed(
    vlm: &dyn VlmBackend,
    request: &VlmRequest,
) -> Result<prompts::ReplyPayload, BackendError> {
    complete_validated(vlm, request, Ok)
}

/// Closure-backed VLM for tests and scripting small scenarios.
pub struct FnVlm<F>(pub F);

impl<F> VlmBackend for FnVlm<F>
where
    F: Fn(&VlmRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, request: &VlmRequest) -> Result<String, BackendError> {
        (self.0)(request)
    }
}

/// Closure-backed segmenter, same role as [`FnVlm`].
pub struct FnSeg<F>(pub F);

impl<F> SegBackend for FnSeg<F>
where
    F: Fn(&Scene, u32, &str) -> Result<Vec<Mask2D>, BackendError> + Send + Sync,
{
    fn segment(
        &self,
        scene: &Scene,
        view_id: u32,
        label: &str,
    ) -> Result<Vec<Mask2D>, BackendError> {
        (self.0)(scene, view_id, label)
    }
}
