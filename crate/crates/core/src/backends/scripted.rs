//! Scripted mocks and the record/replay harness.
//!
//! A fixture file captures (request fingerprint → reply) pairs. Recording
//! wrappers log live exchanges into the same format, so a captured run can
//! be replayed byte-identically without any backend.

use super::{BackendError, SegBackend, VlmBackend, VlmRequest};
use crate::scene::{Mask2D, Scene};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FixtureKey {
    pub template_id: String,
    pub prompt_digest: String,
    pub image_digests: Vec<String>,
}

impl FixtureKey {
    pub fn of(request: &VlmRequest) -> Self {
        Self {
            template_id: request.template.as_str().to_string(),
            prompt_digest: request.prompt_digest(),
            image_digests: request.image_digests(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(rename = "match")]
    pub key: FixtureKey,
    pub reply: String,
}

/// Replays recorded VLM exchanges; a request without a fixture is an error.
pub struct ScriptedVlm {
    entries: BTreeMap<FixtureKey, String>,
}

impl ScriptedVlm {
    pub fn from_entries(entries: Vec<FixtureEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.key, e.reply)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read(path)?;
        let entries: Vec<FixtureEntry> = serde_json::from_slice(&raw).map_err(|e| {
            BackendError::Config(format!("{}: invalid fixture file: {e}", path.display()))
        })?;
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl VlmBackend for ScriptedVlm {
    fn complete(&self, request: &VlmRequest) -> Result<String, BackendError> {
        let key = FixtureKey::of(request);
        self.entries
            .get(&key)
            .cloned()
            .ok_or(BackendError::MissingFixture {
                template: key.template_id,
                prompt_digest: key.prompt_digest,
            })
    }
}

/// Wraps another VLM and captures every successful exchange.
pub struct RecordingVlm {
    inner: Arc<dyn VlmBackend>,
    log: Mutex<Vec<FixtureEntry>>,
}

impl RecordingVlm {
    pub fn new(inner: Arc<dyn VlmBackend>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn entries(&self) -> Vec<FixtureEntry> {
        self.log.lock().unwrap().clone()
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let entries = self.entries();
        let body = serde_json::to_vec_pretty(&entries)
            .map_err(|e| BackendError::Config(format!("fixture encode: {e}")))?;
        crate::util::write_atomic(path, &body)?;
        Ok(())
    }
}

impl VlmBackend for RecordingVlm {
    fn complete(&self, request: &VlmRequest) -> Result<String, BackendError> {
        let reply = self.inner.complete(request)?;
        self.log.lock().unwrap().push(FixtureEntry {
            key: FixtureKey::of(request),
            reply: reply.clone(),
        });
        Ok(reply)
    }
}

/// Run-length encoded mask as carried in segmentation fixtures and on the
/// wire: alternating run lengths over the row-major raster, first run false.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub runs: Vec<u32>,
}

impl RleMask {
    pub fn from_mask(mask: &Mask2D) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            runs: mask.to_runs(),
        }
    }

    pub fn to_mask(&self, view_id: u32) -> Result<Mask2D, BackendError> {
        Mask2D::from_runs(view_id, self.width, self.height, &self.runs)
            .map_err(|e| BackendError::Config(format!("bad RLE mask: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegFixtureEntry {
    pub view_id: u32,
    pub label: String,
    pub masks: Vec<RleMask>,
}

/// Replays segmentation responses keyed by (view id, label). A missing key
/// behaves as a segmenter that found nothing.
pub struct ScriptedSeg {
    entries: BTreeMap<(u32, String), Vec<RleMask>>,
}

impl ScriptedSeg {
    pub fn from_entries(entries: Vec<SegFixtureEntry>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|e| ((e.view_id, e.label), e.masks))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read(path)?;
        let entries: Vec<SegFixtureEntry> = serde_json::from_slice(&raw).map_err(|e| {
            BackendError::Config(format!("{}: invalid seg fixture file: {e}", path.display()))
        })?;
        Ok(Self::from_entries(entries))
    }
}

impl SegBackend for ScriptedSeg {
    fn segment(
        &self,
        _scene: &Scene,
        view_id: u32,
        label: &str,
    ) -> Result<Vec<Mask2D>, BackendError> {
        match self.entries.get(&(view_id, label.to_string())) {
            None => Ok(Vec::new()),
            Some(masks) => masks.iter().map(|m| m.to_mask(view_id)).collect(),
        }
    }
}

/// Wraps another segmenter and captures every successful exchange.
pub struct RecordingSeg {
    inner: Arc<dyn SegBackend>,
    log: Mutex<Vec<SegFixtureEntry>>,
}

impl RecordingSeg {
    pub fn new(inner: Arc<dyn SegBackend>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn entries(&self) -> Vec<SegFixtureEntry> {
        self.log.lock().unwrap().clone()
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let entries = self.entries();
        let body = serde_json::to_vec_pretty(&entries)
            .map_err(|e| BackendError::Config(format!("seg fixture encode: {e}")))?;
        crate::util::write_atomic(path, &body)?;
        Ok(())
    }
}

impl SegBackend for RecordingSeg {
    fn segment(
        &self,
        scene: &Scene,
        view_id: u32,
        label: &str,
    ) -> Result<Vec<Mask2D>, BackendError> {
        let masks = self.inner.segment(scene, view_id, label)?;
        self.log.lock().unwrap().push(SegFixtureEntry {
            view_id,
            label: label.to_string(),
            masks: masks.iter().map(RleMask::from_mask).collect(),
        });
        Ok(masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FnVlm, TemplateId};

    fn request(prompt: &str) -> VlmRequest {
        VlmRequest::new(TemplateId::Conditions, prompt.to_string())
    }

    #[test]
    fn record_then_replay_reproduces_replies() {
        let live = Arc::new(FnVlm(|req: &VlmRequest| {
            Ok(format!("reply to {} bytes", req.prompt.len()))
        }));
        let recorder = RecordingVlm::new(live);
        let reqs = [request("alpha"), request("beta"), request("gamma-longer")];
        let live_replies: Vec<String> =
            reqs.iter().map(|r| recorder.complete(r).unwrap()).collect();

        let scripted = ScriptedVlm::from_entries(recorder.entries());
        for (req, expect) in reqs.iter().zip(&live_replies) {
            assert_eq!(&scripted.complete(req).unwrap(), expect);
        }
    }

    #[test]
    fn scripted_misses_are_errors() {
        let scripted = ScriptedVlm::from_entries(vec![]);
        let err = scripted.complete(&request("unseen")).unwrap_err();
        assert!(matches!(err, BackendError::MissingFixture { .. }));
    }

    #[test]
    fn fixture_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.json");
        let recorder = RecordingVlm::new(Arc::new(FnVlm(|_: &VlmRequest| Ok("ok".to_string()))));
        recorder.complete(&request("hello")).unwrap();
        recorder.save(&path).unwrap();

        let scripted = ScriptedVlm::load(&path).unwrap();
        assert_eq!(scripted.len(), 1);
        assert_eq!(scripted.complete(&request("hello")).unwrap(), "ok");
    }
}
