//! The object lookup table: the engine's enumerable knowledge of the scene.
//!
//! Entries map ids to semantic labels and 3D boxes, optionally with the
//! member point indices they were lifted from. Candidate retrieval matches a
//! query label against entry labels by embedding cosine similarity; the
//! active-cognition stage appends new entries as they are perceived.

use crate::backends::{BackendError, EmbeddingProvider};
use crate::scene::{bounding_box, points_in_box, Aabb3, PointSet, Scene, SceneError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OltError {
    #[error("duplicate id {0} in lookup table")]
    DuplicateId(u32),
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("entry {id}: stored box {stored:?} does not match the bounding box of its points {computed:?}")]
    BoxMismatch {
        id: u32,
        stored: Box<Aabb3>,
        computed: Box<Aabb3>,
    },
    #[error("cannot extend the table with an empty mask (position {0} in the batch)")]
    EmptyMask(usize),
    #[error("entry {id}: {source}")]
    Scene {
        id: u32,
        #[source]
        source: SceneError,
    },
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    AceExtended,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OltEntry {
    pub id: u32,
    pub label: String,
    pub bbox: Aabb3,
    /// Member point indices; empty for externally supplied box-only entries.
    pub points: PointSet,
    pub provenance: Provenance,
}

/// The dynamic lookup table. Ids are unique and strictly increase in
/// insertion order.
#[derive(Debug, Clone, Default)]
pub struct OltTable {
    entries: BTreeMap<u32, OltEntry>,
}

impl OltTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<OltEntry>) -> Result<Self, OltError> {
        let mut table = Self::new();
        for entry in entries {
            table.insert(entry)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, entry: OltEntry) -> Result<(), OltError> {
        if self.entries.contains_key(&entry.id) {
            return Err(OltError::DuplicateId(entry.id));
        }
        self.entries.insert(entry.id, entry);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Result<&OltEntry, OltError> {
        self.entries.get(&id).ok_or(OltError::UnknownId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &OltEntry> {
        self.entries.values()
    }

    pub fn max_id(&self) -> Option<u32> {
        self.entries.keys().next_back().copied()
    }

    /// Ids whose label embedding reaches cosine similarity `tau_cand` with
    /// the query label, ascending.
    pub fn retrieve_candidates(
        &self,
        label: &str,
        provider: &dyn EmbeddingProvider,
        tau_cand: f64,
    ) -> Result<Vec<u32>, OltError> {
        let mut out = Vec::new();
        for entry in self.entries.values() {
            let sim = provider.similarity(label, &entry.label)?;
            if sim >= tau_cand {
                out.push(entry.id);
            }
        }
        Ok(out)
    }

    /// Ids whose label equals the query exactly, ascending.
    pub fn retrieve_exact(&self, label: &str) -> Vec<u32> {
        self.entries
            .values()
            .filter(|e| e.label == label)
            .map(|e| e.id)
            .collect()
    }

    /// Appends one entry per mask, labeled `label`, with fresh consecutive
    /// ids. Returns the new ids in input order.
    pub fn extend(
        &mut self,
        masks: &[PointSet],
        label: &str,
        scene: &Scene,
    ) -> Result<Vec<u32>, OltError> {
        if let Some(pos) = masks.iter().position(PointSet::is_empty) {
            return Err(OltError::EmptyMask(pos));
        }
        let first = self.max_id().map_or(0, |m| m + 1);
        // Validate everything before touching the table.
        let mut boxes = Vec::with_capacity(masks.len());
        for (offset, mask) in masks.iter().enumerate() {
            let id = first + offset as u32;
            boxes.push(bounding_box(mask, scene).map_err(|source| OltError::Scene { id, source })?);
        }
        let mut new_ids = Vec::with_capacity(masks.len());
        for (offset, (mask, bbox)) in masks.iter().zip(boxes).enumerate() {
            let id = first + offset as u32;
            self.entries.insert(
                id,
                OltEntry {
                    id,
                    label: label.to_string(),
                    bbox,
                    points: mask.clone(),
                    provenance: Provenance::AceExtended,
                },
            );
            new_ids.push(id);
        }
        Ok(new_ids)
    }

    /// Member points of an entry; box-only entries fall back to sampling the
    /// cloud inside their box.
    pub fn entry_points(&self, id: u32, scene: &Scene) -> Result<PointSet, OltError> {
        let entry = self.get(id)?;
        if entry.points.is_empty() {
            Ok(points_in_box(scene, &entry.bbox))
        } else {
            Ok(entry.points.clone())
        }
    }

    /// Materializes box-sampled points onto every box-only entry so they can
    /// participate in coverage computations.
    pub fn attach_box_points(&mut self, scene: &Scene) {
        for entry in self.entries.values_mut() {
            if entry.points.is_empty() {
                entry.points = points_in_box(scene, &entry.bbox);
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OltFileEntry {
    id: u32,
    label: String,
    #[serde(rename = "box")]
    bbox: BoxFile,
    #[serde(skip_serializing_if = "Option::is_none")]
    point_indices: Option<Vec<u32>>,
    provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxFile {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct OltFile {
    entries: Vec<OltFileEntry>,
}

const BOX_MATCH_TOL: f64 = 1e-9;

/// Loads a table, validating ids, point ranges, and that each entry's box
/// matches the bounding box recomputed from its points.
pub fn load_olt(path: &Path, scene: &Scene) -> Result<OltTable, OltError> {
    let raw = std::fs::read(path).map_err(|source| OltError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: OltFile = serde_json::from_slice(&raw).map_err(|e| OltError::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut table = OltTable::new();
    for fe in file.entries {
        let bbox = Aabb3::new(fe.bbox.min, fe.bbox.max)
            .map_err(|source| OltError::Scene { id: fe.id, source })?;
        let points = match fe.point_indices {
            Some(indices) => {
                let set = PointSet::new(indices);
                set.check_against(&scene.cloud)
                    .map_err(|source| OltError::Scene { id: fe.id, source })?;
                let computed = bounding_box(&set, scene)
                    .map_err(|source| OltError::Scene { id: fe.id, source })?;
                let matches = (0..3).all(|d| {
                    (computed.min[d] - bbox.min[d]).abs() <= BOX_MATCH_TOL
                        && (computed.max[d] - bbox.max[d]).abs() <= BOX_MATCH_TOL
                });
                if !matches {
                    return Err(OltError::BoxMismatch {
                        id: fe.id,
                        stored: Box::new(bbox),
                        computed: Box::new(computed),
                    });
                }
                set
            }
            None => PointSet::empty(),
        };
        table.insert(OltEntry {
            id: fe.id,
            label: fe.label,
            bbox,
            points,
            provenance: fe.provenance,
        })?;
    }
    Ok(table)
}

pub fn save_olt(table: &OltTable, path: &Path) -> Result<(), OltError> {
    let file = OltFile {
        entries: table
            .iter()
            .map(|e| OltFileEntry {
                id: e.id,
                label: e.label.clone(),
                bbox: BoxFile {
                    min: e.bbox.min,
                    max: e.bbox.max,
                },
                point_indices: if e.points.is_empty() {
                    None
                } else {
                    Some(e.points.iter().collect())
                },
                provenance: e.provenance,
            })
            .collect(),
    };
    crate::util::write_json_atomic(path, &file).map_err(|source| OltError::Io {
        path: path.to_path_buf(),
        source,
    })
}
