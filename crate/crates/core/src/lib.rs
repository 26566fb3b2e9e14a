//! Open-world 3D visual grounding engine.
//!
//! The engine localizes a natural-language target in a scanned scene by
//! progressive reasoning: it parses the query into a target plus reference
//! objects, orders them into a task chain, and grounds the chain step by
//! step. When a step's label is missing from the object lookup table, the
//! active-cognition stage selects coverage-maximizing views around already
//! grounded objects, segments the label in 2D, lifts the masks to 3D point
//! sets, and extends the table with the new instances before grounding
//! resumes.
//!
//! Module map:
//!
//! - [`scene`] — point cloud, camera views, projection, visibility, boxes.
//! - [`olt`] — the dynamic object lookup table and candidate retrieval.
//! - [`chain`] — query parsing, task-chain strategies, edit-distance metrics.
//! - [`ace`] — coverage-greedy view selection, mask lifting/merging, table extension.
//! - [`grounding`] — per-step view selection, annotation, condition reasoning.
//! - [`annotate`] — deterministic raster annotation drawing.
//! - [`pipeline`] — the end-to-end grounding loop, batching, and traces.
//! - [`backends`] — VLM / segmentation / embedding capabilities (wire, scripted, oracle).
//! - [`eval`] — accuracy metrics, breakdowns, and ablation grids.
//! - [`synth`] — deterministic synthetic scenes with ground truth for offline runs.
//! - [`config`] — engine configuration and TOML loading.

pub mod ace;
pub mod annotate;
pub mod backends;
pub mod chain;
pub mod config;
pub mod eval;
pub mod grounding;
pub mod olt;
pub mod pipeline;
pub mod scene;
pub mod synth;
pub mod util;

pub use scene::{Aabb3, CameraView, Mask2D, PointCloud, PointSet, Scene, VisibilityConfig};
