//! Active cognition enhancement: perceive objects the lookup table does not
//! know yet.
//!
//! The stage selects up to `V` views that greedily maximize coverage of the
//! already grounded objects (falling back to whole-scene novelty sampling
//! when there are none), segments the missing label in 2D, lifts each mask
//! to a 3D point set, merges overlapping sets, filters sparse outliers, and
//! extends the lookup table with the survivors.

use crate::backends::{BackendError, SegBackend};
use crate::olt::{OltError, OltTable};
use crate::scene::{lift_mask_with, point_set_iou, PointSet, Scene, SceneError, ViewVisibility};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AceError {
    #[error("label is empty")]
    EmptyLabel,
    #[error("scene has no views")]
    NoViews,
    #[error("segmentation failed in every selected view: {summary}")]
    AllViewsFailed { summary: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Olt(#[from] OltError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseFilterConfig {
    /// Neighborhood radius in meters.
    pub neighbor_radius: f64,
    /// Minimum same-mask neighbors (excluding the point itself) to survive.
    pub min_neighbors: usize,
}

impl Default for NoiseFilterConfig {
    fn default() -> Self {
        Self {
            neighbor_radius: 0.05,
            min_neighbors: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AceConfig {
    /// Maximum number of observation views per invocation.
    pub max_views: usize,
    /// Merge threshold on 3D point-set IoU.
    pub tau_iou: f64,
    /// Minimum novelty ratio a view must add in the whole-scene fallback.
    pub fallback_tau: f64,
    pub noise_filter: NoiseFilterConfig,
}

impl Default for AceConfig {
    fn default() -> Self {
        Self {
            max_views: 3,
            tau_iou: 0.5,
            fallback_tau: 0.3,
            noise_filter: NoiseFilterConfig::default(),
        }
    }
}

/// Greedy coverage-maximizing view selection over precomputed visibility.
///
/// Per round the view with the highest summed coverage gain
/// `Δ(k) = Σ_i |P_i ∩ P_k \ R_i| / |P_i|` wins (ties go to the smallest view
/// id); observed regions are updated and the loop stops on full coverage,
/// zero gain, or `max_views` rounds. If nothing gets selected — in
/// particular when `objects` is empty — the whole-scene fallback scans all
/// views in id order and keeps each view whose visible set is at least
/// `fallback_tau` novel against the points accumulated so far.
pub fn select_coverage_views(
    vis: &ViewVisibility,
    objects: &[PointSet],
    config: &AceConfig,
) -> Result<Vec<u32>, AceError> {
    if vis.is_empty() {
        return Err(AceError::NoViews);
    }
    let objects: Vec<&PointSet> = objects.iter().filter(|o| !o.is_empty()).collect();
    let view_ids: Vec<u32> = vis.view_ids().collect();

    // Per-object visible subsets, computed once; the greedy rounds then only
    // subtract the observed region.
    let mut visible_of: HashMap<(usize, u32), PointSet> = HashMap::new();
    for (i, object) in objects.iter().enumerate() {
        for &k in &view_ids {
            let subset = object.intersection(vis.get(k)?);
            if !subset.is_empty() {
                visible_of.insert((i, k), subset);
            }
        }
    }

    let mut selected: Vec<u32> = Vec::new();
    let mut observed: Vec<PointSet> = objects.iter().map(|_| PointSet::empty()).collect();
    for _round in 0..config.max_views {
        let mut best: Option<(f64, u32)> = None;
        for &k in &view_ids {
            if selected.contains(&k) {
                continue;
            }
            let mut gain = 0.0;
            for (i, object) in objects.iter().enumerate() {
                if let Some(subset) = visible_of.get(&(i, k)) {
                    let new = subset.len() - subset.intersection_len(&observed[i]);
                    gain += new as f64 / object.len() as f64;
                }
            }
            if gain > best.map_or(0.0, |(g, _)| g) {
                best = Some((gain, k));
            }
        }
        let Some((_, winner)) = best else {
            break;
        };
        selected.push(winner);
        for (i, _) in objects.iter().enumerate() {
            if let Some(subset) = visible_of.get(&(i, winner)) {
                observed[i] = observed[i].union(subset);
            }
        }
        let fully_observed = objects
            .iter()
            .enumerate()
            .all(|(i, object)| observed[i].len() == object.len());
        if fully_observed {
            break;
        }
    }

    if selected.is_empty() {
        let mut covered = PointSet::empty();
        for &k in &view_ids {
            let visible = vis.get(k)?;
            if visible.is_empty() {
                continue;
            }
            let new = visible.len() - visible.intersection_len(&covered);
            if (new as f64 / visible.len() as f64) >= config.fallback_tau {
                selected.push(k);
                covered = covered.union(visible);
            }
        }
    }
    Ok(selected)
}

/// Spec-facing wrapper taking grounded (id, points) pairs.
pub fn select_perspectives_ace(
    vis: &ViewVisibility,
    grounded: &[(u32, PointSet)],
    config: &AceConfig,
) -> Result<Vec<u32>, AceError> {
    let objects: Vec<PointSet> = grounded.iter().map(|(_, p)| p.clone()).collect();
    select_coverage_views(vis, &objects, config)
}

#[derive(Debug, Default)]
pub struct SegmentLift {
    /// Non-empty lifted sets in (view order, mask order).
    pub masks: Vec<PointSet>,
    /// Views whose segmentation call failed; recorded, not fatal.
    pub failures: Vec<(u32, BackendError)>,
}

/// Segments `label` in each view and lifts the masks to 3D point sets.
///
/// A failing view is recorded and skipped; every view failing is a hard
/// error.
pub fn segment_and_lift(
    scene: &Scene,
    vis: &ViewVisibility,
    views: &[u32],
    label: &str,
    seg: &dyn SegBackend,
) -> Result<SegmentLift, AceError> {
    let mut out = SegmentLift::default();
    for &view_id in views {
        match seg.segment(scene, view_id, label) {
            Err(e) => out.failures.push((view_id, e)),
            Ok(masks) => {
                let visible = vis.get(view_id)?;
                for mask in &masks {
                    let lifted = lift_mask_with(scene, mask, visible)?;
                    if !lifted.is_empty() {
                        out.masks.push(lifted);
                    }
                }
            }
        }
    }
    if !views.is_empty() && out.failures.len() == views.len() {
        let summary = out
            .failures
            .iter()
            .map(|(v, e)| format!("view {v}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(AceError::AllViewsFailed { summary });
    }
    Ok(out)
}

/// Iteratively merges the highest-IoU pair at or above `tau_iou` until no
/// pair qualifies. Output is ordered by descending size, ties by content.
pub fn merge_masks(masks: Vec<PointSet>, tau_iou: f64) -> Vec<PointSet> {
    assert!(
        tau_iou > 0.0 && tau_iou <= 1.0,
        "tau_iou must lie in (0, 1]"
    );
    let mut work = masks;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..work.len() {
            for j in (i + 1)..work.len() {
                let iou = point_set_iou(&work[i], &work[j]);
                if iou >= tau_iou && best.is_none_or(|(b, ..)| iou > b) {
                    best = Some((iou, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else {
            break;
        };
        let merged = work[i].union(&work[j]);
        work[i] = merged;
        work.remove(j);
    }
    work.sort_by(|a, b| {
        b.len()
            .cmp(&a.len())
            .then_with(|| a.as_slice().cmp(b.as_slice()))
    });
    work
}

/// Removes points with fewer than `min_neighbors` same-mask members within
/// `neighbor_radius`. Exact counting on a voxel-hashed grid.
pub fn filter_noise(mask: &PointSet, scene: &Scene, config: &NoiseFilterConfig) -> PointSet {
    if mask.is_empty() {
        return PointSet::empty();
    }
    let radius = config.neighbor_radius;
    let r2 = radius * radius;
    let cell_of = |coord: f64| -> i64 { (coord / radius).floor() as i64 };
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for i in mask.iter() {
        let p = scene.cloud.position(i);
        grid.entry((cell_of(p.x), cell_of(p.y), cell_of(p.z)))
            .or_default()
            .push(i);
    }
    let kept = mask
        .iter()
        .filter(|&i| {
            let p = scene.cloud.position(i);
            let home = (cell_of(p.x), cell_of(p.y), cell_of(p.z));
            let mut neighbors = 0usize;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(home.0 + dx, home.1 + dy, home.2 + dz))
                        else {
                            continue;
                        };
                        for &j in bucket {
                            if j != i && (scene.cloud.position(j) - p).norm_squared() <= r2 {
                                neighbors += 1;
                                if neighbors >= config.min_neighbors {
                                    return true;
                                }
                            }
                        }
                    }
                }
            }
            false
        })
        .collect();
    kept
}

#[derive(Debug, Default)]
pub struct EnhanceOutcome {
    pub new_ids: Vec<u32>,
    pub selected_views: Vec<u32>,
    pub seg_failures: Vec<(u32, String)>,
}

/// The full perceive-and-extend step: view selection around the grounded
/// objects, segmentation, lifting, merging, noise filtering, and table
/// extension. Zero surviving masks is an empty outcome, not an error.
pub fn enhance(
    scene: &Scene,
    vis: &ViewVisibility,
    table: &mut OltTable,
    grounded: &[(u32, PointSet)],
    label: &str,
    seg: &dyn SegBackend,
    config: &AceConfig,
) -> Result<EnhanceOutcome, AceError> {
    if label.trim().is_empty() {
        return Err(AceError::EmptyLabel);
    }
    let selected_views = select_perspectives_ace(vis, grounded, config)?;
    if selected_views.is_empty() {
        return Ok(EnhanceOutcome {
            selected_views,
            ..EnhanceOutcome::default()
        });
    }
    let lift = segment_and_lift(scene, vis, &selected_views, label, seg)?;
    let merged = merge_masks(lift.masks, config.tau_iou);
    let survivors: Vec<PointSet> = merged
        .into_iter()
        .map(|m| filter_noise(&m, scene, &config.noise_filter))
        .filter(|m| !m.is_empty())
        .collect();
    let new_ids = table.extend(&survivors, label, scene)?;
    Ok(EnhanceOutcome {
        new_ids,
        selected_views,
        seg_failures: lift
            .failures
            .into_iter()
            .map(|(v, e)| (v, e.to_string()))
            .collect(),
    })
}

#[cfg(test)]
mod tests;
