//! Scene geometry: point cloud, posed camera views, projection, visibility,
//! axis-aligned boxes, and point-set arithmetic.
//!
//! Everything here is read-only after load; all queries are safe to run from
//! concurrent readers.

mod loader;
mod ply;

pub use loader::{load_scene, save_scene};
pub use ply::{load_ply, save_ply};

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown view id {0}")]
    UnknownView(u32),
    #[error("point cloud contains a non-finite coordinate at index {0}")]
    NonFinitePoint(usize),
    #[error("color array length {colors} does not match point count {points}")]
    ColorLengthMismatch { colors: usize, points: usize },
    #[error("view {view_id}: rotation is not orthonormal with determinant +1")]
    BadRotation { view_id: u32 },
    #[error(
        "view {view_id}: invalid intrinsics (fx={fx}, fy={fy}, cx={cx}, cy={cy}, {width}x{height})"
    )]
    BadIntrinsics {
        view_id: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    },
    #[error("duplicate view id {0}")]
    DuplicateViewId(u32),
    #[error(
        "view {view_id}: image is {actual_w}x{actual_h} but manifest declares {width}x{height}"
    )]
    ImageSizeMismatch {
        view_id: u32,
        width: u32,
        height: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("mask is {mask_w}x{mask_h} but view {view_id} is {view_w}x{view_h}")]
    MaskSizeMismatch {
        view_id: u32,
        mask_w: u32,
        mask_h: u32,
        view_w: u32,
        view_h: u32,
    },
    #[error("point index {index} out of range (cloud has {len} points)")]
    PointIndexOutOfRange { index: u32, len: usize },
    #[error("bounding box of an empty point set is undefined")]
    EmptyPointSet,
    #[error("invalid box: min corner exceeds max corner")]
    InvalidBox,
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Dense point cloud in the scene frame. Point indices are stable: they are
/// assigned on load and never reordered.
#[derive(Debug, Clone)]
pub struct PointCloud {
    positions: Vec<Point3<f64>>,
    colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<Point3<f64>>,
        colors: Option<Vec<[u8; 3]>>,
    ) -> Result<Self, SceneError> {
        for (i, p) in positions.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(SceneError::NonFinitePoint(i));
            }
        }
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(SceneError::ColorLengthMismatch {
                    colors: c.len(),
                    points: positions.len(),
                });
            }
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, index: u32) -> Point3<f64> {
        self.positions[index as usize]
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn color(&self, index: u32) -> Option<[u8; 3]> {
        self.colors.as_ref().map(|c| c[index as usize])
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// A posed RGB view. `rotation`/`translation` map world coordinates into the
/// camera frame: `p_cam = R * p_world + t`.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub view_id: u32,
    pub image: image::RgbImage,
    pub intrinsics: CameraIntrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-6;

impl CameraView {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// Checks the orthonormality/determinant and intrinsics invariants.
    pub fn validate(&self) -> Result<(), SceneError> {
        let r = &self.rotation;
        let identity_err = (r.transpose() * r - Matrix3::identity()).norm();
        let det_err = (r.determinant() - 1.0).abs();
        if identity_err > ROTATION_TOL || det_err > ROTATION_TOL {
            return Err(SceneError::BadRotation {
                view_id: self.view_id,
            });
        }
        let (w, h) = (self.width(), self.height());
        let k = &self.intrinsics;
        let ok = k.fx > 0.0
            && k.fy > 0.0
            && k.cx >= 0.0
            && k.cx < f64::from(w)
            && k.cy >= 0.0
            && k.cy < f64::from(h);
        if !ok {
            return Err(SceneError::BadIntrinsics {
                view_id: self.view_id,
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                width: w,
                height: h,
            });
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }
}

/// World-to-camera pose for a camera at `eye` looking at `target`.
///
/// The camera frame is right-handed with +z forward and +y down, so images
/// render with `up` pointing to decreasing pixel rows. `eye` and `target`
/// must not coincide and `up` must not be parallel to the view direction.
pub fn look_at_pose(
    eye: Point3<f64>,
    target: Point3<f64>,
    up: Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let forward = (target - eye).normalize();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * eye.coords);
    (rotation, translation)
}

/// A full scene: cloud plus posed views, unique by `view_id`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: String,
    pub cloud: PointCloud,
    views: Vec<CameraView>,
    by_id: BTreeMap<u32, usize>,
}

impl Scene {
    pub fn new(
        scene_id: String,
        cloud: PointCloud,
        views: Vec<CameraView>,
    ) -> Result<Self, SceneError> {
        let mut by_id = BTreeMap::new();
        for (i, v) in views.iter().enumerate() {
            v.validate()?;
            if by_id.insert(v.view_id, i).is_some() {
                return Err(SceneError::DuplicateViewId(v.view_id));
            }
        }
        Ok(Self {
            scene_id,
            cloud,
            views,
            by_id,
        })
    }

    pub fn view(&self, view_id: u32) -> Result<&CameraView, SceneError> {
        self.by_id
            .get(&view_id)
            .map(|&i| &self.views[i])
            .ok_or(SceneError::UnknownView(view_id))
    }

    pub fn views(&self) -> impl Iterator<Item = &CameraView> {
        self.views.iter()
    }

    /// View ids in ascending order.
    pub fn view_ids(&self) -> Vec<u32> {
        self.by_id.keys().copied().collect()
    }
}

/// Axis-aligned box in scene coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, SceneError> {
        if min.iter().zip(&max).any(|(a, b)| a > b) {
            return Err(SceneError::InvalidBox);
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Corner positions in a fixed order (z fastest).
    pub fn corners(&self) -> [Point3<f64>; 8] {
        let mut out = [Point3::origin(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Point3::new(
                if i & 4 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 1 == 0 { self.min[2] } else { self.max[2] },
            );
        }
        out
    }
}

/// Intersection-over-union of two axis-aligned boxes by volume.
///
/// Zero-volume boxes have no well-defined volume ratio: they yield 0 unless
/// the two boxes are identical, in which case 1.
pub fn box_iou_3d(a: &Aabb3, b: &Aabb3) -> f64 {
    if a.volume() == 0.0 || b.volume() == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let mut inter = 1.0;
    for i in 0..3 {
        let lo = a.min[i].max(b.min[i]);
        let hi = a.max[i].min(b.max[i]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    inter / (a.volume() + b.volume() - inter)
}

/// Binary raster tied to one view; dimensions must match that view's image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mask2D {
    pub view_id: u32,
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl Mask2D {
    pub fn new(view_id: u32, width: u32, height: u32) -> Self {
        Self {
            view_id,
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    pub fn filled(view_id: u32, width: u32, height: u32, value: bool) -> Self {
        Self {
            view_id,
            width,
            height,
            bits: vec![value; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.width + x) as usize] = value;
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Run-length encoding: alternating run lengths over the row-major
    /// flattened raster, starting with a `false` run (possibly of length 0).
    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(
        view_id: u32,
        width: u32,
        height: u32,
        runs: &[u32],
    ) -> Result<Self, SceneError> {
        let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        if total != u64::from(width) * u64::from(height) {
            return Err(SceneError::Load {
                path: PathBuf::new(),
                message: format!(
                    "mask run lengths sum to {total}, expected {}",
                    u64::from(width) * u64::from(height)
                ),
            });
        }
        let mut bits = Vec::with_capacity((width * height) as usize);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        Ok(Self {
            view_id,
            width,
            height,
            bits,
        })
    }

    pub fn check_against(&self, view: &CameraView) -> Result<(), SceneError> {
        if self.width != view.width() || self.height != view.height() {
            return Err(SceneError::MaskSizeMismatch {
                view_id: view.view_id,
                mask_w: self.width,
                mask_h: self.height,
                view_w: view.width(),
                view_h: view.height(),
            });
        }
        Ok(())
    }
}

/// Sorted, deduplicated set of point indices into a scene cloud.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointSet(Vec<u32>);

impl PointSet {
    pub fn new(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    /// Wraps a vector already known to be sorted and unique.
    pub fn from_sorted(indices: Vec<u32>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self(indices)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: u32) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn first(&self) -> Option<u32> {
        self.0.first().copied()
    }

    pub fn check_against(&self, cloud: &PointCloud) -> Result<(), SceneError> {
        if let Some(&last) = self.0.last() {
            if last as usize >= cloud.len() {
                return Err(SceneError::PointIndexOutOfRange {
                    index: last,
                    len: cloud.len(),
                });
            }
        }
        Ok(())
    }

    pub fn union(&self, other: &PointSet) -> PointSet {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        PointSet(out)
    }

    pub fn intersection(&self, other: &PointSet) -> PointSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        PointSet(out)
    }

    pub fn intersection_len(&self, other: &PointSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn difference(&self, other: &PointSet) -> PointSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() {
            if j >= b.len() || a[i] < b[j] {
                out.push(a[i]);
                i += 1;
            } else if a[i] > b[j] {
                j += 1;
            } else {
                i += 1;
                j += 1;
            }
        }
        PointSet(out)
    }

    /// `|self ∩ visible \ observed|` in one merge pass.
    pub fn count_new(&self, visible: &PointSet, observed: &PointSet) -> usize {
        let mut n = 0;
        let (mut j, mut k) = (0, 0);
        let (v, o) = (&visible.0, &observed.0);
        for &p in &self.0 {
            while j < v.len() && v[j] < p {
                j += 1;
            }
            if j >= v.len() {
                break;
            }
            if v[j] != p {
                continue;
            }
            while k < o.len() && o[k] < p {
                k += 1;
            }
            if k < o.len() && o[k] == p {
                continue;
            }
            n += 1;
        }
        n
    }

    pub fn is_subset_of(&self, other: &PointSet) -> bool {
        self.intersection_len(other) == self.len()
    }
}

impl FromIterator<u32> for PointSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        PointSet::new(iter.into_iter().collect())
    }
}

/// Intersection-over-union of two point sets by exact index arithmetic.
/// Two empty sets are defined to coincide (IoU 1).
pub fn point_set_iou(a: &PointSet, b: &PointSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityMode {
    /// Points must win (within `depth_tolerance`) a z-buffer rasterized at
    /// native image resolution.
    #[default]
    Occlusion,
    /// Frustum containment only; the depth test is skipped.
    FrustumOnly,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VisibilityConfig {
    pub mode: VisibilityMode,
    /// Meters of slack against the per-pixel minimum depth.
    pub depth_tolerance: f64,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self {
            mode: VisibilityMode::Occlusion,
            depth_tolerance: 0.05,
        }
    }
}

/// Projects a world point through a view's pinhole model.
///
/// Returns `None` when the camera-frame depth is non-positive; otherwise the
/// continuous pixel coordinates, which may lie outside the image.
pub fn project(point: &Point3<f64>, view: &CameraView) -> Option<(f64, f64)> {
    let c = view.world_to_camera(point);
    if c.z <= 0.0 {
        return None;
    }
    let k = &view.intrinsics;
    Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
}

/// Floors continuous pixel coordinates to an integer pixel, or `None` when
/// the result falls outside the raster. A coordinate exactly on the right or
/// bottom boundary (`u == width`) is outside.
pub fn pixel_of(u: f64, v: f64, width: u32, height: u32) -> Option<(u32, u32)> {
    let x = u.floor();
    let y = v.floor();
    if x < 0.0 || y < 0.0 || x >= f64::from(width) || y >= f64::from(height) {
        return None;
    }
    Some((x as u32, y as u32))
}

fn projected_pixels(scene: &Scene, view: &CameraView) -> Vec<(u32, u32, u32, f64)> {
    let mut hits = Vec::new();
    for (i, p) in scene.cloud.positions().iter().enumerate() {
        let c = view.world_to_camera(p);
        if c.z <= 0.0 {
            continue;
        }
        let k = &view.intrinsics;
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        if let Some((x, y)) = pixel_of(u, v, view.width(), view.height()) {
            hits.push((i as u32, x, y, c.z));
        }
    }
    hits
}

/// All cloud indices visible from a view.
///
/// In occlusion mode a point survives when its depth is within
/// `depth_tolerance` of the minimum depth rasterized into its pixel; in
/// frustum-only mode every in-image point with positive depth survives.
pub fn visible_points(
    scene: &Scene,
    view_id: u32,
    config: &VisibilityConfig,
) -> Result<PointSet, SceneError> {
    let view = scene.view(view_id)?;
    let hits = projected_pixels(scene, view);
    match config.mode {
        VisibilityMode::FrustumOnly => {
            Ok(PointSet::new(hits.into_iter().map(|(i, ..)| i).collect()))
        }
        VisibilityMode::Occlusion => {
            let (w, h) = (view.width() as usize, view.height() as usize);
            let mut zbuf = vec![f64::INFINITY; w * h];
            for &(_, x, y, z) in &hits {
                let cell = &mut zbuf[y as usize * w + x as usize];
                if z < *cell {
                    *cell = z;
                }
            }
            let kept = hits
                .into_iter()
                .filter(|&(_, x, y, z)| {
                    z <= zbuf[y as usize * w + x as usize] + config.depth_tolerance
                })
                .map(|(i, ..)| i)
                .collect();
            Ok(PointSet::new(kept))
        }
    }
}

/// Lifts a 2D mask to the set of visible 3D points whose projection lands in
/// a true mask pixel.
pub fn lift_mask(
    scene: &Scene,
    mask: &Mask2D,
    config: &VisibilityConfig,
) -> Result<PointSet, SceneError> {
    let visible = visible_points(scene, mask.view_id, config)?;
    lift_mask_with(scene, mask, &visible)
}

/// Same as [`lift_mask`], reusing a precomputed visible set for the mask's view.
pub fn lift_mask_with(
    scene: &Scene,
    mask: &Mask2D,
    visible: &PointSet,
) -> Result<PointSet, SceneError> {
    let view = scene.view(mask.view_id)?;
    mask.check_against(view)?;
    let mut kept = Vec::new();
    for i in visible.iter() {
        let p = scene.cloud.position(i);
        if let Some((u, v)) = project(&p, view) {
            if let Some((x, y)) = pixel_of(u, v, mask.width, mask.height) {
                if mask.get(x, y) {
                    kept.push(i);
                }
            }
        }
    }
    Ok(PointSet::new(kept))
}

/// Componentwise min/max over the member positions. Errors on an empty set.
pub fn bounding_box(points: &PointSet, scene: &Scene) -> Result<Aabb3, SceneError> {
    if points.is_empty() {
        return Err(SceneError::EmptyPointSet);
    }
    points.check_against(&scene.cloud)?;
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for i in points.iter() {
        let p = scene.cloud.position(i);
        for d in 0..3 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    Ok(Aabb3 { min, max })
}

/// All cloud indices whose position lies inside the box (inclusive).
pub fn points_in_box(scene: &Scene, bbox: &Aabb3) -> PointSet {
    PointSet::from_sorted(
        scene
            .cloud
            .positions()
            .iter()
            .enumerate()
            .filter(|(_, p)| bbox.contains(p))
            .map(|(i, _)| i as u32)
            .collect(),
    )
}

/// Paints the pixels hit by the visible members of a point set, producing a
/// mask aligned to the view's image.
pub fn rasterize_points(
    scene: &Scene,
    view_id: u32,
    points: &PointSet,
    visible: &PointSet,
) -> Result<Mask2D, SceneError> {
    let view = scene.view(view_id)?;
    let mut mask = Mask2D::new(view_id, view.width(), view.height());
    for i in points.intersection(visible).iter() {
        let p = scene.cloud.position(i);
        if let Some((u, v)) = project(&p, view) {
            if let Some((x, y)) = pixel_of(u, v, mask.width, mask.height) {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

/// Precomputed per-view visible point sets for one scene under one
/// visibility configuration.
#[derive(Debug, Clone)]
pub struct ViewVisibility {
    per_view: BTreeMap<u32, PointSet>,
}

impl ViewVisibility {
    pub fn compute(scene: &Scene, config: &VisibilityConfig) -> Result<Self, SceneError> {
        let mut per_view = BTreeMap::new();
        for id in scene.view_ids() {
            per_view.insert(id, visible_points(scene, id, config)?);
        }
        Ok(Self { per_view })
    }

    /// Builds directly from per-view sets; used by tests and synthetic drivers.
    pub fn from_map(per_view: BTreeMap<u32, PointSet>) -> Self {
        Self { per_view }
    }

    pub fn get(&self, view_id: u32) -> Result<&PointSet, SceneError> {
        self.per_view
            .get(&view_id)
            .ok_or(SceneError::UnknownView(view_id))
    }

    /// View ids in ascending order.
    pub fn view_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.per_view.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.per_view.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_view.is_empty()
    }
}
