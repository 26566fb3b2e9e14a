//! Scene directory loader.
//!
//! A scene is a directory holding a point cloud (PLY), a `scene.json`
//! manifest listing posed views, and the view images (PNG or JPEG). The
//! loader validates every invariant and reports the offending view on
//! failure.

use super::{ply, CameraIntrinsics, CameraView, Scene, SceneError};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST_NAME: &str = "scene.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    scene_id: String,
    cloud: String,
    views: Vec<ManifestView>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestView {
    view_id: u32,
    image_path: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
    width: u32,
    height: u32,
}

fn load_err(path: &Path, message: impl Into<String>) -> SceneError {
    SceneError::Load {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads a scene directory, validating the manifest against the images.
pub fn load_scene(dir: &Path) -> Result<Scene, SceneError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let raw = std::fs::read(&manifest_path).map_err(|e| SceneError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| load_err(&manifest_path, format!("invalid manifest: {e}")))?;

    let cloud = ply::load_ply(&dir.join(&manifest.cloud))?;

    let mut views = Vec::with_capacity(manifest.views.len());
    for mv in &manifest.views {
        let image_path = dir.join(&mv.image_path);
        let image = image::open(&image_path)
            .map_err(|e| {
                load_err(
                    &image_path,
                    format!("view {}: cannot read image: {e}", mv.view_id),
                )
            })?
            .to_rgb8();
        if image.width() != mv.width || image.height() != mv.height {
            return Err(SceneError::ImageSizeMismatch {
                view_id: mv.view_id,
                width: mv.width,
                height: mv.height,
                actual_w: image.width(),
                actual_h: image.height(),
            });
        }
        let r = mv.rotation;
        let view = CameraView {
            view_id: mv.view_id,
            image,
            intrinsics: CameraIntrinsics {
                fx: mv.fx,
                fy: mv.fy,
                cx: mv.cx,
                cy: mv.cy,
            },
            rotation: Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            translation: Vector3::new(mv.translation[0], mv.translation[1], mv.translation[2]),
        };
        view.validate()?;
        views.push(view);
    }

    Scene::new(manifest.scene_id, cloud, views)
}

/// Writes a scene as a loadable directory: `cloud.ply`, `scene.json`, and
/// one PNG per view under `images/`.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<(), SceneError> {
    let io = |path: &Path, e: std::io::Error| SceneError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(dir.join("images")).map_err(|e| io(dir, e))?;
    ply::save_ply(&dir.join("cloud.ply"), &scene.cloud)?;

    let mut views = Vec::new();
    for v in scene.views() {
        let image_path = format!("images/view_{:04}.png", v.view_id);
        let mut png = Vec::new();
        v.image
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| load_err(dir, format!("view {}: cannot encode image: {e}", v.view_id)))?;
        ply::write_atomic(&dir.join(&image_path), &png)?;
        let r = &v.rotation;
        views.push(ManifestView {
            view_id: v.view_id,
            image_path,
            fx: v.intrinsics.fx,
            fy: v.intrinsics.fy,
            cx: v.intrinsics.cx,
            cy: v.intrinsics.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [v.translation[0], v.translation[1], v.translation[2]],
            width: v.width(),
            height: v.height(),
        });
    }
    let manifest = Manifest {
        scene_id: scene.scene_id.clone(),
        cloud: "cloud.ply".to_string(),
        views,
    };
    let body = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| load_err(dir, format!("cannot encode manifest: {e}")))?;
    ply::write_atomic(&dir.join(MANIFEST_NAME), &body)
}
