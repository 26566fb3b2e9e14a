//! Deterministic synthetic scenes with dense ground truth.
//!
//! A spec lists parametric objects (boxes and cylinders of surface-sampled
//! points, with parent-child part structure) plus a camera arc; generation
//! yields a loadable scene directory, per-instance ground truth, a partial
//! initial lookup table (withheld objects excluded, emulating open-world
//! targets), and query records. Everything is a pure function of the spec
//! and seed, so repeated runs are byte-identical.

use crate::chain::ParsedObjects;
use crate::olt::{OltEntry, OltTable, Provenance};
use crate::pipeline::QueryRecord;
use crate::scene::{
    bounding_box, look_at_pose, Aabb3, CameraIntrinsics, CameraView, PointCloud, PointSet, Scene,
    SceneError,
};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {message}")]
    Spec { path: PathBuf, message: String },
    #[error("object {index}: parent {parent} is not an earlier object")]
    BadParent { index: usize, parent: usize },
    #[error("query {query_id}: {message}")]
    BadQuery { query_id: String, message: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Olt(#[from] crate::olt::OltError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSpec {
    Box {
        center: [f64; 3],
        size: [f64; 3],
    },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        height: f64,
    },
}

fn default_color() -> [u8; 3] {
    [200, 200, 200]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub label: String,
    pub shape: ShapeSpec,
    pub points: usize,
    /// Index of the parent object, which must appear earlier in the list.
    #[serde(default)]
    pub parent: Option<usize>,
    /// Excluded from the initial lookup table to emulate open-world targets.
    #[serde(default)]
    pub withhold: bool,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default = "default_color")]
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraArcSpec {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
    /// Center of the arc on the XY plane, degrees.
    pub arc_center_deg: f64,
    /// Total angular span of the arc, degrees.
    pub arc_span_deg: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CondCheck {
    /// Satisfied when the instance carries the attribute.
    Attribute { attr: String },
    /// Satisfied when an annotated reference with this label is an ancestor
    /// of the instance.
    Relation { ref_label: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondSpec {
    pub text: String,
    #[serde(flatten)]
    pub check: CondCheck,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSpec {
    pub label: String,
    pub conditions: Vec<CondSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub text: String,
    /// Object index of the ground-truth target.
    pub target: usize,
    /// Reference labels in parsed order (the target label is implicit).
    pub relevant_labels: Vec<String>,
    /// Reference-first chain for the strongest strategy, target label last.
    pub chain: Vec<String>,
    pub steps: Vec<StepSpec>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scene_id: String,
    #[serde(default)]
    pub seed: u64,
    pub camera: CameraArcSpec,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub queries: Vec<QuerySpec>,
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let raw = std::fs::read(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&raw).map_err(|e| SynthError::Spec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtInstance {
    pub index: usize,
    pub label: String,
    pub points: PointSet,
    pub bbox: Aabb3,
    pub parent: Option<usize>,
    pub attributes: Vec<String>,
    pub withheld: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtQuery {
    pub query_id: String,
    pub text: String,
    pub target_instance: usize,
    pub parsed: ParsedObjects,
    pub chain: Vec<String>,
    pub steps: Vec<StepSpec>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

/// Everything an oracle backend needs to answer from ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGroundTruth {
    pub scene_id: String,
    pub instances: Vec<GtInstance>,
    pub queries: Vec<GtQuery>,
}

impl SceneGroundTruth {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let raw = std::fs::read(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&raw).map_err(|e| SynthError::Spec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn query_by_text(&self, text: &str) -> Option<&GtQuery> {
        self.queries.iter().find(|q| q.text == text)
    }

    /// Instance owning the majority of the given points; ties break to the
    /// smaller index.
    pub fn owner_instance(&self, points: &PointSet) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for inst in &self.instances {
            let overlap = inst.points.intersection_len(points);
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, inst.index));
            }
        }
        best.map(|(_, index)| index)
    }

    /// Whether `ancestor` appears on `instance`'s parent chain.
    pub fn is_ancestor(&self, instance: usize, ancestor: usize) -> bool {
        let mut cursor = self.instances[instance].parent;
        while let Some(p) = cursor {
            if p == ancestor {
                return true;
            }
            cursor = self.instances[p].parent;
        }
        false
    }
}

pub struct SynthOutput {
    pub scene: Scene,
    pub gt: SceneGroundTruth,
    pub olt: OltTable,
    pub queries: Vec<QueryRecord>,
}

fn sample_box_surface(rng: &mut ChaCha8Rng, center: [f64; 3], size: [f64; 3]) -> Point3<f64> {
    let half = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    // Face picked by area: two faces per axis.
    let areas = [
        size[1] * size[2],
        size[1] * size[2],
        size[0] * size[2],
        size[0] * size[2],
        size[0] * size[1],
        size[0] * size[1],
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let axis = face / 2;
    let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
    let mut p = [0.0f64; 3];
    for d in 0..3 {
        p[d] = if d == axis {
            sign * half[d]
        } else {
            rng.random_range(-half[d]..=half[d])
        };
    }
    Point3::new(center[0] + p[0], center[1] + p[1], center[2] + p[2])
}

fn sample_cylinder_surface(
    rng: &mut ChaCha8Rng,
    center: [f64; 3],
    radius: f64,
    height: f64,
) -> Point3<f64> {
    let lateral = std::f64::consts::TAU * radius * height;
    let cap = std::f64::consts::PI * radius * radius;
    let total = lateral + 2.0 * cap;
    let pick = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    if pick < lateral {
        let z = rng.random_range(-height / 2.0..=height / 2.0);
        Point3::new(
            center[0] + radius * theta.cos(),
            center[1] + radius * theta.sin(),
            center[2] + z,
        )
    } else {
        let r = radius * rng.random_range(0.0f64..=1.0).sqrt();
        let z = if pick < lateral + cap {
            -height / 2.0
        } else {
            height / 2.0
        };
        Point3::new(
            center[0] + r * theta.cos(),
            center[1] + r * theta.sin(),
            center[2] + z,
        )
    }
}

const BACKGROUND: [u8; 3] = [228, 228, 228];
const SPLAT: i64 = 1;

/// Renders a view by z-buffered point splatting. Purely deterministic.
#[allow(clippy::too_many_arguments)]
fn render_view(
    positions: &[Point3<f64>],
    colors: &[[u8; 3]],
    view_id: u32,
    intrinsics: CameraIntrinsics,
    rotation: nalgebra::Matrix3<f64>,
    translation: Vector3<f64>,
    width: u32,
    height: u32,
) -> CameraView {
    let mut image = image::RgbImage::from_pixel(width, height, image::Rgb(BACKGROUND));
    let mut zbuf = vec![f64::INFINITY; (width * height) as usize];
    for (p, color) in positions.iter().zip(colors) {
        let c = rotation * p.coords + translation;
        if c.z <= 0.0 {
            continue;
        }
        let u = intrinsics.fx * c.x / c.z + intrinsics.cx;
        let v = intrinsics.fy * c.y / c.z + intrinsics.cy;
        let (px, py) = (u.floor() as i64, v.floor() as i64);
        for dy in -SPLAT..=SPLAT {
            for dx in -SPLAT..=SPLAT {
                let (x, y) = (px + dx, py + dy);
                if x < 0 || y < 0 || x >= i64::from(width) || y >= i64::from(height) {
                    continue;
                }
                let cell = (y as u32 * width + x as u32) as usize;
                if c.z < zbuf[cell] {
                    zbuf[cell] = c.z;
                    image.put_pixel(x as u32, y as u32, image::Rgb(*color));
                }
            }
        }
    }
    CameraView {
        view_id,
        image,
        intrinsics,
        rotation,
        translation,
    }
}

/// Generates the scene, ground truth, partial lookup table, and query
/// records from a spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Points, object by object, so instances own contiguous index ranges.
    let mut positions: Vec<Point3<f64>> = Vec::new();
    let mut colors: Vec<[u8; 3]> = Vec::new();
    let mut ranges: Vec<(u32, u32)> = Vec::new();
    for (index, object) in spec.objects.iter().enumerate() {
        if let Some(parent) = object.parent {
            if parent >= index {
                return Err(SynthError::BadParent { index, parent });
            }
        }
        let start = positions.len() as u32;
        for _ in 0..object.points {
            let p = match &object.shape {
                ShapeSpec::Box { center, size } => sample_box_surface(&mut rng, *center, *size),
                ShapeSpec::Cylinder {
                    center,
                    radius,
                    height,
                } => sample_cylinder_surface(&mut rng, *center, *radius, *height),
            };
            positions.push(p);
            colors.push(object.color);
        }
        ranges.push((start, positions.len() as u32));
    }

    // Camera arc, evenly spaced; a single camera sits at the arc center.
    let cam = &spec.camera;
    let target = Point3::new(cam.target[0], cam.target[1], cam.target[2]);
    let mut views = Vec::new();
    for i in 0..cam.count {
        let t = if cam.count == 1 {
            0.5
        } else {
            i as f64 / (cam.count - 1) as f64
        };
        let angle = (cam.arc_center_deg + (t - 0.5) * cam.arc_span_deg).to_radians();
        let eye = Point3::new(
            cam.target[0] + cam.radius * angle.cos(),
            cam.target[1] + cam.radius * angle.sin(),
            cam.height,
        );
        let (rotation, translation) = look_at_pose(eye, target, Vector3::z());
        views.push(render_view(
            &positions,
            &colors,
            i as u32,
            CameraIntrinsics {
                fx: cam.focal,
                fy: cam.focal,
                cx: f64::from(cam.image_width) / 2.0,
                cy: f64::from(cam.image_height) / 2.0,
            },
            rotation,
            translation,
            cam.image_width,
            cam.image_height,
        ));
    }

    let cloud = PointCloud::new(positions, Some(colors))?;
    let scene = Scene::new(spec.scene_id.clone(), cloud, views)?;

    let mut instances = Vec::new();
    let mut olt = OltTable::new();
    let mut next_olt_id = 0u32;
    for (index, object) in spec.objects.iter().enumerate() {
        let (start, end) = ranges[index];
        let points = PointSet::from_sorted((start..end).collect());
        let bbox = bounding_box(&points, &scene)?;
        instances.push(GtInstance {
            index,
            label: object.label.clone(),
            points: points.clone(),
            bbox,
            parent: object.parent,
            attributes: object.attributes.clone(),
            withheld: object.withhold,
        });
        if !object.withhold {
            olt.insert(OltEntry {
                id: next_olt_id,
                label: object.label.clone(),
                bbox,
                points,
                provenance: Provenance::Initial,
            })?;
            next_olt_id += 1;
        }
    }

    let mut gt_queries = Vec::new();
    let mut query_records = Vec::new();
    for query in &spec.queries {
        if query.target >= spec.objects.len() {
            return Err(SynthError::BadQuery {
                query_id: query.query_id.clone(),
                message: format!("target index {} out of range", query.target),
            });
        }
        let target_label = spec.objects[query.target].label.clone();
        if query.chain.last() != Some(&target_label) {
            return Err(SynthError::BadQuery {
                query_id: query.query_id.clone(),
                message: "chain must end with the target label".into(),
            });
        }
        for step in &query.chain {
            if !query.steps.iter().any(|s| &s.label == step) {
                return Err(SynthError::BadQuery {
                    query_id: query.query_id.clone(),
                    message: format!("chain step {step:?} has no step spec"),
                });
            }
        }
        let parsed = ParsedObjects {
            target_label,
            relevant_labels: query.relevant_labels.clone(),
        };
        gt_queries.push(GtQuery {
            query_id: query.query_id.clone(),
            text: query.text.clone(),
            target_instance: query.target,
            parsed,
            chain: query.chain.clone(),
            steps: query.steps.clone(),
            tags: query.tags.clone(),
        });
        query_records.push(QueryRecord {
            query_id: query.query_id.clone(),
            scene_id: spec.scene_id.clone(),
            query: query.text.clone(),
            gt_box: Some(instances[query.target].bbox),
            tags: query.tags.clone(),
        });
    }

    Ok(SynthOutput {
        scene,
        gt: SceneGroundTruth {
            scene_id: spec.scene_id.clone(),
            instances,
            queries: gt_queries,
        },
        olt,
        queries: query_records,
    })
}

/// Directory layout produced by [`write_outputs`].
pub const SCENE_SUBDIR: &str = "scene";
pub const GT_FILE: &str = "gt.json";
pub const OLT_FILE: &str = "olt.json";
pub const QUERIES_FILE: &str = "queries.jsonl";

pub fn write_outputs(out_dir: &Path, output: &SynthOutput) -> Result<(), SynthError> {
    let io = |path: &Path, source: std::io::Error| SynthError::Io {
        path: path.to_path_buf(),
        source,
    };
    crate::scene::save_scene(&output.scene, &out_dir.join(SCENE_SUBDIR))?;
    crate::util::write_json_atomic(&out_dir.join(GT_FILE), &output.gt)
        .map_err(|e| io(&out_dir.join(GT_FILE), e))?;
    crate::olt::save_olt(&output.olt, &out_dir.join(OLT_FILE))?;
    let mut lines = String::new();
    for record in &output.queries {
        lines.push_str(&serde_json::to_string(record).expect("query records serialize"));
        lines.push('\n');
    }
    crate::util::write_atomic(&out_dir.join(QUERIES_FILE), lines.as_bytes())
        .map_err(|e| io(&out_dir.join(QUERIES_FILE), e))?;
    Ok(())
}

fn attr(text: &str, attr: &str) -> CondSpec {
    CondSpec {
        text: text.to_string(),
        check: CondCheck::Attribute {
            attr: attr.to_string(),
        },
    }
}

fn rel(text: &str, ref_label: &str) -> CondSpec {
    CondSpec {
        text: text.to_string(),
        check: CondCheck::Relation {
            ref_label: ref_label.to_string(),
        },
    }
}

/// The cabinet family: one cabinet holding two drawers, each with a handle;
/// drawers and handles are withheld from the initial table. The query names
/// the handle on the top drawer, so the drawer reference is what
/// disambiguates the two handles — skipping it (or not annotating grounded
/// references) picks the wrong, lower-id handle. Geometry is jittered by
/// seed; the logical structure is fixed.
pub fn cabinet_spec(scene_id: &str, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0CAB_14E7);
    let jx = rng.random_range(-0.15..0.15);
    let jy = rng.random_range(-0.15..0.15);
    let w = rng.random_range(0.72..0.88);
    let h = rng.random_range(1.1..1.3);
    let front = -0.25 + jy;
    let top_z = 0.62 * h;
    let bot_z = 0.28 * h;

    let drawer = |z: f64, tag: &str, points: usize| ObjectSpec {
        label: "drawer".into(),
        shape: ShapeSpec::Box {
            center: [jx, front - 0.02, z],
            size: [0.75 * w, 0.04, 0.22],
        },
        points,
        parent: Some(0),
        withhold: true,
        attributes: vec!["drawer".into(), tag.into()],
        color: if tag == "top" {
            [150, 110, 70]
        } else {
            [120, 85, 55]
        },
    };
    // Handles protrude well past the drawer faces and stay thinner than the
    // default z-buffer depth tolerance, so their own rear points survive
    // visibility and lifted masks recover the full extent.
    let handle = |z: f64, tag: &str, points: usize, size: [f64; 3], parent: usize| ObjectSpec {
        label: "handle".into(),
        shape: ShapeSpec::Box {
            center: [jx, front - 0.16, z],
            size,
        },
        points,
        parent: Some(parent),
        withhold: true,
        attributes: vec!["handle".into(), tag.into()],
        color: [220, 220, 230],
    };

    SynthSpec {
        scene_id: scene_id.to_string(),
        seed,
        camera: CameraArcSpec {
            count: 6,
            radius: 2.6,
            height: 1.0,
            target: [jx, jy, 0.55 * h],
            arc_center_deg: 270.0,
            arc_span_deg: 100.0,
            image_width: 320,
            image_height: 240,
            focal: 240.0,
        },
        objects: vec![
            ObjectSpec {
                label: "cabinet".into(),
                shape: ShapeSpec::Box {
                    center: [jx, jy, 0.55 * h],
                    size: [w, 0.5, h],
                },
                points: 2600,
                parent: None,
                withhold: false,
                attributes: vec!["cabinet".into()],
                color: [235, 235, 225],
            },
            drawer(top_z, "top", 700),
            drawer(bot_z, "bottom", 900),
            // The wrong (bottom) handle is bigger, so it merges larger and
            // receives the lower extended id.
            handle(top_z, "top", 260, [0.22, 0.03, 0.05], 1),
            handle(bot_z, "bottom", 380, [0.30, 0.03, 0.06], 2),
        ],
        queries: vec![QuerySpec {
            query_id: format!("{scene_id}-q0"),
            text: "Locate the handle attached to the top drawer of the cabinet.".into(),
            target: 3,
            relevant_labels: vec!["cabinet".into(), "drawer".into()],
            chain: vec!["cabinet".into(), "drawer".into(), "handle".into()],
            steps: vec![
                StepSpec {
                    label: "cabinet".into(),
                    conditions: vec![attr("it is a cabinet", "cabinet")],
                },
                StepSpec {
                    label: "drawer".into(),
                    conditions: vec![
                        attr("it is a drawer", "drawer"),
                        attr("it is the top one", "top"),
                        rel("it is part of the cabinet", "cabinet"),
                    ],
                },
                StepSpec {
                    label: "handle".into(),
                    conditions: vec![
                        attr("it is a handle", "handle"),
                        rel("it is attached to the top drawer", "drawer"),
                    ],
                },
            ],
            tags: BTreeMap::from([("chain_length".to_string(), "3".to_string())]),
        }],
    }
}
