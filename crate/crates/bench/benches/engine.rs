//! Hot-path benchmarks: coverage-greedy view selection (including the
//! 300-view × 50k-point budget case), per-candidate soft-margin selection,
//! mask merging, mask lifting, and edit distance.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{Point3, Vector3};
use openground_core::ace::{merge_masks, select_coverage_views, AceConfig};
use openground_core::chain::edit_distance;
use openground_core::grounding::{select_perspectives_step, GroundingConfig};
use openground_core::scene::{
    lift_mask, look_at_pose, CameraIntrinsics, CameraView, Mask2D, PointCloud, PointSet, Scene,
    ViewVisibility, VisibilityConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::hint::black_box;

fn coverage_instance(
    n_points: u32,
    n_views: u32,
    n_objects: u32,
) -> (ViewVisibility, Vec<PointSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let vis = ViewVisibility::from_map(
        (0..n_views)
            .map(|k| {
                let base = rng.random_range(0..n_points);
                let span = rng.random_range(n_points / 12..n_points / 4);
                let pts: Vec<u32> = (0..span).map(|o| (base + o * 3) % n_points).collect();
                (k, PointSet::new(pts))
            })
            .collect::<BTreeMap<_, _>>(),
    );
    let per_object = n_points / n_objects;
    let objects = (0..n_objects)
        .map(|i| PointSet::new((i * per_object..(i + 1) * per_object).collect()))
        .collect();
    (vis, objects)
}

fn bench_coverage_selection(c: &mut Criterion) {
    let mut group = c.benchmark_group("select_coverage_views");
    group.sample_size(20);
    for (points, views, objects) in [(5_000u32, 40u32, 3u32), (50_000, 300, 5)] {
        let (vis, object_sets) = coverage_instance(points, views, objects);
        let config = AceConfig::default();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{views}v-{points}p")),
            &(),
            |b, ()| {
                b.iter(|| black_box(select_coverage_views(&vis, &object_sets, &config).unwrap()));
            },
        );
    }
    group.finish();
}

fn bench_step_selection(c: &mut Criterion) {
    let (vis, objects) = coverage_instance(20_000, 120, 4);
    let candidate = objects[0].clone();
    let grounded = objects[1..].to_vec();
    let config = GroundingConfig::default();
    c.bench_function("select_perspectives_step/120v-20kp", |b| {
        b.iter(|| {
            black_box(select_perspectives_step(
                &vis, &candidate, &grounded, &config,
            ))
        });
    });
}

fn bench_merge(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let masks: Vec<PointSet> = (0..40)
        .map(|_| {
            let start = rng.random_range(0..5_000u32);
            let len = rng.random_range(200..2_000u32);
            PointSet::new((start..start + len).collect())
        })
        .collect();
    c.bench_function("merge_masks/40x2k", |b| {
        b.iter(|| black_box(merge_masks(masks.clone(), 0.5)));
    });
}

fn bench_lift(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let points: Vec<Point3<f64>> = (0..40_000)
        .map(|_| {
            Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let (rotation, translation) =
        look_at_pose(Point3::new(0.0, -3.0, 1.0), Point3::origin(), Vector3::z());
    let view = CameraView {
        view_id: 0,
        image: image::RgbImage::new(640, 480),
        intrinsics: CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
        },
        rotation,
        translation,
    };
    let scene = Scene::new(
        "bench".into(),
        PointCloud::new(points, None).unwrap(),
        vec![view],
    )
    .unwrap();
    let mut mask = Mask2D::new(0, 640, 480);
    for y in 0..480 {
        for x in 0..320 {
            mask.set(x, y, true);
        }
    }
    let config = VisibilityConfig::default();
    c.bench_function("lift_mask/40kp-640x480", |b| {
        b.iter(|| black_box(lift_mask(&scene, &mask, &config).unwrap()));
    });
}

fn bench_edit_distance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a: Vec<u16> = (0..200).map(|_| rng.random_range(0..50)).collect();
    let b: Vec<u16> = (0..200).map(|_| rng.random_range(0..50)).collect();
    c.bench_function("edit_distance/200x200", |bch| {
        bch.iter(|| black_box(edit_distance(&a, &b)));
    });
}

criterion_group!(
    benches,
    bench_coverage_selection,
    bench_step_selection,
    bench_merge,
    bench_lift,
    bench_edit_distance
);
criterion_main!(benches);
