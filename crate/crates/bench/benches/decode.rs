//! Heatmap-to-pose decoding throughput at the two supported joint counts.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use posepipe_core::decode::{decode_pose, CropTransform};
use posepipe_core::geometry::{coco17, halpe136, DetectionBox, Heatmap, SkeletonLayout};
use posepipe_core::synth::gen_joint_heatmaps;
use std::sync::Arc;

fn fixture(layout: &Arc<SkeletonLayout>, grid_w: usize, grid_h: usize) -> (Heatmap, CropTransform) {
    let peaks: Vec<(f64, f64)> = (0..layout.joint_count())
        .map(|j| {
            let t = j as f64 / layout.joint_count() as f64;
            (4.0 + t * (grid_w as f64 - 9.0), 5.0 + t * (grid_h as f64 - 11.0))
        })
        .collect();
    let heatmap = gen_joint_heatmaps(&peaks, 1.5, grid_w, grid_h, 4.0).unwrap();
    let bbox = DetectionBox::new(100.0, 50.0, 290.0, 306.0, 0.9, 0).unwrap();
    let crop = CropTransform::for_box(bbox, grid_w, grid_h).unwrap();
    (heatmap, crop)
}

fn bench_decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_pose");
    for (name, layout) in [("coco17", coco17()), ("halpe136", halpe136())] {
        let (heatmap, crop) = fixture(&layout, 48, 64);
        group.bench_function(name, |b| {
            b.iter(|| decode_pose(black_box(&heatmap), layout.clone(), black_box(&crop)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_decode);
criterion_main!(benches);
