//! End-to-end replay throughput, concurrent against single-threaded.

use criterion::{criterion_group, criterion_main, Criterion};

use posepipe_core::geometry::halpe136;
use posepipe_core::pipeline::{replay_stages, run_pipeline, run_pipeline_sequential, FrameBundle, ReplayConfig};
use posepipe_core::posenms::NmsParams;
use posepipe_core::synth::{gen_trajectories, scene_to_replay, EmbeddingKind};
use posepipe_core::track::MsimConfig;

fn bench_pipeline(c: &mut Criterion) {
    let layout = halpe136();
    let scene = gen_trajectories(&layout, 2, 20, false, EmbeddingKind::Orthogonal, &[], 0.0, 7).unwrap();
    let (detections, heatmaps) = scene_to_replay(&scene, 48, 64, 1.0).unwrap();
    let mut cfg = ReplayConfig::new(layout.clone());
    cfg.nms = Some(NmsParams::default_for_joint_count(layout.joint_count()));
    cfg.track = Some(MsimConfig::default());
    let frame_ids: Vec<u64> = detections.keys().copied().collect();

    let mut group = c.benchmark_group("replay_20_frames");
    group.sample_size(10);
    group.bench_function("concurrent", |b| {
        b.iter(|| {
            let stages = replay_stages(detections.clone(), heatmaps.clone(), &cfg).unwrap();
            let source = frame_ids.clone().into_iter().map(|f| FrameBundle::new(f, 0));
            run_pipeline(stages, source, |_| Ok(())).unwrap()
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let stages = replay_stages(detections.clone(), heatmaps.clone(), &cfg).unwrap();
            let source = frame_ids.clone().into_iter().map(|f| FrameBundle::new(f, 0));
            run_pipeline_sequential(stages, source, |_| Ok(())).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_pipeline);
criterion_main!(benches);
