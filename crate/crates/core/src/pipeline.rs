//! Staged frame processing with bounded queues.
//!
//! Five fixed stages (load, detect, transform, pose, post) connected by
//! bounded FIFO channels with blocking push. Bundles carry sequence
//! numbers; the sink reorders by sequence, so output order always equals
//! input order. A sentinel end-of-stream message propagates shutdown
//! through every queue. The same stage set can run concurrently (one
//! thread per stage) or single-threaded with round-robin stepping; both
//! produce identical output content.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::decode::{decode_pose, CropTransform};
use crate::error::{Error, Result};
use crate::geometry::{DetectionBox, Heatmap, Pose, SkeletonLayout};
use crate::io::FrameDetections;
use crate::posenms::{pose_nms_indices, NmsParams};
use crate::track::{msim_step, FeatureMap, IdentityEmbedding, MsimConfig, TrackPool};

/// Everything known about one frame as it moves through the stages.
/// Vectors indexed by detection stay aligned with `detections`, and
/// fields populate monotonically downstream. Frame indices must be
/// strictly increasing per source.
#[derive(Debug, Clone, Default)]
pub struct FrameBundle {
    pub frame: u64,
    pub source: u32,
    pub detections: Vec<DetectionBox>,
    /// Crop transform used for each detection's heatmap.
    pub crops: Vec<CropTransform>,
    /// One stack of joint heatmaps per detection.
    pub heatmaps: Vec<Heatmap>,
    /// Raw identity features per detection, when a backbone provides them.
    pub id_maps: Vec<Option<FeatureMap>>,
    /// Keypoint attention per detection, values in [0, 1].
    pub attention_maps: Vec<Option<FeatureMap>>,
    /// Identity embeddings per detection.
    pub embeddings: Vec<Option<IdentityEmbedding>>,
    /// Decoded poses, filled by the pose stage.
    pub poses: Option<Vec<Pose>>,
    /// (pose index, track id) pairs, filled when tracking runs.
    pub track_links: Option<Vec<(usize, u64)>>,
}

impl FrameBundle {
    pub fn new(frame: u64, source: u32) -> Self {
        Self { frame, source, ..Self::default() }
    }
}

pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

/// The five canonical stages, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StageName {
    Load,
    Detect,
    Transform,
    Pose,
    Post,
}

impl StageName {
    pub const ORDER: [StageName; 5] =
        [StageName::Load, StageName::Detect, StageName::Transform, StageName::Pose, StageName::Post];

    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::Load => "load",
            StageName::Detect => "detect",
            StageName::Transform => "transform",
            StageName::Pose => "pose",
            StageName::Post => "post",
        }
    }
}

pub type Worker = Box<dyn FnMut(FrameBundle) -> Result<FrameBundle> + Send>;

/// One stage: its input queue capacity and the work it performs.
pub struct StageSpec {
    pub name: StageName,
    pub capacity: usize,
    pub worker: Worker,
}

impl StageSpec {
    pub fn new(
        name: StageName,
        capacity: usize,
        worker: impl FnMut(FrameBundle) -> Result<FrameBundle> + Send + 'static,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be at least 1".into()));
        }
        Ok(Self { name, capacity, worker: Box::new(worker) })
    }

    pub fn identity(name: StageName, capacity: usize) -> Result<Self> {
        Self::new(name, capacity, Ok)
    }
}

/// Power-of-two latency buckets over microseconds: bucket 0 holds
/// sub-microsecond calls, bucket i holds [2^(i-1), 2^i).
#[derive(Debug, Clone, Serialize)]
pub struct LatencyHistogram {
    pub buckets: Vec<u64>,
    pub count: u64,
    pub total_micros: u64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self { buckets: vec![0; 32], count: 0, total_micros: 0 }
    }
}

impl LatencyHistogram {
    pub fn record(&mut self, d: Duration) {
        let micros = d.as_micros().min(u64::MAX as u128) as u64;
        let idx = ((64 - micros.leading_zeros()) as usize).min(self.buckets.len() - 1);
        self.buckets[idx] += 1;
        self.count += 1;
        self.total_micros = self.total_micros.saturating_add(micros);
    }

    pub fn mean_micros(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.total_micros as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageStats {
    pub name: &'static str,
    pub frames: u64,
    pub latency: LatencyHistogram,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub stages: Vec<StageStats>,
    pub frames: u64,
    pub wall_micros: u64,
    pub throughput_fps: f64,
    pub peak_in_flight: i64,
    /// Five in-processing slots plus all queue slots.
    pub in_flight_limit: i64,
}

fn validate_stages(stages: &[StageSpec]) -> Result<i64> {
    if stages.len() != StageName::ORDER.len() {
        return Err(Error::InvalidArgument(format!("exactly five stages required, got {}", stages.len())));
    }
    for (spec, want) in stages.iter().zip(StageName::ORDER) {
        if spec.name != want {
            return Err(Error::InvalidArgument(format!(
                "stages must follow the canonical order; found {} where {} belongs",
                spec.name.as_str(),
                want.as_str()
            )));
        }
        if spec.capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be at least 1".into()));
        }
    }
    Ok(stages.len() as i64 + stages.iter().map(|s| s.capacity as i64).sum::<i64>())
}

#[allow(clippy::large_enum_variant)]
enum Msg {
    Bundle(u64, FrameBundle),
    End,
}

struct Shared {
    failure: Mutex<Option<Error>>,
    stop: AtomicBool,
    in_flight: AtomicI64,
    peak: AtomicI64,
}

impl Shared {
    fn fail(&self, err: Error) {
        let mut slot = self.failure.lock().expect("failure lock");
        if slot.is_none() {
            *slot = Some(err);
        }
        drop(slot);
        self.stop.store(true, Ordering::SeqCst);
    }

    fn enter(&self) {
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(current, Ordering::SeqCst);
    }

    fn leave(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn stage_loop(mut stage: StageSpec, rx: Receiver<Msg>, tx: SyncSender<Msg>, shared: &Shared) -> StageStats {
    let mut stats = StageStats { name: stage.name.as_str(), frames: 0, latency: LatencyHistogram::default() };
    // After a failure anywhere, keep consuming so upstream senders
    // unblock, but stop doing work and forwarding.
    let mut draining = false;
    loop {
        match rx.recv() {
            Ok(Msg::Bundle(seq, bundle)) => {
                if draining || shared.stop.load(Ordering::SeqCst) {
                    shared.leave();
                    continue;
                }
                let frame = bundle.frame;
                let begin = Instant::now();
                match (stage.worker)(bundle) {
                    Ok(out) => {
                        stats.latency.record(begin.elapsed());
                        stats.frames += 1;
                        if tx.send(Msg::Bundle(seq, out)).is_err() {
                            shared.leave();
                            draining = true;
                        }
                    }
                    Err(e) => {
                        shared.fail(Error::Stage {
                            stage: stage.name.as_str(),
                            frame,
                            message: e.to_string(),
                        });
                        shared.leave();
                        draining = true;
                    }
                }
            }
            Ok(Msg::End) | Err(_) => {
                let _ = tx.send(Msg::End);
                return stats;
            }
        }
    }
}

/// Runs the pipeline with one thread per stage. Returns after the
/// source is exhausted and every in-flight bundle reached the sink, or
/// after a failure drained the pipeline.
pub fn run_pipeline(
    stages: Vec<StageSpec>,
    source: impl Iterator<Item = FrameBundle> + Send,
    mut sink: impl FnMut(FrameBundle) -> Result<()>,
) -> Result<RunStats> {
    let limit = validate_stages(&stages)?;
    let caps: Vec<usize> = stages.iter().map(|s| s.capacity).collect();
    let shared = Shared {
        failure: Mutex::new(None),
        stop: AtomicBool::new(false),
        in_flight: AtomicI64::new(0),
        peak: AtomicI64::new(0),
    };
    let begin = Instant::now();

    let (stats, delivered) = std::thread::scope(|scope| {
        let shared = &shared;
        // A parked receiver takes one message by direct handoff on top of
        // the channel buffer, so a buffer of capacity - 1 gives each edge
        // exactly its declared capacity.
        let (src_tx, mut prev_rx) = sync_channel::<Msg>(caps[0] - 1);
        let mut handles = Vec::with_capacity(stages.len());
        let last = stages.len() - 1;
        for (i, stage) in stages.into_iter().enumerate() {
            // The final edge is a rendezvous so a bundle leaving the last
            // stage transfers straight into the sink's hands.
            let out_cap = if i < last { caps[i + 1] - 1 } else { 0 };
            let (tx, rx) = sync_channel::<Msg>(out_cap);
            let rx_in = std::mem::replace(&mut prev_rx, rx);
            handles.push(scope.spawn(move || stage_loop(stage, rx_in, tx, shared)));
        }

        let feeder = scope.spawn(move || {
            for (seq, bundle) in source.enumerate() {
                if shared.stop.load(Ordering::SeqCst) {
                    break;
                }
                if src_tx.send(Msg::Bundle(seq as u64, bundle)).is_err() {
                    break;
                }
                shared.enter();
            }
            let _ = src_tx.send(Msg::End);
        });

        let mut reorder: BTreeMap<u64, FrameBundle> = BTreeMap::new();
        let mut next_seq = 0u64;
        let mut delivered = 0u64;
        let mut sink_dead = false;
        while let Ok(Msg::Bundle(seq, bundle)) = prev_rx.recv() {
            shared.leave();
            if sink_dead {
                continue;
            }
            reorder.insert(seq, bundle);
            while let Some(ready) = reorder.remove(&next_seq) {
                next_seq += 1;
                if let Err(e) = sink(ready) {
                    shared.fail(e);
                    sink_dead = true;
                    reorder.clear();
                    break;
                }
                delivered += 1;
            }
        }

        feeder.join().expect("source thread");
        let stats: Vec<StageStats> = handles.into_iter().map(|h| h.join().expect("stage thread")).collect();
        (stats, delivered)
    });

    if let Some(err) = shared.failure.lock().expect("failure lock").take() {
        return Err(err);
    }
    let wall = begin.elapsed();
    Ok(RunStats {
        stages: stats,
        frames: delivered,
        wall_micros: wall.as_micros().min(u64::MAX as u128) as u64,
        throughput_fps: delivered as f64 / wall.as_secs_f64().max(1e-12),
        peak_in_flight: shared.peak.load(Ordering::SeqCst),
        in_flight_limit: limit,
    })
}

/// Runs the same stage set on the calling thread, stepping stages
/// round-robin (downstream first) with the same capacity limits. Output
/// content is identical to the concurrent mode.
pub fn run_pipeline_sequential(
    mut stages: Vec<StageSpec>,
    source: impl Iterator<Item = FrameBundle>,
    mut sink: impl FnMut(FrameBundle) -> Result<()>,
) -> Result<RunStats> {
    let limit = validate_stages(&stages)?;
    let caps: Vec<usize> = stages.iter().map(|s| s.capacity).collect();
    let n = stages.len();
    let mut stats: Vec<StageStats> = stages
        .iter()
        .map(|s| StageStats { name: s.name.as_str(), frames: 0, latency: LatencyHistogram::default() })
        .collect();
    let mut queues: Vec<VecDeque<(u64, FrameBundle)>> = (0..=n).map(|_| VecDeque::new()).collect();
    let mut source = source.peekable();
    let mut reorder: BTreeMap<u64, FrameBundle> = BTreeMap::new();
    let mut next_seq = 0u64;
    let mut seq = 0u64;
    let mut delivered = 0u64;
    let mut peak: i64 = 0;
    let begin = Instant::now();

    loop {
        let mut progressed = false;
        if queues[0].len() < caps[0] {
            if let Some(bundle) = source.next() {
                queues[0].push_back((seq, bundle));
                seq += 1;
                progressed = true;
            }
        }
        for i in (0..n).rev() {
            let room = i + 1 == n || queues[i + 1].len() < caps[i + 1];
            if !room {
                continue;
            }
            if let Some((s, bundle)) = queues[i].pop_front() {
                let frame = bundle.frame;
                let t0 = Instant::now();
                let out = (stages[i].worker)(bundle).map_err(|e| Error::Stage {
                    stage: StageName::ORDER[i].as_str(),
                    frame,
                    message: e.to_string(),
                })?;
                stats[i].latency.record(t0.elapsed());
                stats[i].frames += 1;
                queues[i + 1].push_back((s, out));
                progressed = true;
            }
        }
        while let Some((s, bundle)) = queues[n].pop_front() {
            reorder.insert(s, bundle);
        }
        while let Some(bundle) = reorder.remove(&next_seq) {
            next_seq += 1;
            sink(bundle)?;
            delivered += 1;
        }
        let in_flight: i64 = queues.iter().map(|q| q.len() as i64).sum();
        peak = peak.max(in_flight);
        if !progressed && in_flight == 0 && source.peek().is_none() {
            break;
        }
    }

    let wall = begin.elapsed();
    Ok(RunStats {
        stages: stats,
        frames: delivered,
        wall_micros: wall.as_micros().min(u64::MAX as u128) as u64,
        throughput_fps: delivered as f64 / wall.as_secs_f64().max(1e-12),
        peak_in_flight: peak,
        in_flight_limit: limit,
    })
}

/// Detection confidence floor: candidates below it never enter the
/// pose stages.
pub const DETECTION_FLOOR: f64 = 0.1;

/// Replay detector over a precomputed per-frame table. Unknown frames
/// are an error; detections under the confidence floor are dropped.
pub fn file_detector(
    table: FrameDetections,
) -> impl FnMut(FrameBundle) -> Result<FrameBundle> + Send {
    move |mut bundle: FrameBundle| {
        let rows = table.get(&bundle.frame).ok_or(Error::MissingFrame(bundle.frame))?;
        for (bbox, emb) in rows {
            if bbox.score < DETECTION_FLOOR {
                continue;
            }
            bundle.detections.push(*bbox);
            bundle.embeddings.push(emb.clone());
        }
        Ok(bundle)
    }
}

/// Replay pose backend: hands out stored heatmaps in crop order, one
/// per detection across the whole run.
pub fn file_pose_backend(records: Vec<Heatmap>) -> impl FnMut(&FrameBundle) -> Result<Heatmap> + Send {
    let mut cursor = 0usize;
    move |bundle: &FrameBundle| {
        let Some(record) = records.get(cursor) else {
            return Err(Error::MissingFrame(bundle.frame));
        };
        cursor += 1;
        Ok(record.clone())
    }
}

/// Configuration of a file-driven replay run.
#[derive(Debug, Clone)]
pub struct ReplayConfig {
    pub layout: Arc<SkeletonLayout>,
    /// Heatmap grid the crop transforms assume; decoding re-checks it
    /// against each record.
    pub grid_width: usize,
    pub grid_height: usize,
    /// Suppression parameters; `None` keeps every pose.
    pub nms: Option<NmsParams>,
    /// Tracking configuration; `None` disables tracking.
    pub track: Option<MsimConfig>,
    pub queue_capacity: usize,
}

impl ReplayConfig {
    pub fn new(layout: Arc<SkeletonLayout>) -> Self {
        Self {
            layout,
            grid_width: 48,
            grid_height: 64,
            nms: None,
            track: None,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

/// Builds the five replay stages over preloaded artifacts. The load
/// stage stands in for frame acquisition and passes bundles through.
pub fn replay_stages(
    detections: FrameDetections,
    heatmaps: Vec<Heatmap>,
    cfg: &ReplayConfig,
) -> Result<Vec<StageSpec>> {
    if let Some(nms) = &cfg.nms {
        nms.validate()?;
    }
    if let Some(track) = &cfg.track {
        track.validate()?;
    }
    let cap = cfg.queue_capacity;
    let layout = cfg.layout.clone();
    let (grid_w, grid_h) = (cfg.grid_width, cfg.grid_height);
    let mut backend = file_pose_backend(heatmaps);
    let mut pool = cfg.track.is_some().then(TrackPool::new);
    let track_cfg = cfg.track.clone();
    let nms = cfg.nms;

    let transform = move |mut bundle: FrameBundle| -> Result<FrameBundle> {
        for det in &bundle.detections {
            bundle.crops.push(CropTransform::for_box(*det, grid_w, grid_h)?);
        }
        Ok(bundle)
    };
    let pose = move |mut bundle: FrameBundle| -> Result<FrameBundle> {
        let mut poses = Vec::with_capacity(bundle.crops.len());
        for crop in &bundle.crops {
            let heatmap = backend(&bundle)?;
            poses.push(decode_pose(&heatmap, layout.clone(), crop)?);
            bundle.heatmaps.push(heatmap);
        }
        bundle.poses = Some(poses);
        if let (Some(pool), Some(track_cfg)) = (pool.as_mut(), track_cfg.as_ref()) {
            bundle.track_links = Some(msim_step(&bundle, pool, track_cfg)?);
        }
        Ok(bundle)
    };
    let post = move |mut bundle: FrameBundle| -> Result<FrameBundle> {
        let Some(params) = nms else { return Ok(bundle) };
        let poses = bundle.poses.take().unwrap_or_default();
        let kept = pose_nms_indices(&poses, &params)?;
        if let Some(links) = bundle.track_links.take() {
            let by_pose: BTreeMap<usize, u64> = links.into_iter().collect();
            bundle.track_links = Some(
                kept.iter()
                    .enumerate()
                    .filter_map(|(new_idx, old_idx)| by_pose.get(old_idx).map(|&id| (new_idx, id)))
                    .collect(),
            );
        }
        bundle.poses = Some(kept.into_iter().map(|i| poses[i].clone()).collect());
        Ok(bundle)
    };

    Ok(vec![
        StageSpec::identity(StageName::Load, cap)?,
        StageSpec::new(StageName::Detect, cap, file_detector(detections))?,
        StageSpec::new(StageName::Transform, cap, transform)?,
        StageSpec::new(StageName::Pose, cap, pose)?,
        StageSpec::new(StageName::Post, cap, post)?,
    ])
}
