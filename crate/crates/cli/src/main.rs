//! `posepipe`: file-driven front end over the pose pipeline crate.
//!
//! Subcommands map one-to-one onto library entry points: `run` replays
//! detection and heatmap artifacts through the five-stage pipeline,
//! `eval` scores COCO-format predictions or track files, `nms` filters
//! candidate poses, `pgpg` fits and samples detector-offset models,
//! `bench` measures pipeline throughput and `synth` writes generator
//! output in the formats `run` consumes.

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use posepipe_core::eval::{map_eval, mot_eval, OksThresholds};
use posepipe_core::geometry::DetectionBox;
use posepipe_core::io;
use posepipe_core::io::{CocoRecord, DetectionRecord};
use posepipe_core::pgpg::{
    bic_report, compute_offsets, fit_offset_model, sample_proposal, OffsetModel, OffsetSample, ProposalMode,
};
use posepipe_core::pipeline::{
    run_pipeline, run_pipeline_sequential, replay_stages, FrameBundle, ReplayConfig, RunStats,
    DEFAULT_QUEUE_CAPACITY,
};
use posepipe_core::posenms::{pose_nms_indices, NmsParams};
use posepipe_core::synth::{gen_trajectories, scene_to_replay, EmbeddingKind};
use posepipe_core::track::{MsimConfig, TrackedFrame, TrackedPose};
use posepipe_core::Pose;

#[derive(Parser)]
#[command(name = "posepipe", version, about = "Pose decoding, suppression, tracking and evaluation over file artifacts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay detections and heatmaps through the five-stage pipeline.
    Run(RunArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Suppress redundant candidate poses.
    Nms(NmsArgs),
    /// Detector-offset model fitting and proposal sampling.
    Pgpg {
        #[command(subcommand)]
        command: PgpgCommand,
    },
    /// Measure pipeline throughput on a generated scene.
    Bench(BenchArgs),
    /// Write a generated scene as replayable artifacts.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Detection JSON-lines file, one box per line.
    #[arg(long)]
    detections: PathBuf,
    /// Heatmap records, one stack per detection in file order.
    #[arg(long)]
    heatmaps: PathBuf,
    /// Built-in layout name or a layout JSON file.
    #[arg(long, default_value = "halpe136")]
    layout: String,
    /// Run identity tracking in the pose stage.
    #[arg(long)]
    track: bool,
    /// COCO-format result lines.
    #[arg(long)]
    out: PathBuf,
    /// Suppression parameter JSON `{sigma1, sigma2, lambda, eta}`;
    /// defaults to the layout's parameters.
    #[arg(long)]
    nms_params: Option<PathBuf>,
    /// Keep every decoded pose.
    #[arg(long)]
    no_nms: bool,
    /// Per-stage queue capacity.
    #[arg(long, default_value_t = DEFAULT_QUEUE_CAPACITY)]
    queue_cap: usize,
    /// Run all stages on one thread.
    #[arg(long)]
    sequential: bool,
    /// Heatmap grid width the crops assume.
    #[arg(long, default_value_t = 48)]
    grid_width: usize,
    /// Heatmap grid height the crops assume.
    #[arg(long, default_value_t = 64)]
    grid_height: usize,
    /// Track JSON-lines output; requires --track.
    #[arg(long)]
    track_out: Option<PathBuf>,
    /// Per-frame people-array JSON files.
    #[arg(long)]
    openpose_dir: Option<PathBuf>,
    /// MOT-challenge CSV rows.
    #[arg(long)]
    mot_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground truth: COCO records, or track lines with --mot.
    #[arg(long)]
    gt: PathBuf,
    /// Predictions in the same format as --gt.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "halpe136")]
    layout: String,
    /// Score per-joint tracking metrics instead of average precision.
    #[arg(long)]
    mot: bool,
    /// Match gate as a fraction of the truth's head segment.
    #[arg(long, default_value_t = 0.5)]
    pckh: f64,
    /// Restrict average precision to one named part group.
    #[arg(long)]
    part: Option<String>,
}

#[derive(Args)]
struct NmsArgs {
    /// Candidate poses, COCO records grouped by image id.
    #[arg(long)]
    input: PathBuf,
    /// Surviving poses, COCO records.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "halpe136")]
    layout: String,
    /// Parameter JSON; defaults to the layout's parameters.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PgpgCommand {
    /// Fit per-part offset mixtures from observed (truth, detector) pairs.
    Fit(PgpgFitArgs),
    /// Draw augmented proposal boxes around true boxes.
    Sample(PgpgSampleArgs),
}

#[derive(Args)]
struct PgpgFitArgs {
    /// Offset JSON-lines file `{part, gt:[4], det:[4]}`.
    #[arg(long)]
    offsets: PathBuf,
    /// Model JSON, one fitted model per part.
    #[arg(long)]
    out: PathBuf,
    /// Mixture components per part; omit to pick by information score.
    #[arg(long)]
    components: Option<usize>,
    /// Largest component count tried when picking automatically.
    #[arg(long, default_value_t = 4)]
    bic_max: usize,
}

#[derive(Args)]
struct PgpgSampleArgs {
    /// Model JSON from `pgpg fit`.
    #[arg(long)]
    model: PathBuf,
    /// True boxes as detection JSON-lines.
    #[arg(long)]
    boxes: PathBuf,
    /// Part whose model drives the sampling.
    #[arg(long)]
    part: String,
    /// Proposals drawn per input box.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SampleMode::Gmm)]
    mode: SampleMode,
    /// Sampled boxes as detection JSON-lines.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMode {
    Gmm,
    Uniform,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    people: usize,
    #[arg(long, default_value_t = 200)]
    frames: u64,
    #[arg(long, default_value = "halpe136")]
    layout: String,
    #[arg(long, default_value_t = DEFAULT_QUEUE_CAPACITY)]
    queue_cap: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    grid_width: usize,
    #[arg(long, default_value_t = 64)]
    grid_height: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    /// Pairwise orthogonal identity vectors.
    Orthogonal,
    /// One shared identity vector.
    Identical,
    /// No identity vectors.
    Absent,
}

impl From<EmbeddingArg> for EmbeddingKind {
    fn from(value: EmbeddingArg) -> Self {
        match value {
            EmbeddingArg::Orthogonal => EmbeddingKind::Orthogonal,
            EmbeddingArg::Identical => EmbeddingKind::Identical,
            EmbeddingArg::Absent => EmbeddingKind::Absent,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Receives detections.jsonl, heatmaps.hmap, truth_tracks.jsonl and
    /// truth_coco.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    people: usize,
    #[arg(long, default_value_t = 20)]
    frames: u64,
    /// Two people swap sides on a shared lane.
    #[arg(long)]
    crossing: bool,
    #[arg(long, value_enum, default_value_t = EmbeddingArg::Orthogonal)]
    embeddings: EmbeddingArg,
    /// Per-dimension noise on the identity vectors.
    #[arg(long, default_value_t = 0.0)]
    emb_noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "halpe136")]
    layout: String,
    #[arg(long, default_value_t = 48)]
    grid_width: usize,
    #[arg(long, default_value_t = 64)]
    grid_height: usize,
    /// Stddev of the rendered keypoint bumps, in grid cells.
    #[arg(long, default_value_t = 1.0)]
    bump_sigma: f64,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Nms(args) => nms_cmd(args),
        Command::Pgpg { command: PgpgCommand::Fit(args) } => pgpg_fit_cmd(args),
        Command::Pgpg { command: PgpgCommand::Sample(args) } => pgpg_sample_cmd(args),
        Command::Bench(args) => bench_cmd(args),
        Command::Synth(args) => synth_cmd(args),
    }
}

fn load_nms_params(path: Option<&PathBuf>, joint_count: usize) -> anyhow::Result<NmsParams> {
    let params = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let params: NmsParams = serde_json::from_str(&text)?;
            params.validate()?;
            params
        }
        None => NmsParams::default_for_joint_count(joint_count),
    };
    Ok(params)
}

/// Per-frame replay output: frame id, surviving poses, optional track links.
type ReplayRow = (u64, Vec<Pose>, Option<Vec<(usize, u64)>>);

fn run_cmd(args: RunArgs) -> anyhow::Result<()> {
    if args.track_out.is_some() && !args.track {
        bail!("--track-out requires --track");
    }
    let layout = io::load_layout(&args.layout)?;
    let records = io::read_detections(&args.detections)?;
    let by_frame = io::detections_by_frame(&records)?;
    let heatmaps = io::read_heatmaps(&args.heatmaps)?;

    let mut cfg = ReplayConfig::new(layout.clone());
    cfg.grid_width = args.grid_width;
    cfg.grid_height = args.grid_height;
    cfg.queue_capacity = args.queue_cap;
    cfg.nms = if args.no_nms { None } else { Some(load_nms_params(args.nms_params.as_ref(), layout.joint_count())?) };
    cfg.track = args.track.then(MsimConfig::default);

    let frame_ids: Vec<u64> = by_frame.keys().copied().collect();
    let stages = replay_stages(by_frame, heatmaps, &cfg)?;
    let source = frame_ids.into_iter().map(|f| FrameBundle::new(f, 0));

    let mut results: Vec<ReplayRow> = Vec::new();
    let mut sink = |b: FrameBundle| {
        results.push((b.frame, b.poses.unwrap_or_default(), b.track_links));
        Ok(())
    };
    let stats = if args.sequential {
        run_pipeline_sequential(stages, source, &mut sink)?
    } else {
        run_pipeline(stages, source, &mut sink)?
    };

    let mut coco = Vec::new();
    for (frame, poses, _) in &results {
        for pose in poses {
            coco.push(CocoRecord::from_pose(*frame as i64, pose));
        }
    }
    io::write_coco_jsonl(&args.out, &coco)?;

    if args.track {
        let frames: Vec<TrackedFrame> = results
            .iter()
            .map(|(frame, poses, links)| TrackedFrame {
                frame: *frame,
                poses: links
                    .as_deref()
                    .unwrap_or(&[])
                    .iter()
                    .map(|&(idx, id)| TrackedPose { track_id: id, pose: poses[idx].clone() })
                    .collect(),
            })
            .collect();
        if let Some(path) = &args.track_out {
            io::write_track_frames(path, &frames)?;
        }
        write_frame_exports(&args, &frames)?;
    } else if args.openpose_dir.is_some() || args.mot_csv.is_some() {
        // Track id 0 renders as the untracked marker downstream.
        let frames: Vec<TrackedFrame> = results
            .iter()
            .map(|(frame, poses, _)| TrackedFrame {
                frame: *frame,
                poses: poses.iter().map(|p| TrackedPose { track_id: 0, pose: p.clone() }).collect(),
            })
            .collect();
        write_frame_exports(&args, &frames)?;
    }

    report_stats(&stats);
    Ok(())
}

fn write_frame_exports(args: &RunArgs, frames: &[TrackedFrame]) -> anyhow::Result<()> {
    if let Some(dir) = &args.openpose_dir {
        io::write_openpose_dir(dir, frames)?;
    }
    if let Some(path) = &args.mot_csv {
        io::write_mot_csv(path, frames)?;
    }
    Ok(())
}

fn report_stats(stats: &RunStats) {
    eprintln!(
        "{} frames in {:.3}s, {:.1} fps, peak in flight {} of {}",
        stats.frames,
        stats.wall_micros as f64 / 1e6,
        stats.throughput_fps,
        stats.peak_in_flight,
        stats.in_flight_limit
    );
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<()> {
    let layout = io::load_layout(&args.layout)?;
    let report = if args.mot {
        let pred = io::read_track_frames(&args.pred, &layout)?;
        let gt = io::read_track_frames(&args.gt, &layout)?;
        let report = mot_eval(&pred, &gt, args.pckh)?;
        let switches: usize = report.joints.iter().map(|j| j.switches).sum();
        let misses: usize = report.joints.iter().map(|j| j.misses).sum();
        let false_positives: usize = report.joints.iter().map(|j| j.false_positives).sum();
        json!({
            "mota": report.mota,
            "motp": report.motp,
            "precision": report.precision,
            "recall": report.recall,
            "switches": switches,
            "misses": misses,
            "false_positives": false_positives,
        })
    } else {
        let pred = io::coco_to_images(&io::read_coco_records(&args.pred)?, &layout)?;
        let gt = io::coco_to_images(&io::read_coco_records(&args.gt)?, &layout)?;
        let report = map_eval(&pred, &gt, &OksThresholds::standard(), args.part.as_deref())?;
        json!({
            "ap": report.ap,
            "ap50": report.ap50,
            "ap75": report.ap75,
            "ap_medium": report.ap_medium,
            "ap_large": report.ap_large,
            "ar": report.ar,
        })
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn nms_cmd(args: NmsArgs) -> anyhow::Result<()> {
    let layout = io::load_layout(&args.layout)?;
    let params = load_nms_params(args.params.as_ref(), layout.joint_count())?;
    let records = io::read_coco_records(&args.input)?;
    let images = io::coco_to_images(&records, &layout)?;
    let mut kept_records = Vec::new();
    let mut candidates = 0usize;
    for image in &images {
        candidates += image.poses.len();
        for idx in pose_nms_indices(&image.poses, &params)? {
            kept_records.push(CocoRecord::from_pose(image.image_id, &image.poses[idx]));
        }
    }
    io::write_coco_jsonl(&args.out, &kept_records)?;
    eprintln!("kept {} of {} poses", kept_records.len(), candidates);
    Ok(())
}

fn pgpg_fit_cmd(args: PgpgFitArgs) -> anyhow::Result<()> {
    let records = io::read_offsets(&args.offsets)?;
    let mut samples = Vec::with_capacity(records.len());
    for rec in &records {
        let gt = DetectionBox::new(rec.gt[0], rec.gt[1], rec.gt[2], rec.gt[3], 1.0, 1)?;
        let det = DetectionBox::new(rec.det[0], rec.det[1], rec.det[2], rec.det[3], 1.0, 1)?;
        samples.push(compute_offsets(&gt, &det, rec.part.clone()));
    }
    let parts: BTreeSet<String> = samples.iter().map(|s| s.part.clone()).collect();
    let mut models = Vec::with_capacity(parts.len());
    for part in &parts {
        let components = match args.components {
            Some(k) => k,
            None => pick_components(&samples, part, args.bic_max)?,
        };
        models.push(fit_offset_model(&samples, part, components)?);
        eprintln!("{}: {} samples, {} components", part, samples.iter().filter(|s| &s.part == part).count(), components);
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&models)?)?;
    Ok(())
}

/// Smallest summed information score over 1..=max_k, skipping counts the
/// sample size cannot support.
fn pick_components(samples: &[OffsetSample], part: &str, max_k: usize) -> anyhow::Result<usize> {
    let entries = bic_report(samples, part, max_k)?;
    entries
        .iter()
        .min_by(|a, b| (a.bic_x + a.bic_y).total_cmp(&(b.bic_x + b.bic_y)))
        .map(|e| e.components)
        .context("no feasible component count")
}

fn pgpg_sample_cmd(args: PgpgSampleArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let models: Vec<OffsetModel> = match serde_json::from_str::<Vec<OffsetModel>>(&text) {
        Ok(models) => models,
        Err(_) => vec![OffsetModel::from_json(&text)?],
    };
    for model in &models {
        model.validate()?;
    }
    let model = models
        .iter()
        .find(|m| m.part == args.part)
        .with_context(|| format!("model file has no part {:?}", args.part))?;
    let mode = match args.mode {
        SampleMode::Gmm => ProposalMode::Gmm,
        SampleMode::Uniform => ProposalMode::Uniform,
    };
    let boxes = io::read_detections(&args.boxes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut out = Vec::with_capacity(boxes.len() * args.count);
    for rec in &boxes {
        let gt = rec.to_box()?;
        for _ in 0..args.count {
            let prop = sample_proposal(&gt, model, mode, &mut rng)?;
            out.push(DetectionRecord {
                frame: rec.frame,
                bbox: [prop.x_min, prop.y_min, prop.x_max, prop.y_max],
                score: rec.score,
                category: rec.category,
                embedding: None,
            });
        }
    }
    io::write_detections(&args.out, &out)?;
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> anyhow::Result<()> {
    let layout = io::load_layout(&args.layout)?;
    let scene = gen_trajectories(&layout, args.people, args.frames, false, EmbeddingKind::Orthogonal, &[], 0.0, args.seed)?;
    let (detections, heatmaps) = scene_to_replay(&scene, args.grid_width, args.grid_height, 1.0)?;
    let mut cfg = ReplayConfig::new(layout.clone());
    cfg.grid_width = args.grid_width;
    cfg.grid_height = args.grid_height;
    cfg.queue_capacity = args.queue_cap;
    cfg.nms = Some(NmsParams::default_for_joint_count(layout.joint_count()));
    cfg.track = Some(MsimConfig::default());
    let frame_ids: Vec<u64> = detections.keys().copied().collect();
    let source = || frame_ids.clone().into_iter().map(|f| FrameBundle::new(f, 0));

    let concurrent = run_pipeline(
        replay_stages(detections.clone(), heatmaps.clone(), &cfg)?,
        source(),
        |_| Ok(()),
    )?;
    let sequential = run_pipeline_sequential(replay_stages(detections, heatmaps, &cfg)?, source(), |_| Ok(()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "concurrent": concurrent,
            "sequential": sequential,
        }))?
    );
    Ok(())
}

fn synth_cmd(args: SynthArgs) -> anyhow::Result<()> {
    let layout = io::load_layout(&args.layout)?;
    let scene = gen_trajectories(
        &layout,
        args.people,
        args.frames,
        args.crossing,
        args.embeddings.into(),
        &[],
        args.emb_noise,
        args.seed,
    )?;
    let (detections, heatmaps) = scene_to_replay(&scene, args.grid_width, args.grid_height, args.bump_sigma)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let mut records = Vec::new();
    for (&frame, dets) in &detections {
        for (bbox, emb) in dets {
            records.push(DetectionRecord {
                frame,
                bbox: [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max],
                score: bbox.score,
                category: bbox.category,
                embedding: emb.as_ref().map(|e| e.values().to_vec()),
            });
        }
    }
    io::write_detections(args.out_dir.join("detections.jsonl"), &records)?;
    io::write_heatmaps(args.out_dir.join("heatmaps.hmap"), &heatmaps)?;
    io::write_track_frames(args.out_dir.join("truth_tracks.jsonl"), &scene.gt)?;
    let coco: Vec<CocoRecord> = scene
        .gt
        .iter()
        .flat_map(|f| f.poses.iter().map(|tp| CocoRecord::from_pose(f.frame as i64, &tp.pose)))
        .collect();
    io::write_coco_jsonl(args.out_dir.join("truth_coco.jsonl"), &coco)?;
    eprintln!("{} frames, {} detections, {} heatmap stacks", scene.frames.len(), records.len(), heatmaps.len());
    Ok(())
}
