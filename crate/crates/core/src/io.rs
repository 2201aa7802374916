//! File formats shared by the command-line tools and the pipeline stubs.
//!
//! Heatmaps travel in a binary container; everything else is JSON or
//! JSON lines. Boxes in our own formats are corner-form
//! `[x_min, y_min, x_max, y_max]`; COCO records keep their native
//! `[x, y, width, height]`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ImagePoses;
use crate::geometry::{DetectionBox, Heatmap, HeatmapKind, Keypoint, Pose, SkeletonLayout};
use crate::track::{IdentityEmbedding, TrackedFrame, TrackedPose};

pub const HMAP_MAGIC: [u8; 4] = *b"HMAP";

/// Writes heatmaps back to back: per record a magic tag, little-endian
/// u32 joints/height/width, a u8 kind code, then row-major f32 values.
pub fn write_heatmaps(path: impl AsRef<Path>, heatmaps: &[Heatmap]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for hm in heatmaps {
        w.write_all(&HMAP_MAGIC)?;
        w.write_all(&(hm.joints() as u32).to_le_bytes())?;
        w.write_all(&(hm.height() as u32).to_le_bytes())?;
        w.write_all(&(hm.width() as u32).to_le_bytes())?;
        w.write_all(&[hm.kind().code()])?;
        for v in hm.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_heatmaps(path: impl AsRef<Path>) -> Result<Vec<Heatmap>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        let mut magic = [0u8; 4];
        match r.read_exact(&mut magic) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        if magic != HMAP_MAGIC {
            return Err(Error::Format("bad heatmap magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            r.read_exact(&mut u32buf)?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        let mut kind_code = [0u8; 1];
        r.read_exact(&mut kind_code)?;
        let kind = HeatmapKind::from_code(kind_code[0])?;
        let [joints, height, width] = dims;
        let count = joints
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Format("heatmap dimensions overflow".into()))?;
        let mut data = Vec::with_capacity(count);
        let mut f32buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut f32buf)?;
            data.push(f32::from_le_bytes(f32buf) as f64);
        }
        out.push(Heatmap::new(joints, height, width, kind, data)?);
    }
    Ok(out)
}

/// One detector output line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: u64,
    /// Corner form `[x_min, y_min, x_max, y_max]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default)]
    pub category: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl DetectionRecord {
    pub fn to_box(&self) -> Result<DetectionBox> {
        DetectionBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3], self.score, self.category)
    }
}

pub fn write_detections(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Detections grouped by frame, each box with its optional identity embedding.
pub type FrameDetections = BTreeMap<u64, Vec<(DetectionBox, Option<IdentityEmbedding>)>>;

/// Groups detection records by frame, validating embeddings.
pub fn detections_by_frame(records: &[DetectionRecord]) -> Result<FrameDetections> {
    let mut out = FrameDetections::new();
    for rec in records {
        let emb = match &rec.embedding {
            Some(values) => Some(IdentityEmbedding::new(values.clone())?),
            None => None,
        };
        out.entry(rec.frame).or_default().push((rec.to_box()?, emb));
    }
    Ok(out)
}

/// One COCO-keypoint-format record: results style, with confidences in
/// the visibility slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoRecord {
    pub image_id: i64,
    pub category_id: u32,
    /// Flat `[x, y, v]` triplets.
    pub keypoints: Vec<f64>,
    pub score: f64,
    /// COCO `[x, y, width, height]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

impl CocoRecord {
    pub fn from_pose(image_id: i64, pose: &Pose) -> Self {
        let mut keypoints = Vec::with_capacity(pose.keypoints.len() * 3);
        for k in &pose.keypoints {
            keypoints.extend([k.x, k.y, k.confidence]);
        }
        let b = &pose.bbox;
        Self {
            image_id,
            category_id: b.category.max(1),
            keypoints,
            score: pose.score,
            bbox: Some([b.x_min, b.y_min, b.width(), b.height()]),
        }
    }

    pub fn to_pose(&self, layout: &Arc<SkeletonLayout>) -> Result<Pose> {
        if self.keypoints.len() != layout.joint_count() * 3 {
            return Err(Error::JointCountMismatch {
                expected: layout.joint_count() * 3,
                got: self.keypoints.len(),
            });
        }
        // The v slot is a confidence in results files but a 0/1/2
        // visibility flag in annotations; saturating keeps both labeled.
        let keypoints: Vec<Keypoint> =
            self.keypoints.chunks_exact(3).map(|t| Keypoint::new(t[0], t[1], t[2].clamp(0.0, 1.0))).collect();
        let bbox = match self.bbox {
            Some([x, y, w, h]) => DetectionBox::new(x, y, x + w, y + h, self.score, self.category_id)?,
            None => {
                let provisional = Pose::new(layout.clone(), keypoints.clone(), self.score, unit_box())?;
                provisional
                    .tight_bbox(self.score, self.category_id)
                    .ok_or_else(|| Error::Format("record lacks both bbox and labeled keypoints".into()))?
            }
        };
        Pose::new(layout.clone(), keypoints, self.score, bbox)
    }
}

fn unit_box() -> DetectionBox {
    DetectionBox::new(0.0, 0.0, 1.0, 1.0, 1.0, 1).expect("static box")
}

/// Reads COCO records from either a JSON array, a JSON lines file, or a
/// full annotation file carrying an `annotations` array.
pub fn read_coco_records(path: impl AsRef<Path>) -> Result<Vec<CocoRecord>> {
    #[derive(Deserialize)]
    struct GtAnnotation {
        image_id: i64,
        category_id: u32,
        keypoints: Vec<f64>,
        #[serde(default)]
        score: Option<f64>,
        #[serde(default)]
        bbox: Option<[f64; 4]>,
    }
    #[derive(Deserialize)]
    struct GtFile {
        annotations: Vec<GtAnnotation>,
    }
    let text = std::fs::read_to_string(path)?;
    let trimmed = text.trim_start();
    let raw: Vec<GtAnnotation> = if trimmed.starts_with('[') {
        serde_json::from_str(&text)?
    } else if let Ok(file) = serde_json::from_str::<GtFile>(&text) {
        file.annotations
    } else {
        let mut out = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(line)?);
        }
        out
    };
    Ok(raw
        .into_iter()
        .map(|a| CocoRecord {
            image_id: a.image_id,
            category_id: a.category_id,
            keypoints: a.keypoints,
            score: a.score.unwrap_or(1.0),
            bbox: a.bbox,
        })
        .collect())
}

/// Groups COCO records into per-image pose lists, ordered by image id.
pub fn coco_to_images(records: &[CocoRecord], layout: &Arc<SkeletonLayout>) -> Result<Vec<ImagePoses>> {
    let mut by_image: BTreeMap<i64, Vec<Pose>> = BTreeMap::new();
    for rec in records {
        by_image.entry(rec.image_id).or_default().push(rec.to_pose(layout)?);
    }
    Ok(by_image.into_iter().map(|(image_id, poses)| ImagePoses { image_id, poses }).collect())
}

pub fn write_coco_jsonl(path: impl AsRef<Path>, records: &[CocoRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One tracked pose line: `{frame, track_id, box, keypoints, score}`
/// with flat `[x, y, confidence]` keypoint triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u64,
    pub track_id: u64,
    /// Corner form `[x_min, y_min, x_max, y_max]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub keypoints: Vec<f64>,
    pub score: f64,
}

pub fn write_track_frames(path: impl AsRef<Path>, frames: &[TrackedFrame]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for frame in frames {
        for tp in &frame.poses {
            let b = &tp.pose.bbox;
            let mut keypoints = Vec::with_capacity(tp.pose.keypoints.len() * 3);
            for k in &tp.pose.keypoints {
                keypoints.extend([k.x, k.y, k.confidence]);
            }
            let rec = TrackRecord {
                frame: frame.frame,
                track_id: tp.track_id,
                bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
                keypoints,
                score: tp.pose.score,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_track_frames(path: impl AsRef<Path>, layout: &Arc<SkeletonLayout>) -> Result<Vec<TrackedFrame>> {
    let r = BufReader::new(File::open(path)?);
    let mut by_frame: BTreeMap<u64, Vec<TrackedPose>> = BTreeMap::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrackRecord = serde_json::from_str(&line)?;
        if rec.keypoints.len() != layout.joint_count() * 3 {
            return Err(Error::JointCountMismatch {
                expected: layout.joint_count() * 3,
                got: rec.keypoints.len(),
            });
        }
        let keypoints: Vec<Keypoint> =
            rec.keypoints.chunks_exact(3).map(|t| Keypoint::new(t[0], t[1], t[2])).collect();
        let bbox = DetectionBox::new(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3], rec.score, 0)?;
        let pose = Pose::new(layout.clone(), keypoints, rec.score, bbox)?;
        by_frame.entry(rec.frame).or_default().push(TrackedPose { track_id: rec.track_id, pose });
    }
    Ok(by_frame.into_iter().map(|(frame, poses)| TrackedFrame { frame, poses }).collect())
}

/// Writes one `frame_NNNNNNNNNNNN_keypoints.json` per frame in the
/// familiar per-frame people layout; `person_id` is -1 without tracking.
pub fn write_openpose_dir(dir: impl AsRef<Path>, frames: &[TrackedFrame]) -> Result<()> {
    #[derive(Serialize)]
    struct Person {
        person_id: [i64; 1],
        pose_keypoints_2d: Vec<f64>,
    }
    #[derive(Serialize)]
    struct FrameFile {
        version: f64,
        people: Vec<Person>,
    }
    std::fs::create_dir_all(&dir)?;
    for frame in frames {
        let people = frame
            .poses
            .iter()
            .map(|tp| {
                let mut flat = Vec::with_capacity(tp.pose.keypoints.len() * 3);
                for k in &tp.pose.keypoints {
                    flat.extend([k.x, k.y, k.confidence]);
                }
                Person {
                    person_id: [if tp.track_id == 0 { -1 } else { tp.track_id as i64 }],
                    pose_keypoints_2d: flat,
                }
            })
            .collect();
        let file = FrameFile { version: 1.3, people };
        let path = dir.as_ref().join(format!("frame_{:012}_keypoints.json", frame.frame));
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &file)?;
        w.flush()?;
    }
    Ok(())
}

/// MOT-challenge-style CSV rows:
/// `frame,id,left,top,width,height,score,-1,-1,-1` with 1-based frames.
pub fn write_mot_csv(path: impl AsRef<Path>, frames: &[TrackedFrame]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for frame in frames {
        for tp in &frame.poses {
            let b = &tp.pose.bbox;
            writeln!(
                w,
                "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},-1,-1,-1",
                frame.frame + 1,
                tp.track_id,
                b.x_min,
                b.y_min,
                b.width(),
                b.height(),
                tp.pose.score
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One observed detector offset: the true box and the detector's box,
/// both in corner form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetRecord {
    pub part: String,
    pub gt: [f64; 4],
    pub det: [f64; 4],
}

pub fn write_offsets(path: impl AsRef<Path>, records: &[OffsetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_offsets(path: impl AsRef<Path>) -> Result<Vec<OffsetRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<OffsetRecord>(&line)?);
    }
    Ok(out)
}

/// Resolves a layout argument: a built-in name or a path to a layout
/// JSON descriptor.
pub fn load_layout(spec: &str) -> Result<Arc<SkeletonLayout>> {
    if let Some(layout) = SkeletonLayout::builtin(spec) {
        return Ok(layout);
    }
    if Path::new(spec).exists() {
        let text = std::fs::read_to_string(spec)?;
        return Ok(Arc::new(SkeletonLayout::from_json(&text)?));
    }
    Err(Error::InvalidLayout(format!("unknown layout '{spec}' (not a built-in, not a file)")))
}
