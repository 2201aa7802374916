//! Building blocks for multi-person pose pipelines: heatmap decoding with
//! width-invariant confidences, parametric pose NMS, proposal augmentation,
//! multi-stage identity matching, OKS/MOT evaluation and a bounded-queue
//! concurrent runner.
//!
//! The crate is organized so that each stage of a whole-image pipeline maps to
//! one module:
//!
//! * [`geometry`] - skeleton layouts, keypoints, poses, boxes and heatmaps
//! * [`decode`] - logit normalization, soft-argmax decoding and gradient rules
//! * [`posenms`] - parametric pose NMS and its data-driven parameter search
//! * [`pgpg`] - detector-offset modeling and proposal resampling
//! * [`track`] - identity embeddings, Kalman prediction and multi-stage matching
//! * [`eval`] - OKS/mAP pose evaluation and per-joint MOT metrics
//! * [`synth`] - scene generators and brute-force reference implementations
//! * [`pipeline`] - five-stage concurrent runner with back-pressure
//! * [`io`] - file formats shared by the CLI and the test fixtures

pub mod decode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod pgpg;
pub mod pipeline;
pub mod posenms;
pub mod synth;
pub mod track;

pub use error::{Error, Result};
pub use geometry::{crop_box_around, iou, DetectionBox, Heatmap, HeatmapKind, Keypoint, Pose, SkeletonLayout};
