//! Parametric pose NMS: redundancy elimination driven by a learned
//! pose-similarity measure instead of box overlap alone.
//!
//! The distance between two candidates combines a confidence term over
//! joints that land inside a window around the reference candidate's
//! joints and a spatial proximity term; candidates too similar to a kept
//! reference are eliminated greedily in score order. All four parameters
//! can be searched on a validation set, see [`optimize_params`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{map_eval, ImagePoses, OksThresholds};
use crate::geometry::{crop_box_around, Pose};

/// Joint windows span this fraction of the candidate's box extent.
pub const NMS_WINDOW_FRACTION: f64 = 0.1;

/// Parameters of the pose distance and elimination rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsParams {
    /// Confidence saturation scale of the joint-confidence term.
    pub sigma1: f64,
    /// Spatial falloff (squared-distance scale) of the proximity term.
    pub sigma2: f64,
    /// Weight of the proximity term.
    pub lambda: f64,
    /// Elimination threshold: candidates whose distance to a kept
    /// reference reaches it are dropped.
    pub eta: f64,
}

impl NmsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 > 0.0 && self.sigma1.is_finite() && self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument("sigma1 and sigma2 must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        Ok(())
    }

    /// Conservative defaults for a given joint count: near-duplicates of a
    /// confident pose score around `2m` under these settings while distinct
    /// people stay near zero, so half the joint count splits them cleanly.
    pub fn default_for_joint_count(m: usize) -> Self {
        Self { sigma1: 0.3, sigma2: 100.0, lambda: 1.0, eta: 0.5 * m as f64 }
    }

    /// Constants tuned for poses rescaled to a unit box, where keypoint
    /// offsets are fractions instead of pixels. Eta is unused there.
    pub fn default_normalized() -> Self {
        Self { sigma1: 0.3, sigma2: 0.1, lambda: 1.0, eta: 1.0 }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: NmsParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }
}

fn check_pair(a: &Pose, b: &Pose) -> Result<()> {
    if a.joint_count() != b.joint_count() {
        return Err(Error::JointCountMismatch { expected: a.joint_count(), got: b.joint_count() });
    }
    Ok(())
}

/// Confidence similarity: product of saturated joint confidences, summed
/// over joints where `b`'s keypoint falls inside the window around `a`'s
/// keypoint. The window derives from `a`'s box, so the measure is
/// asymmetric in general.
pub fn k_sim(a: &Pose, b: &Pose, sigma1: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(sigma1 > 0.0) {
        return Err(Error::InvalidArgument("sigma1 must be positive".into()));
    }
    let mut sum = 0.0;
    for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
        let window = crop_box_around(ka, &a.bbox, NMS_WINDOW_FRACTION)?;
        if window.contains(kb.x, kb.y) {
            sum += (ka.confidence / sigma1).tanh() * (kb.confidence / sigma1).tanh();
        }
    }
    Ok(sum)
}

/// Spatial similarity: Gaussian of the squared joint distance, summed over
/// all joints.
pub fn h_sim(a: &Pose, b: &Pose, sigma2: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument("sigma2 must be positive".into()));
    }
    let mut sum = 0.0;
    for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
        let d2 = (ka.x - kb.x).powi(2) + (ka.y - kb.y).powi(2);
        sum += (-d2 / sigma2).exp();
    }
    Ok(sum)
}

/// Combined similarity-shaped distance `k_sim + lambda * h_sim`. Large
/// values mean redundant candidates.
pub fn pose_distance(a: &Pose, b: &Pose, params: &NmsParams) -> Result<f64> {
    params.validate()?;
    Ok(k_sim(a, b, params.sigma1)? + params.lambda * h_sim(a, b, params.sigma2)?)
}

/// Greedy elimination: repeatedly keep the highest-scored remaining
/// candidate (ties resolve to the lower index) and drop every candidate
/// whose distance to it reaches `eta`. Returns indices into the input in
/// selection order, i.e. sorted by descending score.
pub fn pose_nms_indices(poses: &[Pose], params: &NmsParams) -> Result<Vec<usize>> {
    params.validate()?;
    if poses.is_empty() {
        return Ok(Vec::new());
    }
    for p in poses {
        check_pair(&poses[0], p)?;
    }
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&i, &j| poses[j].score.partial_cmp(&poses[i].score).unwrap().then(i.cmp(&j)));
    let mut alive = vec![true; poses.len()];
    let mut kept = Vec::new();
    for &ref_idx in &order {
        if !alive[ref_idx] {
            continue;
        }
        alive[ref_idx] = false;
        kept.push(ref_idx);
        for &cand in &order {
            if alive[cand] && pose_distance(&poses[cand], &poses[ref_idx], params)? >= params.eta {
                alive[cand] = false;
            }
        }
    }
    Ok(kept)
}

/// [`pose_nms_indices`] materialized: the surviving poses in descending
/// score order.
pub fn pose_nms(poses: &[Pose], params: &NmsParams) -> Result<Vec<Pose>> {
    Ok(pose_nms_indices(poses, params)?.into_iter().map(|i| poses[i].clone()).collect())
}

/// Baseline hard elimination on object keypoint similarity against the
/// kept reference, using the reference's box area as scale.
pub fn oks_nms(poses: &[Pose], threshold: f64) -> Result<Vec<Pose>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument("threshold must be in (0,1)".into()));
    }
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&i, &j| poses[j].score.partial_cmp(&poses[i].score).unwrap().then(i.cmp(&j)));
    let mut alive = vec![true; poses.len()];
    let mut kept = Vec::new();
    for pos in 0..order.len() {
        let ref_idx = order[pos];
        if !alive[ref_idx] {
            continue;
        }
        alive[ref_idx] = false;
        kept.push(poses[ref_idx].clone());
        for &cand in &order[pos + 1..] {
            if alive[cand] && crate::eval::oks(&poses[cand], &poses[ref_idx], poses[ref_idx].bbox.area())? >= threshold {
                alive[cand] = false;
            }
        }
    }
    Ok(kept)
}

/// Baseline score decay: instead of eliminating, every pose overlapping a
/// kept reference has its score multiplied by a Gaussian in the overlap.
/// Returns all poses rescored, descending.
pub fn soft_nms(poses: &[Pose], sigma: f64) -> Result<Vec<Pose>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let mut remaining: Vec<Pose> = poses.to_vec();
    let mut out = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if remaining[i].score > remaining[best].score {
                best = i;
            }
        }
        let picked = remaining.swap_remove(best);
        for p in remaining.iter_mut() {
            let overlap = crate::eval::oks(p, &picked, picked.bbox.area())?;
            p.score *= (-overlap * overlap / sigma).exp();
        }
        out.push(picked);
    }
    Ok(out)
}

/// One validation image for the parameter search: raw candidates and the
/// corresponding true poses.
#[derive(Debug, Clone)]
pub struct ValidationScene {
    pub candidates: Vec<Pose>,
    pub truths: Vec<Pose>,
}

/// Candidate values per parameter for [`optimize_params`].
#[derive(Debug, Clone)]
pub struct ParamGrids {
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
}

impl ParamGrids {
    /// Log grids for the softness scales, linear grids for the mix weight
    /// and the threshold; the threshold range tracks the joint count.
    pub fn default_for_joint_count(m: usize) -> Self {
        let log_grid: Vec<f64> = (0..10)
            .map(|i| (0.01f64.ln() + (10.0f64.ln() - 0.01f64.ln()) * i as f64 / 9.0).exp())
            .collect();
        let lambda = (0..11).map(|i| 0.5 * i as f64).collect();
        let m = m as f64;
        let eta = (0..20).map(|i| 0.1 * m + (2.0 * m - 0.1 * m) * i as f64 / 19.0).collect();
        Self { sigma1: log_grid.clone(), sigma2: log_grid, lambda, eta }
    }

    fn validate(&self) -> Result<()> {
        if self.sigma1.is_empty() || self.sigma2.is_empty() || self.lambda.is_empty() || self.eta.is_empty() {
            return Err(Error::EmptyInput("parameter grid"));
        }
        Ok(())
    }
}

fn validation_map(validation: &[ValidationScene], params: &NmsParams) -> Result<f64> {
    let mut preds = Vec::with_capacity(validation.len());
    let mut gts = Vec::with_capacity(validation.len());
    for (i, scene) in validation.iter().enumerate() {
        preds.push(ImagePoses { image_id: i as i64, poses: pose_nms(&scene.candidates, params)? });
        gts.push(ImagePoses { image_id: i as i64, poses: scene.truths.clone() });
    }
    Ok(map_eval(&preds, &gts, &OksThresholds::standard(), None)?.ap)
}

/// Alternating 2D grid search: one round tunes the two softness scales
/// with the mix weight and threshold fixed, then the reverse; rounds
/// repeat until a full round fails to improve validation precision or
/// `iters` rounds ran. Grid cells are scored in parallel; among equal
/// scores the earlier cell in row-major grid order wins, and the
/// incumbent survives ties outright.
pub fn optimize_params(
    validation: &[ValidationScene],
    init: NmsParams,
    grids: &ParamGrids,
    iters: usize,
) -> Result<NmsParams> {
    init.validate()?;
    grids.validate()?;
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation scenes"));
    }
    let mut best = init;
    let mut best_map = validation_map(validation, &best)?;
    for _ in 0..iters {
        let mut improved = false;
        for pass in 0..2 {
            let cells: Vec<NmsParams> = if pass == 0 {
                grids
                    .sigma1
                    .iter()
                    .flat_map(|&s1| grids.sigma2.iter().map(move |&s2| (s1, s2)))
                    .map(|(s1, s2)| NmsParams { sigma1: s1, sigma2: s2, ..best })
                    .collect()
            } else {
                grids
                    .lambda
                    .iter()
                    .flat_map(|&l| grids.eta.iter().map(move |&e| (l, e)))
                    .map(|(l, e)| NmsParams { lambda: l, eta: e, ..best })
                    .collect()
            };
            let scores: Vec<Result<f64>> =
                cells.par_iter().map(|p| validation_map(validation, p)).collect();
            for (cell, score) in cells.iter().zip(scores) {
                let s = score?;
                if s > best_map {
                    best_map = s;
                    best = *cell;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(best)
}
