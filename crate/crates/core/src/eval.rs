//! Keypoint and tracking metrics: OKS, averaged precision over OKS
//! thresholds with part breakdowns, and joint-wise MOT accounting gated
//! by head-normalized keypoint correctness.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Pose, SkeletonLayout};
use crate::track::TrackedFrame;

/// Square of the side length separating medium from large instances.
pub const AREA_SPLIT: f64 = 96.0 * 96.0;

/// Strictly increasing OKS thresholds in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct OksThresholds(Vec<f64>);

impl OksThresholds {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("thresholds"));
        }
        let ok = values.windows(2).all(|w| w[0] < w[1]) && values.iter().all(|t| *t > 0.0 && *t < 1.0);
        if !ok {
            return Err(Error::InvalidArgument("thresholds must be strictly increasing within (0,1)".into()));
        }
        Ok(Self(values))
    }

    /// 0.50 to 0.95 in steps of 0.05.
    pub fn standard() -> Self {
        Self((0..10).map(|i| 0.5 + 0.05 * i as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    fn position(&self, t: f64) -> Option<usize> {
        self.0.iter().position(|v| (v - t).abs() < 1e-9)
    }
}

/// Object keypoint similarity restricted to a joint subset. `None` when
/// the subset has no labeled truth joints.
fn oks_subset(pred: &Pose, gt: &Pose, gt_area: f64, joints: &[usize], k: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &j in joints {
        let g = &gt.keypoints[j];
        if !g.is_labeled() {
            continue;
        }
        let p = &pred.keypoints[j];
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        sum += (-d2 / (2.0 * gt_area * k[j] * k[j])).exp();
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Object keypoint similarity: mean over labeled truth joints of a
/// Gaussian in the prediction distance, scaled by the instance area and
/// the per-joint tolerance constant.
pub fn oks(pred: &Pose, gt: &Pose, gt_area: f64) -> Result<f64> {
    if pred.joint_count() != gt.joint_count() {
        return Err(Error::JointCountMismatch { expected: gt.joint_count(), got: pred.joint_count() });
    }
    if !(gt_area > 0.0 && gt_area.is_finite()) {
        return Err(Error::InvalidArgument("gt_area must be positive".into()));
    }
    let joints: Vec<usize> = (0..gt.joint_count()).collect();
    oks_subset(pred, gt, gt_area, &joints, gt.layout().oks_k()).ok_or(Error::EmptyInput("labeled truth joints"))
}

/// Poses grouped under one image id.
#[derive(Debug, Clone)]
pub struct ImagePoses {
    pub image_id: i64,
    pub poses: Vec<Pose>,
}

/// Precision metrics averaged over OKS thresholds. `ap50`/`ap75` are NaN
/// when the corresponding threshold is absent, `ap_medium`/`ap_large`
/// are NaN when the area bucket holds no truth instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar: f64,
}

#[derive(Debug, Clone)]
struct ImageCase {
    /// OKS of every (prediction, truth) pair, pred-major.
    oks: Vec<f64>,
    pred_scores: Vec<f64>,
    pred_areas: Vec<f64>,
    gt_areas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AreaBucket {
    All,
    Medium,
    Large,
}

impl AreaBucket {
    fn admits(self, area: f64) -> bool {
        match self {
            AreaBucket::All => true,
            AreaBucket::Medium => area < AREA_SPLIT,
            AreaBucket::Large => area >= AREA_SPLIT,
        }
    }
}

fn build_cases(
    preds: &[ImagePoses],
    gts: &[ImagePoses],
    part: Option<&str>,
) -> Result<Vec<ImageCase>> {
    let mut seen = BTreeSet::new();
    for img in gts {
        if !seen.insert(img.image_id) {
            return Err(Error::DuplicateImageId(img.image_id));
        }
    }
    seen.clear();
    for img in preds {
        if !seen.insert(img.image_id) {
            return Err(Error::DuplicateImageId(img.image_id));
        }
    }
    let layout: Option<&Arc<SkeletonLayout>> = gts
        .iter()
        .chain(preds.iter())
        .flat_map(|img| img.poses.first())
        .map(|p| p.layout())
        .next();
    let Some(layout) = layout else {
        return Ok(Vec::new());
    };
    let joints = match part {
        Some(name) => layout
            .part_joints(name)
            .ok_or_else(|| Error::InvalidLayout(format!("unknown part {name:?}")))?,
        None => (0..layout.joint_count()).collect(),
    };
    let empty: &[Pose] = &[];
    let pred_by_id: BTreeMap<i64, &[Pose]> = preds.iter().map(|img| (img.image_id, img.poses.as_slice())).collect();
    let mut ids: BTreeSet<i64> = gts.iter().map(|img| img.image_id).collect();
    ids.extend(pred_by_id.keys());
    let gt_by_id: BTreeMap<i64, &[Pose]> = gts.iter().map(|img| (img.image_id, img.poses.as_slice())).collect();
    let pairs: Vec<(&[Pose], &[Pose])> = ids
        .iter()
        .map(|id| {
            (
                *pred_by_id.get(id).unwrap_or(&empty),
                *gt_by_id.get(id).unwrap_or(&empty),
            )
        })
        .collect();
    for (p, g) in &pairs {
        for pose in p.iter().chain(g.iter()) {
            if pose.joint_count() != layout.joint_count() {
                return Err(Error::JointCountMismatch { expected: layout.joint_count(), got: pose.joint_count() });
            }
        }
    }
    let k = layout.oks_k();
    let cases: Vec<ImageCase> = pairs
        .par_iter()
        .map(|(pred, gt)| {
            // Truths with no labeled joints in the selected part are
            // dropped rather than scored as unreachable.
            let gt: Vec<&Pose> = gt
                .iter()
                .filter(|g| joints.iter().any(|&j| g.keypoints[j].is_labeled()))
                .collect();
            let mut oks = Vec::with_capacity(pred.len() * gt.len());
            for p in pred.iter() {
                for g in &gt {
                    let v = oks_subset(p, g, g.bbox.area(), &joints, k).expect("labeled joints present");
                    oks.push(v);
                }
            }
            ImageCase {
                oks,
                pred_scores: pred.iter().map(|p| p.score).collect(),
                pred_areas: pred.iter().map(|p| p.bbox.area()).collect(),
                gt_areas: gt.iter().map(|g| g.bbox.area()).collect(),
            }
        })
        .collect();
    Ok(cases)
}

/// 101-point interpolated average precision from (tp, score) samples.
fn interpolated_ap(mut flags: Vec<(f64, usize, bool)>, n_gt: usize) -> (f64, f64) {
    if n_gt == 0 {
        return (f64::NAN, f64::NAN);
    }
    flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (rank, (_, _, hit)) in flags.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Monotone envelope from the right, then sample at 101 recall points.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map(|i| precisions[i])
            .unwrap_or(0.0);
        ap += p;
    }
    let recall = recalls.last().copied().unwrap_or(0.0);
    (ap / 101.0, recall)
}

/// AP and recall at one threshold for one area bucket. Greedy matching
/// per image: predictions in descending score order each take the best
/// still-unmatched truth whose OKS reaches the threshold.
fn bucket_metrics(cases: &[ImageCase], threshold: f64, bucket: AreaBucket) -> (f64, f64) {
    let mut flags: Vec<(f64, usize, bool)> = Vec::new();
    let mut n_gt = 0usize;
    let mut serial = 0usize;
    for case in cases {
        let gt_keep: Vec<usize> = (0..case.gt_areas.len()).filter(|&g| bucket.admits(case.gt_areas[g])).collect();
        n_gt += gt_keep.len();
        let n_gt_all = case.gt_areas.len();
        let mut order: Vec<usize> = (0..case.pred_scores.len()).collect();
        order.sort_by(|&i, &j| case.pred_scores[j].partial_cmp(&case.pred_scores[i]).unwrap().then(i.cmp(&j)));
        let mut taken = vec![false; n_gt_all];
        for &p in &order {
            if !bucket.admits(case.pred_areas[p]) {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for &g in &gt_keep {
                if taken[g] {
                    continue;
                }
                let v = case.oks[p * n_gt_all + g];
                if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                flags.push((case.pred_scores[p], serial, true));
            } else {
                flags.push((case.pred_scores[p], serial, false));
            }
            serial += 1;
        }
    }
    interpolated_ap(flags, n_gt)
}

/// Averaged precision of per-image pose predictions against truths.
/// Images are joined on id; ids present on only one side contribute
/// misses or false positives. `part` restricts scoring to one named
/// part range of the layout.
pub fn map_eval(
    preds: &[ImagePoses],
    gts: &[ImagePoses],
    thresholds: &OksThresholds,
    part: Option<&str>,
) -> Result<ApReport> {
    let cases = build_cases(preds, gts, part)?;
    let total_gt: usize = cases.iter().map(|c| c.gt_areas.len()).sum();
    if total_gt == 0 {
        return Err(Error::EmptyInput("ground truth"));
    }
    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    let mut medium_sum = 0.0;
    let mut medium_n = 0usize;
    let mut large_sum = 0.0;
    let mut large_n = 0usize;
    let mut ap50 = f64::NAN;
    let mut ap75 = f64::NAN;
    for (i, &t) in thresholds.values().iter().enumerate() {
        let (ap, recall) = bucket_metrics(&cases, t, AreaBucket::All);
        ap_sum += ap;
        ar_sum += recall;
        if thresholds.position(0.5) == Some(i) {
            ap50 = ap;
        }
        if thresholds.position(0.75) == Some(i) {
            ap75 = ap;
        }
        let (m, _) = bucket_metrics(&cases, t, AreaBucket::Medium);
        if !m.is_nan() {
            medium_sum += m;
            medium_n += 1;
        }
        let (l, _) = bucket_metrics(&cases, t, AreaBucket::Large);
        if !l.is_nan() {
            large_sum += l;
            large_n += 1;
        }
    }
    let n = thresholds.values().len() as f64;
    Ok(ApReport {
        ap: ap_sum / n,
        ap50,
        ap75,
        ap_medium: if medium_n > 0 { medium_sum / medium_n as f64 } else { f64::NAN },
        ap_large: if large_n > 0 { large_sum / large_n as f64 } else { f64::NAN },
        ar: ar_sum / n,
    })
}

/// Per-joint MOT accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotJointReport {
    pub mota: f64,
    /// Mean matched distance as a fraction of the PCKh gate; 0 is perfect.
    pub motp: f64,
    pub precision: f64,
    pub recall: f64,
    pub truths: usize,
    pub matches: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub switches: usize,
}

/// Joint-wise MOT metrics plus their across-joint averages.
#[derive(Debug, Clone)]
pub struct MotReport {
    pub joints: Vec<MotJointReport>,
    pub mota: f64,
    pub motp: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio_or(num: f64, den: f64, fallback: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        fallback
    }
}

/// MOT metrics evaluated independently per joint. Matching is per frame:
/// labeled predictions and truths of a joint pair up greedily by
/// distance, admitted when within `pckh_threshold` times the truth's
/// head segment length. Identity switches count a truth track changing
/// its matched prediction track. Totals average the per-joint metrics.
pub fn mot_eval(pred: &[TrackedFrame], gt: &[TrackedFrame], pckh_threshold: f64) -> Result<MotReport> {
    if !(pckh_threshold > 0.0 && pckh_threshold.is_finite()) {
        return Err(Error::InvalidArgument("pckh_threshold must be positive".into()));
    }
    let mut pred_frames = BTreeMap::new();
    for f in pred {
        if pred_frames.insert(f.frame, f).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate prediction frame {}", f.frame)));
        }
    }
    let mut gt_frames = BTreeMap::new();
    for f in gt {
        if gt_frames.insert(f.frame, f).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate truth frame {}", f.frame)));
        }
    }
    for k in pred_frames.keys() {
        if !gt_frames.contains_key(k) {
            return Err(Error::MissingFrame(*k));
        }
    }
    for k in gt_frames.keys() {
        if !pred_frames.contains_key(k) {
            return Err(Error::MissingFrame(*k));
        }
    }
    let layout = gt_frames
        .values()
        .flat_map(|f| f.poses.first())
        .map(|t| t.pose.layout().clone())
        .next()
        .ok_or(Error::EmptyInput("truth tracks"))?;
    let (head, neck) = layout.head_neck().ok_or(Error::MissingHeadJoints)?;
    let m = layout.joint_count();
    let mut truths = vec![0usize; m];
    let mut matches = vec![0usize; m];
    let mut misses = vec![0usize; m];
    let mut false_positives = vec![0usize; m];
    let mut switches = vec![0usize; m];
    let mut dist_sum = vec![0.0f64; m];
    // Last prediction identity matched to each truth track, per joint.
    let mut last_id: Vec<BTreeMap<u64, u64>> = vec![BTreeMap::new(); m];
    for (frame, gt_frame) in &gt_frames {
        let pred_frame = pred_frames[frame];
        let mut gates = Vec::with_capacity(gt_frame.poses.len());
        for t in &gt_frame.poses {
            let h = &t.pose.keypoints[head];
            let n = &t.pose.keypoints[neck];
            let len = h.distance(n);
            if !h.is_labeled() || !n.is_labeled() || !(len > 0.0) {
                return Err(Error::MissingHeadJoints);
            }
            gates.push(pckh_threshold * len);
        }
        for j in 0..m {
            let gt_items: Vec<usize> = (0..gt_frame.poses.len())
                .filter(|&i| gt_frame.poses[i].pose.keypoints[j].is_labeled())
                .collect();
            let pred_items: Vec<usize> = (0..pred_frame.poses.len())
                .filter(|&i| pred_frame.poses[i].pose.keypoints[j].is_labeled())
                .collect();
            truths[j] += gt_items.len();
            let mut pairs = Vec::new();
            for (gi, &g) in gt_items.iter().enumerate() {
                for (pi, &p) in pred_items.iter().enumerate() {
                    let d = gt_frame.poses[g].pose.keypoints[j].distance(&pred_frame.poses[p].pose.keypoints[j]);
                    if d <= gates[g] {
                        pairs.push((d, gi, pi));
                    }
                }
            }
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut gt_taken = vec![false; gt_items.len()];
            let mut pred_taken = vec![false; pred_items.len()];
            for (d, gi, pi) in pairs {
                if gt_taken[gi] || pred_taken[pi] {
                    continue;
                }
                gt_taken[gi] = true;
                pred_taken[pi] = true;
                matches[j] += 1;
                dist_sum[j] += d / gates[gt_items[gi]];
                let gt_id = gt_frame.poses[gt_items[gi]].track_id;
                let pred_id = pred_frame.poses[pred_items[pi]].track_id;
                if let Some(prev) = last_id[j].insert(gt_id, pred_id) {
                    if prev != pred_id {
                        switches[j] += 1;
                    }
                }
            }
            misses[j] += gt_taken.iter().filter(|t| !**t).count();
            false_positives[j] += pred_taken.iter().filter(|t| !**t).count();
        }
    }
    let joints: Vec<MotJointReport> = (0..m)
        .map(|j| {
            let gt_n = truths[j] as f64;
            let errors = (misses[j] + false_positives[j] + switches[j]) as f64;
            MotJointReport {
                mota: 1.0 - errors / gt_n.max(1.0),
                motp: ratio_or(dist_sum[j], matches[j] as f64, 0.0),
                precision: ratio_or(matches[j] as f64, (matches[j] + false_positives[j]) as f64, 1.0),
                recall: ratio_or(matches[j] as f64, gt_n, 1.0),
                truths: truths[j],
                matches: matches[j],
                misses: misses[j],
                false_positives: false_positives[j],
                switches: switches[j],
            }
        })
        .collect();
    let n = m as f64;
    let report = MotReport {
        mota: joints.iter().map(|r| r.mota).sum::<f64>() / n,
        motp: joints.iter().map(|r| r.motp).sum::<f64>() / n,
        precision: joints.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: joints.iter().map(|r| r.recall).sum::<f64>() / n,
        joints,
    };
    Ok(report)
}
