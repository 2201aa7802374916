//! Synthetic data generators and slow reference implementations.
//!
//! Everything here exists to exercise the production modules from an
//! independent direction: generators know the ground truth they embed, and
//! the [`oracle`] submodule recomputes results with direct scalar code so
//! tests never compare a module against itself.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::decode::LOGIT_CLAMP;
use crate::error::{Error, Result};
use crate::geometry::{DetectionBox, Heatmap, HeatmapKind, Keypoint, Pose, SkeletonLayout};

/// Smallest confidence emitted by the bump generator; keeps the inverse
/// sigmoid finite.
const CONF_FLOOR: f64 = 1e-12;

/// A generated logit heatmap together with the truth it encodes.
#[derive(Debug, Clone)]
pub struct SynthHeatmap {
    pub logits: Heatmap,
    /// Continuous sub-pixel peak position `(x, y)`.
    pub peak: (f64, f64),
    pub sigma: f64,
    /// Analytic per-cell confidence at the peak: `sigmoid(peak_logit)`.
    /// Also the analytic maximum of the sigmoid map whenever the peak sits
    /// on a grid cell.
    pub peak_confidence: f64,
}

/// Generates the logits of a discretized Gaussian bump: the sigmoid of the
/// plane is `sigmoid(peak_logit) * exp(-d^2 / (2 sigma^2))`, so after
/// two-step normalization the probability map is the discretized Gaussian
/// itself and its expectation recovers the sub-pixel peak.
pub fn gen_heatmap(peak: (f64, f64), sigma: f64, width: usize, height: usize, peak_logit: f64) -> Result<SynthHeatmap> {
    let logits = bump_plane(peak, sigma, width, height, peak_logit)?;
    Ok(SynthHeatmap {
        logits: Heatmap::new(1, height, width, HeatmapKind::Logits, logits)?,
        peak,
        sigma,
        peak_confidence: 1.0 / (1.0 + (-peak_logit).exp()),
    })
}

/// Stacks one bump plane per joint into a single logit heatmap.
pub fn gen_joint_heatmaps(
    peaks: &[(f64, f64)],
    sigma: f64,
    width: usize,
    height: usize,
    peak_logit: f64,
) -> Result<Heatmap> {
    if peaks.is_empty() {
        return Err(Error::EmptyInput("at least one peak required"));
    }
    let mut data = Vec::with_capacity(peaks.len() * width * height);
    for peak in peaks {
        data.extend(bump_plane(*peak, sigma, width, height, peak_logit)?);
    }
    Heatmap::new(peaks.len(), height, width, HeatmapKind::Logits, data)
}

fn bump_plane(peak: (f64, f64), sigma: f64, width: usize, height: usize, peak_logit: f64) -> Result<Vec<f64>> {
    let (px, py) = peak;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if !peak_logit.is_finite() {
        return Err(Error::NonFinite("peak logit"));
    }
    if !(0.0..=(width - 1) as f64).contains(&px) || !(0.0..=(height - 1) as f64).contains(&py) {
        return Err(Error::PeakOutsideGrid);
    }
    let peak_conf = 1.0 / (1.0 + (-peak_logit).exp());
    let mut plane = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
            let c = (peak_conf * (-d2 / (2.0 * sigma * sigma)).exp()).clamp(CONF_FLOOR, 1.0 - CONF_FLOOR);
            plane.push((c / (1.0 - c)).ln());
        }
    }
    Ok(plane)
}

/// Uniformly random sub-pixel peak positions with a margin to the grid
/// edge, paired with generated bumps. Used for decoding-accuracy sweeps.
pub fn random_bumps(
    count: usize,
    sigma: f64,
    width: usize,
    height: usize,
    peak_logit: f64,
    margin: f64,
    seed: u64,
) -> Result<Vec<SynthHeatmap>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let px = rng.random_range(margin..=(width - 1) as f64 - margin);
        let py = rng.random_range(margin..=(height - 1) as f64 - margin);
        out.push(gen_heatmap((px, py), sigma, width, height, peak_logit)?);
    }
    Ok(out)
}

/// One synthetic image: true poses plus redundant detection candidates.
#[derive(Debug, Clone)]
pub struct DuplicatedScene {
    pub candidates: Vec<Pose>,
    pub truths: Vec<Pose>,
}

/// Lays out up to eight non-overlapping people on a 640x480 canvas and
/// emits `1 + dup_per_person` candidates per person. Duplicate keypoints
/// and boxes are perturbed by Gaussian `jitter` pixels; duplicate scores
/// decay multiplicatively below their parent's, slowly enough that
/// duplicates of confident people outrank other people's parents.
pub fn gen_duplicated_scene(
    layout: &Arc<SkeletonLayout>,
    n_people: usize,
    dup_per_person: usize,
    jitter: f64,
    seed: u64,
) -> Result<DuplicatedScene> {
    if n_people == 0 || n_people > 8 {
        return Err(Error::InvalidArgument("n_people must be in 1..=8".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::InvalidArgument("jitter must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, jitter.max(1e-12)).expect("jitter stddev");
    let mut truths = Vec::with_capacity(n_people);
    let mut candidates = Vec::new();
    for person in 0..n_people {
        let col = (person % 4) as f64;
        let row = (person / 4) as f64;
        let x0 = 20.0 + 155.0 * col;
        let y0 = 20.0 + 220.0 * row;
        let bbox = DetectionBox::new(x0, y0, x0 + 90.0, y0 + 150.0, 1.0, 0)?;
        let keypoints: Vec<Keypoint> = (0..layout.joint_count())
            .map(|_| {
                Keypoint::new(
                    rng.random_range(x0 + 10.0..x0 + 80.0),
                    rng.random_range(y0 + 10.0..y0 + 140.0),
                    rng.random_range(0.7..1.0),
                )
            })
            .collect();
        let truth = Pose::new(layout.clone(), keypoints, 1.0, bbox)?;
        let parent_score = rng.random_range(0.8..0.999);
        let mut parent = truth.clone();
        parent.score = parent_score;
        parent.bbox.score = parent_score;
        candidates.push(parent);
        let mut score = parent_score;
        for _ in 0..dup_per_person {
            score *= rng.random_range(0.9..0.99);
            let keypoints: Vec<Keypoint> = truth
                .keypoints
                .iter()
                .map(|k| {
                    Keypoint::new(
                        k.x + noise.sample(&mut rng),
                        k.y + noise.sample(&mut rng),
                        rng.random_range(0.6..1.0),
                    )
                })
                .collect();
            let dx = noise.sample(&mut rng);
            let dy = noise.sample(&mut rng);
            let bbox = DetectionBox::new(x0 + dx, y0 + dy, x0 + 90.0 + dx, y0 + 150.0 + dy, score, 0)?;
            candidates.push(Pose::new(layout.clone(), keypoints, score, bbox)?);
        }
        truths.push(truth);
    }
    Ok(DuplicatedScene { candidates, truths })
}

/// How generated people carry identity features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// Pairwise orthogonal basis vectors, optionally noised.
    Orthogonal,
    /// Every person shares one embedding; matching must fall back to
    /// geometry.
    Identical,
    /// No embeddings at all.
    Absent,
}

/// A generated multi-frame sequence with its true identities.
#[derive(Debug, Clone)]
pub struct TrajectoryScene {
    pub frames: Vec<crate::pipeline::FrameBundle>,
    pub gt: Vec<crate::track::TrackedFrame>,
}

/// Straight-line people with rigid keypoint templates. With `crossing`
/// the two people swap sides mid-sequence on a shared lane; otherwise
/// each person keeps their own lane. `occlusions` lists
/// `(person, start, end)` frame windows where that person's detection is
/// dropped from both output streams. `emb_noise` is a per-dimension
/// Gaussian stddev applied before renormalization.
#[allow(clippy::too_many_arguments)]
pub fn gen_trajectories(
    layout: &Arc<SkeletonLayout>,
    n_people: usize,
    n_frames: u64,
    crossing: bool,
    embeddings: EmbeddingKind,
    occlusions: &[(usize, u64, u64)],
    emb_noise: f64,
    seed: u64,
) -> Result<TrajectoryScene> {
    use crate::pipeline::FrameBundle;
    use crate::track::{IdentityEmbedding, TrackedFrame, TrackedPose, EMBEDDING_DIM};

    if n_people == 0 || n_people > EMBEDDING_DIM {
        return Err(Error::InvalidArgument("n_people out of range".into()));
    }
    if crossing && n_people != 2 {
        return Err(Error::InvalidArgument("crossing scenes take exactly two people".into()));
    }
    if !(emb_noise >= 0.0 && emb_noise.is_finite()) {
        return Err(Error::InvalidArgument("emb_noise must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, emb_noise.max(1e-12)).expect("embedding stddev");
    let templates: Vec<Vec<(f64, f64)>> = (0..n_people)
        .map(|_| {
            (0..layout.joint_count())
                .map(|_| (rng.random_range(-25.0..25.0), rng.random_range(-50.0..50.0)))
                .collect()
        })
        .collect();
    let span = 3.0 * (n_frames.saturating_sub(1)) as f64;
    let center = |person: usize, t: u64| -> (f64, f64) {
        let t = t as f64;
        if crossing {
            let x = if person == 0 { 80.0 + 3.0 * t } else { 80.0 + span - 3.0 * t };
            (x, 200.0)
        } else {
            (80.0 + (2.0 + 0.7 * person as f64) * t, 120.0 + 140.0 * person as f64)
        }
    };
    let identity = |person: usize| match embeddings {
        EmbeddingKind::Orthogonal => Some(IdentityEmbedding::basis(person)),
        EmbeddingKind::Identical => Some(IdentityEmbedding::basis(0)),
        EmbeddingKind::Absent => None,
    };
    let mut frames = Vec::with_capacity(n_frames as usize);
    let mut gt = Vec::with_capacity(n_frames as usize);
    for t in 0..n_frames {
        let mut bundle = FrameBundle::new(t, 0);
        let mut poses = Vec::new();
        let mut truth = TrackedFrame { frame: t, poses: Vec::new() };
        for (person, template) in templates.iter().enumerate() {
            if occlusions.iter().any(|&(p, start, end)| p == person && (start..end).contains(&t)) {
                continue;
            }
            let (cx, cy) = center(person, t);
            let bbox = DetectionBox::new(cx - 30.0, cy - 60.0, cx + 30.0, cy + 60.0, 0.9, 0)?;
            let keypoints: Vec<Keypoint> =
                template.iter().map(|(dx, dy)| Keypoint::new(cx + dx, cy + dy, 1.0)).collect();
            let pose = Pose::new(layout.clone(), keypoints, 0.9, bbox)?;
            let embedding = match identity(person) {
                Some(e) if emb_noise > 0.0 => {
                    let noisy: Vec<f64> = e.values().iter().map(|v| v + noise.sample(&mut rng)).collect();
                    Some(IdentityEmbedding::from_unnormalized(noisy)?)
                }
                other => other,
            };
            bundle.detections.push(bbox);
            bundle.embeddings.push(embedding);
            poses.push(pose.clone());
            truth.poses.push(TrackedPose { track_id: person as u64 + 1, pose });
        }
        bundle.poses = Some(poses);
        frames.push(bundle);
        gt.push(truth);
    }
    Ok(TrajectoryScene { frames, gt })
}

/// Converts a trajectory scene into the artifacts a replay run
/// consumes: per-frame detection rows plus one logit heatmap per
/// detection in frame order, keypoints rendered as Gaussian bumps in
/// crop coordinates.
pub fn scene_to_replay(
    scene: &TrajectoryScene,
    grid_width: usize,
    grid_height: usize,
    bump_sigma: f64,
) -> Result<(crate::io::FrameDetections, Vec<Heatmap>)> {
    use crate::decode::CropTransform;
    let mut table = crate::io::FrameDetections::new();
    let mut heatmaps = Vec::new();
    for bundle in &scene.frames {
        let poses = bundle.poses.as_ref().expect("scene bundles carry poses");
        let mut rows = Vec::with_capacity(poses.len());
        for (pose, emb) in poses.iter().zip(&bundle.embeddings) {
            let crop = CropTransform::for_box(pose.bbox, grid_width, grid_height)?;
            let peaks: Vec<(f64, f64)> = pose.keypoints.iter().map(|k| crop.invert(k.x, k.y)).collect();
            heatmaps.push(gen_joint_heatmaps(&peaks, bump_sigma, grid_width, grid_height, 3.0)?);
            rows.push((pose.bbox, emb.clone()));
        }
        table.insert(bundle.frame, rows);
    }
    Ok((table, heatmaps))
}

/// Single-channel attention built from a pose: each cell takes the
/// largest Gaussian response over the labeled keypoints, so values peak
/// at 1 on the keypoints and fade with distance.
pub fn attention_from_pose(pose: &Pose, height: usize, width: usize, sigma: f64) -> Result<crate::track::FeatureMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut best = 0.0f64;
            for k in pose.keypoints.iter().filter(|k| k.is_labeled()) {
                let d2 = (x as f64 - k.x).powi(2) + (y as f64 - k.y).powi(2);
                best = best.max((-d2 / (2.0 * sigma * sigma)).exp());
            }
            data.push(best.clamp(0.0, 1.0));
        }
    }
    crate::track::FeatureMap::new(1, height, width, data)
}

pub mod oracle {
    //! Direct scalar reference implementations. Deliberately simple and
    //! allocation-happy; correctness is their only job.

    use super::LOGIT_CLAMP;
    use crate::geometry::Pose;
    use crate::posenms::NmsParams;

    /// Two-step normalization of one plane, cell by cell.
    pub fn normalize_two_step_scalar(plane: &[f64]) -> (f64, Vec<f64>) {
        let conf: Vec<f64> = plane
            .iter()
            .map(|z| {
                if *z == f64::NEG_INFINITY {
                    0.0
                } else {
                    1.0 / (1.0 + (-z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
                }
            })
            .collect();
        let top = conf.iter().cloned().fold(0.0f64, f64::max);
        let sum: f64 = conf.iter().sum();
        (top, conf.iter().map(|c| c / sum).collect())
    }

    /// Plain softmax of one plane.
    pub fn softmax_scalar(plane: &[f64]) -> Vec<f64> {
        let top = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = plane.iter().map(|z| (z - top).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.iter().map(|v| v / sum).collect()
    }

    /// Expectation position via the full double sum, no marginals.
    pub fn soft_argmax_double_sum(plane: &[f64], width: usize, height: usize) -> (f64, f64) {
        let mut ex = 0.0;
        let mut ey = 0.0;
        for y in 0..height {
            for x in 0..width {
                let p = plane[y * width + x];
                ex += x as f64 * p;
                ey += y as f64 * p;
            }
        }
        (ex, ey)
    }

    /// L1 location loss of the softmax-normalized expectation on both axes.
    pub fn expectation_loss(z: &[f64], width: usize, height: usize, mu_x: f64, mu_y: f64) -> f64 {
        let p = softmax_scalar(z);
        let (ex, ey) = soft_argmax_double_sum(&p, width, height);
        (ex - mu_x).abs() + (ey - mu_y).abs()
    }

    /// Central finite differences of [`expectation_loss`] per logit cell.
    pub fn fd_loss_gradient(z: &[f64], width: usize, height: usize, mu_x: f64, mu_y: f64, eps: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(z.len());
        let mut probe = z.to_vec();
        for i in 0..z.len() {
            probe[i] = z[i] + eps;
            let hi = expectation_loss(&probe, width, height, mu_x, mu_y);
            probe[i] = z[i] - eps;
            let lo = expectation_loss(&probe, width, height, mu_x, mu_y);
            probe[i] = z[i];
            grad.push((hi - lo) / (2.0 * eps));
        }
        grad
    }

    /// Pose distance recomputed with inline window math instead of the
    /// geometry helpers: both similarity terms in one joint loop.
    pub fn pose_distance_scalar(a: &Pose, b: &Pose, params: &NmsParams) -> f64 {
        let half_w = a.bbox.width() * 0.1 / 2.0;
        let half_h = a.bbox.height() * 0.1 / 2.0;
        let mut k = 0.0;
        let mut h = 0.0;
        for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
            if (kb.x - ka.x).abs() <= half_w && (kb.y - ka.y).abs() <= half_h {
                k += (ka.confidence / params.sigma1).tanh() * (kb.confidence / params.sigma1).tanh();
            }
            let d2 = (ka.x - kb.x).powi(2) + (ka.y - kb.y).powi(2);
            h += (-d2 / params.sigma2).exp();
        }
        k + params.lambda * h
    }

    /// Two-sided Kolmogorov-Smirnov statistic of samples against a CDF.
    /// Sorts the sample buffer in place.
    pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d = 0.0f64;
        for (i, x) in samples.iter().enumerate() {
            let f = cdf(*x);
            d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
        }
        d
    }

    /// Greedy elimination re-derived from scratch: scan for the best
    /// remaining score each round, strict comparison keeps the earliest of
    /// a tie.
    pub fn brute_force_pose_nms(poses: &[Pose], params: &NmsParams) -> Vec<usize> {
        let mut removed = vec![false; poses.len()];
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..poses.len() {
                if removed[i] {
                    continue;
                }
                if best.is_none_or(|j| poses[i].score > poses[j].score) {
                    best = Some(i);
                }
            }
            let Some(pick) = best else { break };
            removed[pick] = true;
            kept.push(pick);
            for i in 0..poses.len() {
                if !removed[i] && pose_distance_scalar(&poses[i], &poses[pick], params) >= params.eta {
                    removed[i] = true;
                }
            }
        }
        kept
    }

    /// Elementwise pose-guided fusion.
    pub fn pga_fuse_scalar(id: &[f64], attention: &[f64]) -> Vec<f64> {
        id.iter().zip(attention).map(|(i, a)| i * a + i).collect()
    }

    /// Declarative restatement of the stage matching rule, evaluated
    /// pairwise over a masked row-major matrix: row `p` links to column
    /// `q` iff `m[p][q]` is within `mu`, is the strict unique minimum of
    /// row `p`, and beats every competing row claiming `q` on
    /// (distance, row index).
    pub fn stage_links_scalar(
        matrix: &[f64],
        rows: usize,
        cols: usize,
        active_rows: &[bool],
        active_cols: &[bool],
        mu: f64,
    ) -> Vec<(usize, usize)> {
        let at = |p: usize, q: usize| matrix[p * cols + q];
        let claims = |p: usize, q: usize| -> bool {
            active_rows[p]
                && active_cols[q]
                && at(p, q) <= mu
                && (0..cols).all(|q2| q2 == q || !active_cols[q2] || at(p, q) < at(p, q2))
        };
        let mut links = Vec::new();
        for p in 0..rows {
            for q in 0..cols {
                if claims(p, q)
                    && (0..rows).all(|p2| {
                        p2 == p || !claims(p2, q) || (at(p, q), p) < (at(p2, q), p2)
                    })
                {
                    links.push((p, q));
                }
            }
        }
        links
    }

    /// Shape distance recomputed from first principles: keypoints mapped
    /// to box-fraction offsets, scored with the scalar pose distance on
    /// a unit box, flipped and scaled by the perfect-match ceiling.
    pub fn normalized_pose_distance_scalar(a: &Pose, b: &Pose, params: &NmsParams) -> f64 {
        let rescale = |p: &Pose| -> Vec<(f64, f64, f64)> {
            let (cx, cy) = p.bbox.center();
            p.keypoints
                .iter()
                .map(|k| ((k.x - cx) / p.bbox.width(), (k.y - cy) / p.bbox.height(), k.confidence))
                .collect()
        };
        let ka = rescale(a);
        let kb = rescale(b);
        let mut k_sim = 0.0;
        let mut h_sim = 0.0;
        for ((ax, ay, ac), (bx, by, bc)) in ka.iter().zip(&kb) {
            if (bx - ax).abs() <= 0.05 && (by - ay).abs() <= 0.05 {
                k_sim += (ac / params.sigma1).tanh() * (bc / params.sigma1).tanh();
            }
            h_sim += (-((ax - bx).powi(2) + (ay - by).powi(2)) / params.sigma2).exp();
        }
        let d = k_sim + params.lambda * h_sim;
        let ceiling = a.keypoints.len() as f64 * ((1.0 / params.sigma1).tanh().powi(2) + params.lambda);
        (1.0 - d / ceiling).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{hard_argmax, normalize_two_step, soft_argmax};

    #[test]
    fn bump_peak_is_recovered() {
        let hm = gen_heatmap((5.25, 9.75), 1.0, 16, 16, 3.0).unwrap();
        let (conf, prob) = normalize_two_step(&hm.logits).unwrap();
        let (ex, ey) = soft_argmax(&prob, 0).unwrap();
        assert!((ex - 5.25).abs() < 0.02, "ex = {ex}");
        assert!((ey - 9.75).abs() < 0.02, "ey = {ey}");
        assert!(conf[0] <= hm.peak_confidence + 1e-12);
        let (ax, ay) = hard_argmax(&hm.logits, 0);
        assert_eq!((ax, ay), (5, 10));
    }

    #[test]
    fn bump_rejects_out_of_grid_peaks() {
        assert!(matches!(gen_heatmap((16.0, 3.0), 1.0, 16, 16, 3.0), Err(Error::PeakOutsideGrid)));
        assert!(matches!(gen_heatmap((-0.5, 3.0), 1.0, 16, 16, 3.0), Err(Error::PeakOutsideGrid)));
        assert!(gen_heatmap((3.0, 3.0), 0.0, 16, 16, 3.0).is_err());
    }

    #[test]
    fn joint_stack_has_one_plane_per_peak() {
        let hm = gen_joint_heatmaps(&[(2.0, 2.0), (5.0, 7.0), (9.0, 1.0)], 1.0, 12, 10, 2.0).unwrap();
        assert_eq!(hm.joints(), 3);
        assert_eq!(hard_argmax(&hm, 1), (5, 7));
    }

    #[test]
    fn trajectories_cross_overlap_and_occlude() {
        use crate::geometry::iou;
        let layout = crate::geometry::halpe136();
        let scene =
            gen_trajectories(&layout, 2, 11, true, EmbeddingKind::Orthogonal, &[(1, 3, 5)], 0.02, 5).unwrap();
        assert_eq!(scene.frames.len(), 11);
        // Occlusion drops person 1 from frames 3 and 4 in both streams.
        assert_eq!(scene.frames[3].detections.len(), 1);
        assert_eq!(scene.gt[4].poses.len(), 1);
        assert_eq!(scene.frames[5].detections.len(), 2);
        // The two people trade sides, overlapping at the middle.
        let b = |t: usize, p: usize| &scene.frames[t].detections[p];
        assert!(b(0, 0).x_min < b(0, 1).x_min);
        assert!(b(10, 0).x_min > b(10, 1).x_min);
        assert!(iou(b(5, 0), b(5, 1)) > 0.8);
        // Noised embeddings stay unit length and nearly orthogonal.
        let e = |t: usize, p: usize| scene.frames[t].embeddings[p].clone().unwrap();
        let norm: f64 = e(0, 0).values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(e(0, 0).cosine(&e(0, 1)).abs() < 0.5);
        assert!(e(0, 0).cosine(&e(1, 0)) > 0.8);
        assert!(gen_trajectories(&layout, 3, 5, true, EmbeddingKind::Orthogonal, &[], 0.0, 5).is_err());
    }

    #[test]
    fn attention_peaks_at_keypoints_and_fades() {
        let layout = crate::geometry::coco17();
        let keypoints: Vec<Keypoint> =
            (0..17).map(|j| Keypoint::new(if j == 0 { 2.0 } else { 10.0 }, 3.0, 1.0)).collect();
        let bbox = DetectionBox::new(0.0, 0.0, 16.0, 8.0, 0.9, 0).unwrap();
        let pose = Pose::new(layout, keypoints, 0.9, bbox).unwrap();
        let att = attention_from_pose(&pose, 8, 16, 2.0).unwrap();
        att.validate_attention().unwrap();
        let at = |x: usize, y: usize| att.data()[y * 16 + x];
        assert!((at(2, 3) - 1.0).abs() < 1e-12);
        assert!((at(10, 3) - 1.0).abs() < 1e-12);
        assert!((at(6, 3) - (-16.0f64 / 8.0).exp()).abs() < 1e-12);
        assert!(at(15, 7) < at(6, 3));
    }
}
