//! Logit normalization and sub-pixel keypoint decoding, plus the gradient
//! rules used to analyze training smoothness.
//!
//! Normalization is two-step: an elementwise sigmoid produces per-cell
//! confidences whose maximum is reported as the joint confidence, and the
//! confidences are then rescaled to a distribution for the expectation
//! decode. Keeping the two steps separate makes the reported confidence
//! independent of how widely the response is spread.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Heatmap, HeatmapKind, Keypoint, Pose, SkeletonLayout};
use crate::geometry::DetectionBox;
use std::sync::Arc;

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Axis selector for per-axis expectations and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    /// Coordinate of cell `(x, y)` along this axis.
    fn coord(&self, x: usize, y: usize) -> f64 {
        match self {
            Axis::X => x as f64,
            Axis::Y => y as f64,
        }
    }

}

/// Sign with a fixed zero: `sgn(0) = 0`.
pub fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
}

/// One decoded joint in heatmap grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedJoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Sigmoid each cell, report the per-joint maximum as the confidence, then
/// rescale each joint plane to sum to one.
///
/// Returns one confidence per joint and the probability heatmap. A joint
/// plane that is entirely `-inf` carries no evidence and is rejected.
pub fn normalize_two_step(logits: &Heatmap) -> Result<(Vec<f64>, Heatmap)> {
    logits.expect_kind(HeatmapKind::Logits)?;
    let (j, h, w) = (logits.joints(), logits.height(), logits.width());
    let mut confidences = Vec::with_capacity(j);
    let mut prob = vec![0.0; j * h * w];
    for joint in 0..j {
        let plane = logits.plane(joint);
        if plane.iter().all(|z| *z == f64::NEG_INFINITY) {
            return Err(Error::EmptyHeatmap);
        }
        let mut conf = 0.0f64;
        let mut sum = 0.0f64;
        let out = &mut prob[joint * h * w..(joint + 1) * h * w];
        for (o, z) in out.iter_mut().zip(plane) {
            let c = if *z == f64::NEG_INFINITY { 0.0 } else { sigmoid(*z) };
            conf = conf.max(c);
            sum += c;
            *o = c;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        confidences.push(conf);
    }
    let prob = Heatmap::new(j, h, w, HeatmapKind::Probability, prob)?;
    Ok((confidences, prob))
}

/// One-step baseline: per-joint softmax over the whole plane. Under this
/// normalization the peak value shrinks as the response widens, which is
/// exactly the coupling the two-step scheme avoids.
pub fn normalize_softmax(logits: &Heatmap) -> Result<Heatmap> {
    logits.expect_kind(HeatmapKind::Logits)?;
    let (j, h, w) = (logits.joints(), logits.height(), logits.width());
    let mut prob = vec![0.0; j * h * w];
    for joint in 0..j {
        let plane = logits.plane(joint);
        let top = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(Error::EmptyHeatmap);
        }
        let out = &mut prob[joint * h * w..(joint + 1) * h * w];
        let mut sum = 0.0;
        for (o, z) in out.iter_mut().zip(plane) {
            let e = if *z == f64::NEG_INFINITY { 0.0 } else { (z - top).exp() };
            sum += e;
            *o = e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Heatmap::new(j, h, w, HeatmapKind::Probability, prob)
}

/// Expectation decode: per-axis mean of the joint's distribution, computed
/// from the axis marginals.
pub fn soft_argmax(prob: &Heatmap, joint: usize) -> Result<(f64, f64)> {
    prob.expect_kind(HeatmapKind::Probability)?;
    if joint >= prob.joints() {
        return Err(Error::InvalidArgument(format!("joint {joint} out of range 0..{}", prob.joints())));
    }
    let (h, w) = (prob.height(), prob.width());
    let plane = prob.plane(joint);
    let mut mx = vec![0.0; w];
    let mut my = vec![0.0; h];
    for y in 0..h {
        for x in 0..w {
            let p = plane[y * w + x];
            mx[x] += p;
            my[y] += p;
        }
    }
    let ex = mx.iter().enumerate().map(|(x, p)| x as f64 * p).sum();
    let ey = my.iter().enumerate().map(|(y, p)| y as f64 * p).sum();
    Ok((ex, ey))
}

/// Grid cell holding the largest value of a joint plane. Ties resolve to
/// the first cell in row-major order.
pub fn hard_argmax(map: &Heatmap, joint: usize) -> (usize, usize) {
    let (h, w) = (map.height(), map.width());
    let plane = map.plane(joint);
    let mut best = (0, 0);
    let mut top = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            if v > top {
                top = v;
                best = (x, y);
            }
        }
    }
    best
}

/// Affine map from heatmap grid coordinates to image coordinates for one
/// crop. Grid index 0 lands on the box minimum and index `len - 1` on the
/// box maximum along each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub bbox: DetectionBox,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl CropTransform {
    pub fn for_box(bbox: DetectionBox, grid_width: usize, grid_height: usize) -> Result<Self> {
        if grid_width < 2 || grid_height < 2 {
            return Err(Error::InvalidArgument("crop grid needs at least 2 cells per axis".into()));
        }
        Ok(Self {
            bbox,
            scale_x: bbox.width() / (grid_width - 1) as f64,
            scale_y: bbox.height() / (grid_height - 1) as f64,
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.bbox.x_min + self.scale_x * x, self.bbox.y_min + self.scale_y * y)
    }

    /// Image coordinates back to grid coordinates.
    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.bbox.x_min) / self.scale_x, (y - self.bbox.y_min) / self.scale_y)
    }
}

/// Decodes every joint of a logit heatmap in grid coordinates.
pub fn decode_joints(logits: &Heatmap) -> Result<Vec<DecodedJoint>> {
    let (confidences, prob) = normalize_two_step(logits)?;
    let mut joints = Vec::with_capacity(prob.joints());
    for (j, &confidence) in confidences.iter().enumerate() {
        let (x, y) = soft_argmax(&prob, j)?;
        joints.push(DecodedJoint { x, y, confidence });
    }
    Ok(joints)
}

/// Full decode for one crop: normalize, take per-joint expectations, map
/// into image coordinates and report the mean joint confidence as the pose
/// score.
pub fn decode_pose(logits: &Heatmap, layout: Arc<SkeletonLayout>, crop: &CropTransform) -> Result<Pose> {
    if logits.joints() != layout.joint_count() {
        return Err(Error::JointCountMismatch { expected: layout.joint_count(), got: logits.joints() });
    }
    let grid_w = (crop.bbox.width() / crop.scale_x + 1.0).round() as usize;
    let grid_h = (crop.bbox.height() / crop.scale_y + 1.0).round() as usize;
    if grid_w != logits.width() || grid_h != logits.height() {
        return Err(Error::ShapeMismatch(format!(
            "crop transform implies a {grid_w}x{grid_h} grid, heatmap is {}x{}",
            logits.width(),
            logits.height()
        )));
    }
    let joints = decode_joints(logits)?;
    let score = joints.iter().map(|j| j.confidence).sum::<f64>() / joints.len() as f64;
    let keypoints = joints
        .iter()
        .map(|j| {
            let (x, y) = crop.apply(j.x, j.y);
            Keypoint::new(x, y, j.confidence)
        })
        .collect();
    Pose::new(layout, keypoints, score, crop.bbox)
}

/// Which variable the location-loss gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradForm {
    /// With respect to the probability values themselves: the cell's own
    /// coordinate times the loss sign. Magnitudes grow with absolute
    /// position, independent of where the expectation sits.
    Probability,
    /// With respect to the logits through a softmax normalization: the
    /// coordinate offset from the expectation, weighted by the cell
    /// probability.
    Logits,
}

/// Per-cell gradient of the L1 location loss along one axis for the
/// conventional expectation decode.
pub fn grad_integral(
    prob: &Heatmap,
    joint: usize,
    mu_hat: f64,
    mu: f64,
    axis: Axis,
    form: GradForm,
) -> Result<Vec<f64>> {
    prob.expect_kind(HeatmapKind::Probability)?;
    let (h, w) = (prob.height(), prob.width());
    let plane = prob.plane(joint);
    let s = sgn(mu_hat - mu);
    let mut grid = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let c = axis.coord(x, y);
            grid[i] = match form {
                GradForm::Probability => c * s,
                GradForm::Logits => (c - mu_hat) * plane[i] * s,
            };
        }
    }
    Ok(grid)
}

/// Amplitude of the symmetric surrogate gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsgConfig {
    pub amplitude: f64,
}

impl AsgConfig {
    /// Default calibration: one eighth of the axis length, which makes the
    /// worst-case logit-space magnitude equal the average magnitude of the
    /// conventional rule.
    pub fn for_axis_len(len: usize) -> Self {
        Self { amplitude: len as f64 / 8.0 }
    }
}

/// Symmetric surrogate gradient: constant amplitude, signed only by which
/// side of the expectation a cell lies on and by the loss direction. Cells
/// exactly at the expectation get zero.
pub fn grad_asg(prob: &Heatmap, joint: usize, mu_hat: f64, mu: f64, axis: Axis, cfg: &AsgConfig) -> Result<Vec<f64>> {
    prob.expect_kind(HeatmapKind::Probability)?;
    if joint >= prob.joints() {
        return Err(Error::InvalidArgument(format!("joint {joint} out of range 0..{}", prob.joints())));
    }
    let (h, w) = (prob.height(), prob.width());
    let s = sgn(mu_hat - mu);
    let mut grid = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            grid[y * w + x] = cfg.amplitude * sgn(axis.coord(x, y) - mu_hat) * s;
        }
    }
    Ok(grid)
}

/// Empirical smoothness ratios of the two gradient rules.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzProbe {
    /// Max observed `|grad(z + dz) - grad(z)| / |dz|` for the conventional rule.
    pub ratio_integral: f64,
    /// Same quantity for the symmetric surrogate rule.
    pub ratio_asg: f64,
}

/// Probes how fast each rule's logit-space update changes under small
/// logit perturbations.
///
/// Each trial draws a unit-width Gaussian bump at a random sub-pixel
/// position as the logits and a random perturbation rescaled to 1e-3 of
/// the logit norm. Both rules pair their per-probability surrogate with
/// the softmax probabilities; the surrogate (cell coordinates for the
/// conventional rule, the flat signed amplitude for the symmetric one) is
/// evaluated at the base point and held fixed while differencing, so the
/// probe measures the smoothness of the probability-weighted factor and
/// not the measure-zero jumps where a cell changes sides. The loss target
/// sits below the grid so the loss direction never flips. Reported ratios
/// are maxima over trials; both rules see identical trials.
pub fn lipschitz_probe(width: usize, height: usize, trials: usize, seed: u64) -> Result<LipschitzProbe> {
    if trials < 100 {
        return Err(Error::InvalidArgument(format!("lipschitz probe needs at least 100 trials, got {trials}")));
    }
    if width < 4 || height < 4 {
        return Err(Error::InvalidArgument("lipschitz probe needs at least a 4x4 grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let n = width * height;
    let (mu_x, mu_y) = (-1.0, -1.0);
    let cfg_x = AsgConfig::for_axis_len(width);
    let cfg_y = AsgConfig::for_axis_len(height);
    const BUMP_SIGMA: f64 = 1.0;
    const PEAK_LOGIT: f64 = 3.0;
    // Bump logits in inverse-sigmoid form: the far background sits near
    // -27 instead of 0, so softmax mass stays on the bump no matter how
    // large the grid is and the probe compares like with like across
    // widths.
    let peak_conf = 1.0 / (1.0 + (-PEAK_LOGIT).exp());

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let softmax_of = |z: Vec<f64>| -> Result<Heatmap> {
        normalize_softmax(&Heatmap::new(1, height, width, HeatmapKind::Logits, z)?)
    };
    let mut ratio_integral = 0.0f64;
    let mut ratio_asg = 0.0f64;
    for _ in 0..trials {
        let px = rng.random_range(1.0..(width - 2) as f64);
        let py = rng.random_range(1.0..(height - 2) as f64);
        let mut z = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                let c = (peak_conf * (-d2 / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp()).clamp(1e-12, 1.0 - 1e-12);
                z.push((c / (1.0 - c)).ln());
            }
        }
        let mut dz: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let dz_norm = norm(&dz);
        if dz_norm == 0.0 {
            continue;
        }
        let target = 1e-3 * norm(&z);
        for d in dz.iter_mut() {
            *d *= target / dz_norm;
        }
        let z2: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();

        let base = softmax_of(z)?;
        let shifted = softmax_of(z2)?;
        let (ex, ey) = soft_argmax(&base, 0)?;
        let mut surr_int = grad_integral(&base, 0, ex, mu_x, Axis::X, GradForm::Probability)?;
        for (a, b) in surr_int.iter_mut().zip(grad_integral(&base, 0, ey, mu_y, Axis::Y, GradForm::Probability)?) {
            *a += b;
        }
        let mut surr_asg = grad_asg(&base, 0, ex, mu_x, Axis::X, &cfg_x)?;
        for (a, b) in surr_asg.iter_mut().zip(grad_asg(&base, 0, ey, mu_y, Axis::Y, &cfg_y)?) {
            *a += b;
        }
        let dp: Vec<f64> = base.plane(0).iter().zip(shifted.plane(0)).map(|(a, b)| b - a).collect();
        let weighted = |s: &[f64]| s.iter().zip(&dp).map(|(s, d)| (s * d) * (s * d)).sum::<f64>().sqrt();
        ratio_integral = ratio_integral.max(weighted(&surr_int) / target);
        ratio_asg = ratio_asg.max(weighted(&surr_asg) / target);
    }
    Ok(LipschitzProbe { ratio_integral, ratio_asg })
}

/// Monte-Carlo comparison of average per-cell gradient magnitudes along
/// the x axis.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationProbe {
    /// Mean probability-weighted offset `sum_cells |x - x_hat| * p` of the
    /// conventional logit-space rule.
    pub integral_scale: f64,
    /// Calibrated worst-case magnitude of the surrogate rule,
    /// `2 * amplitude * sum_cells p = width / 4` at the default amplitude.
    pub asg_scale: f64,
}

/// Estimates both gradient scales over random near-uniform heatmaps. With
/// the default amplitude the two should agree closely, which is what makes
/// the surrogate a drop-in replacement at matched step sizes.
pub fn asg_calibration_probe(width: usize, height: usize, heatmaps: usize, seed: u64) -> Result<CalibrationProbe> {
    if heatmaps == 0 {
        return Err(Error::EmptyInput("calibration probe needs at least one heatmap"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let n = width * height;
    let cfg = AsgConfig::for_axis_len(width);
    let mut integral_sum = 0.0;
    for _ in 0..heatmaps {
        let z: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let logits = Heatmap::new(1, height, width, HeatmapKind::Logits, z)?;
        let prob = normalize_softmax(&logits)?;
        let (ex, _) = soft_argmax(&prob, 0)?;
        let plane = prob.plane(0);
        let mut weighted = 0.0;
        for y in 0..height {
            for x in 0..width {
                weighted += (x as f64 - ex).abs() * plane[y * width + x];
            }
        }
        integral_sum += weighted;
    }
    Ok(CalibrationProbe { integral_scale: integral_sum / heatmaps as f64, asg_scale: 2.0 * cfg.amplitude })
}
