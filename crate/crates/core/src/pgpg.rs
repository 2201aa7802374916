//! Part-guided proposal generation: models how detector boxes deviate
//! from true boxes, then samples augmented proposals around a true box.
//!
//! Horizontal and vertical offsets are modeled independently, each as a
//! two-dimensional Gaussian mixture over (min-edge, max-edge) offsets.
//! A percentile box over the training offsets supports a cheaper uniform
//! sampling mode.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DetectionBox;

/// Covariance eigenvalue floor applied when a component degenerates.
pub const COV_FLOOR: f64 = 1e-6;
const EM_MAX_ITERS: usize = 200;
const EM_TOL: f64 = 1e-6;
const KMEANS_ITERS: usize = 10;
const FIT_SEED: u64 = 7;

/// Normalized box offsets of one detector output against its true box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetSample {
    pub dx_min: f64,
    pub dx_max: f64,
    pub dy_min: f64,
    pub dy_max: f64,
    pub part: String,
}

/// Per-edge offsets scaled by the true box extent on their axis.
pub fn compute_offsets(gt: &DetectionBox, det: &DetectionBox, part: impl Into<String>) -> OffsetSample {
    // Box validity guarantees positive extents.
    let w = gt.width();
    let h = gt.height();
    OffsetSample {
        dx_min: (det.x_min - gt.x_min) / w,
        dx_max: (det.x_max - gt.x_max) / w,
        dy_min: (det.y_min - gt.y_min) / h,
        dy_max: (det.y_max - gt.y_max) / h,
        part: part.into(),
    }
}

/// De-normalizes an offset sample onto a true box. Fails when the
/// offsets collapse or invert the box.
pub fn apply_offsets(gt: &DetectionBox, sample: &OffsetSample) -> Result<DetectionBox> {
    let w = gt.width();
    let h = gt.height();
    DetectionBox::new(
        gt.x_min + sample.dx_min * w,
        gt.y_min + sample.dy_min * h,
        gt.x_max + sample.dx_max * w,
        gt.y_max + sample.dy_max * h,
        gt.score,
        gt.category,
    )
}

/// One bivariate Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    fn det(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    fn pdf(&self, p: [f64; 2]) -> f64 {
        let det = self.det();
        if det <= 0.0 {
            return 0.0;
        }
        let dx = p[0] - self.mean[0];
        let dy = p[1] - self.mean[1];
        let quad = (self.cov[1][1] * dx * dx - 2.0 * self.cov[0][1] * dx * dy + self.cov[0][0] * dy * dy) / det;
        (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    }

    /// Lower-triangular Cholesky factor, tolerating semidefinite input.
    fn chol(&self) -> [[f64; 2]; 2] {
        let l00 = self.cov[0][0].max(0.0).sqrt();
        let l10 = if l00 > 0.0 { self.cov[1][0] / l00 } else { 0.0 };
        let l11 = (self.cov[1][1] - l10 * l10).max(0.0).sqrt();
        [[l00, 0.0], [l10, l11]]
    }
}

/// Mixture of bivariate Gaussians with normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture2 {
    pub weights: Vec<f64>,
    pub components: Vec<Gaussian2>,
}

impl Mixture2 {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.components.len() {
            return Err(Error::InvalidArgument("mixture weights and components must align".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative and sum to 1".into()));
        }
        for c in &self.components {
            let finite = c.mean.iter().all(|v| v.is_finite())
                && c.cov.iter().flatten().all(|v| v.is_finite())
                && (c.cov[0][1] - c.cov[1][0]).abs() < 1e-9;
            if !finite {
                return Err(Error::InvalidArgument("component parameters must be finite and symmetric".into()));
            }
            if c.cov[0][0] < 0.0 || c.cov[1][1] < 0.0 || c.det() < -1e-12 {
                return Err(Error::SingularCovariance);
            }
        }
        Ok(())
    }

    pub fn pdf(&self, p: [f64; 2]) -> f64 {
        self.weights.iter().zip(&self.components).map(|(w, c)| w * c.pdf(p)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let mut u = rng.random_range(0.0..1.0);
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                idx = i;
                break;
            }
            u -= w;
        }
        let c = &self.components[idx];
        let l = c.chol();
        let z0: f64 = sample_standard_normal(rng);
        let z1: f64 = sample_standard_normal(rng);
        [
            c.mean[0] + l[0][0] * z0,
            c.mean[1] + l[1][0] * z0 + l[1][1] * z1,
        ]
    }

    /// CDF of the mixture's marginal along one dimension.
    pub fn marginal_cdf(&self, dim: usize, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| {
                let mu = c.mean[dim];
                let sd = c.cov[dim][dim].max(0.0).sqrt();
                let phi = if sd > 0.0 {
                    0.5 * (1.0 + libm::erf((x - mu) / (sd * std::f64::consts::SQRT_2)))
                } else if x >= mu {
                    1.0
                } else {
                    0.0
                };
                w * phi
            })
            .sum()
    }

    /// Mean of the marginal along one dimension.
    pub fn marginal_mean(&self, dim: usize) -> f64 {
        self.weights.iter().zip(&self.components).map(|(w, c)| w * c.mean[dim]).sum()
    }

    /// Variance of the marginal along one dimension.
    pub fn marginal_variance(&self, dim: usize) -> f64 {
        let m = self.marginal_mean(dim);
        let second: f64 = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * (c.cov[dim][dim] + c.mean[dim] * c.mean[dim]))
            .sum();
        second - m * m
    }
}

fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Eigenvalue floor for a symmetric 2x2 matrix, applied only when the
/// smallest eigenvalue falls below [`COV_FLOOR`] so healthy updates keep
/// exact EM monotonicity.
fn floor_cov(cov: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let a = cov[0][0];
    let b = 0.5 * (cov[0][1] + cov[1][0]);
    let d = cov[1][1];
    let tr = a + d;
    let gap = (((a - d) * 0.5).powi(2) + b * b).sqrt();
    let lo = tr * 0.5 - gap;
    if lo >= COV_FLOOR {
        return [[a, b], [b, d]];
    }
    let hi = tr * 0.5 + gap;
    let (e0, e1) = (lo.max(COV_FLOOR), hi.max(COV_FLOOR));
    // Eigenvector for eigenvalue hi.
    let (vx, vy) = if b.abs() > 1e-300 {
        (hi - d, b)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let n = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = if n > 0.0 { (vx / n, vy / n) } else { (1.0, 0.0) };
    // Reconstruct with (vx, vy) carrying e1 and its normal carrying e0.
    [
        [e1 * vx * vx + e0 * vy * vy, (e1 - e0) * vx * vy],
        [(e1 - e0) * vx * vy, e1 * vy * vy + e0 * vx * vx],
    ]
}

fn kmeans_init(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All points coincide with a center; duplicate it.
            centers.push(centers[0]);
            continue;
        }
        let mut u = rng.random_range(0.0..total);
        let mut chosen = points.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            if u < *w {
                chosen = i;
                break;
            }
            u -= w;
        }
        centers.push(points[chosen]);
    }
    for _ in 0..KMEANS_ITERS {
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let best = (0..k)
                .min_by(|&i, &j| {
                    let di = (p[0] - centers[i][0]).powi(2) + (p[1] - centers[i][1]).powi(2);
                    let dj = (p[0] - centers[j][0]).powi(2) + (p[1] - centers[j][1]).powi(2);
                    di.partial_cmp(&dj).unwrap()
                })
                .unwrap();
            sums[best][0] += p[0];
            sums[best][1] += p[1];
            counts[best] += 1;
        }
        for i in 0..k {
            if counts[i] > 0 {
                centers[i] = [sums[i][0] / counts[i] as f64, sums[i][1] / counts[i] as f64];
            } else {
                centers[i] = points[rng.random_range(0..points.len())];
            }
        }
    }
    centers
}

/// Expectation-maximization fit of a `k`-component bivariate mixture.
/// Deterministic: initialization draws from a fixed-seed stream salted
/// with `k`. Returns the mixture and the per-iteration log-likelihood.
pub fn fit_mixture_2d(points: &[[f64; 2]], k: usize) -> Result<(Mixture2, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("component count must be positive".into()));
    }
    if points.len() < 2 * k {
        return Err(Error::InvalidArgument(format!(
            "need at least {} points for {k} components, got {}",
            2 * k,
            points.len()
        )));
    }
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(FIT_SEED ^ (k as u64) << 32);
    let centers = kmeans_init(points, k, &mut rng);
    // Initial responsibilities from hard k-means assignment.
    let mut mixture = Mixture2 {
        weights: vec![1.0 / k as f64; k],
        components: centers.iter().map(|c| Gaussian2 { mean: *c, cov: [[0.0; 2]; 2] }).collect(),
    };
    for comp in 0..k {
        let mut cov = [[0.0f64; 2]; 2];
        let mut count = 0usize;
        for p in points {
            let best = (0..k)
                .min_by(|&i, &j| {
                    let di = (p[0] - centers[i][0]).powi(2) + (p[1] - centers[i][1]).powi(2);
                    let dj = (p[0] - centers[j][0]).powi(2) + (p[1] - centers[j][1]).powi(2);
                    di.partial_cmp(&dj).unwrap()
                })
                .unwrap();
            if best != comp {
                continue;
            }
            let dx = p[0] - centers[comp][0];
            let dy = p[1] - centers[comp][1];
            cov[0][0] += dx * dx;
            cov[0][1] += dx * dy;
            cov[1][0] += dx * dy;
            cov[1][1] += dy * dy;
            count += 1;
        }
        if count > 0 {
            for v in cov.iter_mut().flatten() {
                *v /= count as f64;
            }
        }
        mixture.components[comp].cov = floor_cov(cov);
        mixture.weights[comp] = count.max(1) as f64 / n as f64;
    }
    let wsum: f64 = mixture.weights.iter().sum();
    for w in mixture.weights.iter_mut() {
        *w /= wsum;
    }
    let mut history = Vec::new();
    let mut resp = vec![0.0f64; n * k];
    for _ in 0..EM_MAX_ITERS {
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut row_sum = 0.0;
            for c in 0..k {
                let v = mixture.weights[c] * mixture.components[c].pdf(*p);
                resp[i * k + c] = v;
                row_sum += v;
            }
            if row_sum > 0.0 {
                for c in 0..k {
                    resp[i * k + c] /= row_sum;
                }
                ll += row_sum.ln();
            } else {
                for c in 0..k {
                    resp[i * k + c] = 1.0 / k as f64;
                }
                ll += f64::MIN_POSITIVE.ln();
            }
        }
        let converged = history.last().is_some_and(|prev: &f64| (ll - prev).abs() < EM_TOL);
        history.push(ll);
        if converged {
            break;
        }
        for c in 0..k {
            let mass: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if mass <= 0.0 {
                continue;
            }
            let mut mean = [0.0f64; 2];
            for (i, p) in points.iter().enumerate() {
                mean[0] += resp[i * k + c] * p[0];
                mean[1] += resp[i * k + c] * p[1];
            }
            mean[0] /= mass;
            mean[1] /= mass;
            let mut cov = [[0.0f64; 2]; 2];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * k + c];
                let dx = p[0] - mean[0];
                let dy = p[1] - mean[1];
                cov[0][0] += r * dx * dx;
                cov[0][1] += r * dx * dy;
                cov[1][1] += r * dy * dy;
            }
            cov[0][0] /= mass;
            cov[0][1] /= mass;
            cov[1][0] = cov[0][1];
            cov[1][1] /= mass;
            mixture.weights[c] = mass / n as f64;
            mixture.components[c].mean = mean;
            mixture.components[c].cov = floor_cov(cov);
        }
        let wsum: f64 = mixture.weights.iter().sum();
        for w in mixture.weights.iter_mut() {
            *w /= wsum;
        }
    }
    mixture.validate()?;
    Ok((mixture, history))
}

/// Bayesian information criterion of a fitted mixture on its data;
/// lower is better. Parameter count per component: 2 mean, 3 covariance,
/// plus k-1 free weights.
pub fn bic(mixture: &Mixture2, points: &[[f64; 2]]) -> f64 {
    let ll: f64 = points.iter().map(|p| mixture.pdf(*p).max(f64::MIN_POSITIVE).ln()).sum();
    let k = mixture.components.len() as f64;
    let params = 6.0 * k - 1.0;
    -2.0 * ll + params * (points.len() as f64).ln()
}

/// Axis-aligned percentile ranges per offset dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub dx_min: [f64; 2],
    pub dx_max: [f64; 2],
    pub dy_min: [f64; 2],
    pub dy_max: [f64; 2],
}

/// Fitted offset distribution of one part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetModel {
    pub part: String,
    pub components: usize,
    pub x_model: Mixture2,
    pub y_model: Mixture2,
    pub uniform_box: Option<UniformBox>,
}

impl OffsetModel {
    pub fn validate(&self) -> Result<()> {
        self.x_model.validate()?;
        self.y_model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: OffsetModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialize")
    }
}

/// Linear-interpolated percentile of unsorted values, q in [0, 1].
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn percentile_range(values: &[f64]) -> [f64; 2] {
    [percentile(values, 0.05), percentile(values, 0.95)]
}

/// Number of samples required per mixture component.
pub const MIN_SAMPLES_PER_COMPONENT: usize = 10;

/// Fits the x and y offset mixtures of one part and records the
/// percentile box for uniform-mode sampling.
pub fn fit_offset_model(samples: &[OffsetSample], part: &str, components: usize) -> Result<OffsetModel> {
    let own: Vec<&OffsetSample> = samples.iter().filter(|s| s.part == part).collect();
    if own.len() < MIN_SAMPLES_PER_COMPONENT * components.max(1) {
        return Err(Error::InvalidArgument(format!(
            "part {part:?} has {} samples, need {}",
            own.len(),
            MIN_SAMPLES_PER_COMPONENT * components.max(1)
        )));
    }
    let x_points: Vec<[f64; 2]> = own.iter().map(|s| [s.dx_min, s.dx_max]).collect();
    let y_points: Vec<[f64; 2]> = own.iter().map(|s| [s.dy_min, s.dy_max]).collect();
    let (x_model, _) = fit_mixture_2d(&x_points, components)?;
    let (y_model, _) = fit_mixture_2d(&y_points, components)?;
    let dx_min: Vec<f64> = own.iter().map(|s| s.dx_min).collect();
    let dx_max: Vec<f64> = own.iter().map(|s| s.dx_max).collect();
    let dy_min: Vec<f64> = own.iter().map(|s| s.dy_min).collect();
    let dy_max: Vec<f64> = own.iter().map(|s| s.dy_max).collect();
    Ok(OffsetModel {
        part: part.to_string(),
        components,
        x_model,
        y_model,
        uniform_box: Some(UniformBox {
            dx_min: percentile_range(&dx_min),
            dx_max: percentile_range(&dx_max),
            dy_min: percentile_range(&dy_min),
            dy_max: percentile_range(&dy_max),
        }),
    })
}

/// Fits every part present in the sample set, in parallel, sorted by
/// part name.
pub fn fit_all_parts(samples: &[OffsetSample], components: usize) -> Result<Vec<OffsetModel>> {
    let parts: BTreeSet<&str> = samples.iter().map(|s| s.part.as_str()).collect();
    if parts.is_empty() {
        return Err(Error::EmptyInput("offset samples"));
    }
    parts
        .into_iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|part| fit_offset_model(samples, part, components))
        .collect()
}

/// BIC per candidate component count on one part's x and y planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicEntry {
    pub components: usize,
    pub bic_x: f64,
    pub bic_y: f64,
}

/// Evaluates component counts 1..=max_k for a part.
pub fn bic_report(samples: &[OffsetSample], part: &str, max_k: usize) -> Result<Vec<BicEntry>> {
    let own: Vec<&OffsetSample> = samples.iter().filter(|s| s.part == part).collect();
    if own.is_empty() {
        return Err(Error::EmptyInput("offset samples"));
    }
    let x_points: Vec<[f64; 2]> = own.iter().map(|s| [s.dx_min, s.dx_max]).collect();
    let y_points: Vec<[f64; 2]> = own.iter().map(|s| [s.dy_min, s.dy_max]).collect();
    (1..=max_k)
        .map(|k| {
            let (xm, _) = fit_mixture_2d(&x_points, k)?;
            let (ym, _) = fit_mixture_2d(&y_points, k)?;
            Ok(BicEntry { components: k, bic_x: bic(&xm, &x_points), bic_y: bic(&ym, &y_points) })
        })
        .collect()
}

/// How [`sample_proposal`] draws offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    Gmm,
    Uniform,
}

/// Draws one augmented proposal box around a true box. Degenerate draws
/// are rejected and retried up to 100 times.
pub fn sample_proposal<R: Rng + ?Sized>(
    gt: &DetectionBox,
    model: &OffsetModel,
    mode: ProposalMode,
    rng: &mut R,
) -> Result<DetectionBox> {
    const TRIES: usize = 100;
    for _ in 0..TRIES {
        let sample = match mode {
            ProposalMode::Gmm => {
                let x = model.x_model.sample(rng);
                let y = model.y_model.sample(rng);
                OffsetSample { dx_min: x[0], dx_max: x[1], dy_min: y[0], dy_max: y[1], part: model.part.clone() }
            }
            ProposalMode::Uniform => {
                let ub = model
                    .uniform_box
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("model lacks a uniform box".into()))?;
                let draw = |range: [f64; 2], rng: &mut R| {
                    if range[1] > range[0] {
                        rng.random_range(range[0]..range[1])
                    } else {
                        range[0]
                    }
                };
                OffsetSample {
                    dx_min: draw(ub.dx_min, rng),
                    dx_max: draw(ub.dx_max, rng),
                    dy_min: draw(ub.dy_min, rng),
                    dy_max: draw(ub.dy_max, rng),
                    part: model.part.clone(),
                }
            }
        };
        if let Ok(b) = apply_offsets(gt, &sample) {
            return Ok(b);
        }
    }
    Err(Error::SamplingFailed(TRIES))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::Normal;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> DetectionBox {
        DetectionBox::new(x0, y0, x1, y1, 1.0, 0).unwrap()
    }

    #[test]
    fn identity_detection_has_zero_offsets() {
        let gt = bx(3.0, 4.0, 13.0, 24.0);
        let s = compute_offsets(&gt, &gt, "body");
        assert_eq!((s.dx_min, s.dx_max, s.dy_min, s.dy_max), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn offsets_match_direct_substitution() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let det = bx(-1.0, 0.0, 12.0, 10.0);
        let s = compute_offsets(&gt, &det, "body");
        assert_relative_eq!(s.dx_min, -0.1, epsilon = 1e-12);
        assert_relative_eq!(s.dx_max, 0.2, epsilon = 1e-12);
        assert_relative_eq!(s.dy_min, 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.dy_max, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn offsets_are_scale_invariant() {
        let gt = bx(2.0, 3.0, 12.0, 19.0);
        let det = bx(1.0, 2.5, 13.0, 20.0);
        let a = compute_offsets(&gt, &det, "body");
        let s = 3.7;
        let gt2 = bx(2.0 * s, 3.0 * s, 12.0 * s, 19.0 * s);
        let det2 = bx(1.0 * s, 2.5 * s, 13.0 * s, 20.0 * s);
        let b = compute_offsets(&gt2, &det2, "body");
        assert_relative_eq!(a.dx_min, b.dx_min, epsilon = 1e-12);
        assert_relative_eq!(a.dx_max, b.dx_max, epsilon = 1e-12);
        assert_relative_eq!(a.dy_min, b.dy_min, epsilon = 1e-12);
        assert_relative_eq!(a.dy_max, b.dy_max, epsilon = 1e-12);
    }

    #[test]
    fn offsets_round_trip_through_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x0 = rng.random_range(-20.0..20.0);
            let y0 = rng.random_range(-20.0..20.0);
            let gt = bx(x0, y0, x0 + rng.random_range(1.0..30.0), y0 + rng.random_range(1.0..30.0));
            let dx0 = rng.random_range(-3.0..3.0);
            let dy0 = rng.random_range(-3.0..3.0);
            let det = bx(
                gt.x_min + dx0,
                gt.y_min + dy0,
                gt.x_max + rng.random_range(-0.5..3.0),
                gt.y_max + rng.random_range(-0.5..3.0),
            );
            let s = compute_offsets(&gt, &det, "body");
            let back = apply_offsets(&gt, &s).unwrap();
            assert_relative_eq!(back.x_min, det.x_min, epsilon = 1e-9);
            assert_relative_eq!(back.y_min, det.y_min, epsilon = 1e-9);
            assert_relative_eq!(back.x_max, det.x_max, epsilon = 1e-9);
            assert_relative_eq!(back.y_max, det.y_max, epsilon = 1e-9);
        }
    }

    fn two_component_samples(n: usize, seed: u64) -> Vec<OffsetSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.02).unwrap();
        (0..n)
            .map(|i| {
                let (mx, my) = if i % 2 == 0 { (-0.1, 0.1) } else { (0.1, -0.1) };
                OffsetSample {
                    dx_min: mx + noise.sample(&mut rng),
                    dx_max: my + noise.sample(&mut rng),
                    dy_min: 0.05 + noise.sample(&mut rng),
                    dy_max: -0.02 + noise.sample(&mut rng),
                    part: "body".into(),
                }
            })
            .collect()
    }

    #[test]
    fn em_recovers_a_planted_two_component_mixture() {
        let samples = two_component_samples(5000, 11);
        let model = fit_offset_model(&samples, "body", 2).unwrap();
        let mut comps: Vec<(f64, [f64; 2])> = model
            .x_model
            .weights
            .iter()
            .zip(&model.x_model.components)
            .map(|(w, c)| (*w, c.mean))
            .collect();
        comps.sort_by(|a, b| a.1[0].partial_cmp(&b.1[0]).unwrap());
        assert!((comps[0].1[0] - -0.1).abs() < 0.01, "mean {:?}", comps[0].1);
        assert!((comps[0].1[1] - 0.1).abs() < 0.01);
        assert!((comps[1].1[0] - 0.1).abs() < 0.01);
        assert!((comps[1].1[1] - -0.1).abs() < 0.01);
        assert!((comps[0].0 - 0.5).abs() < 0.05);
        assert!((comps[1].0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn em_log_likelihood_never_decreases() {
        let samples = two_component_samples(600, 23);
        let points: Vec<[f64; 2]> = samples.iter().map(|s| [s.dx_min, s.dx_max]).collect();
        for k in 1..=3 {
            let (_, history) = fit_mixture_2d(&points, k).unwrap();
            for w in history.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "log-likelihood dropped: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn identical_samples_hit_the_covariance_floor() {
        let samples: Vec<OffsetSample> = (0..40)
            .map(|_| OffsetSample { dx_min: 0.02, dx_max: -0.01, dy_min: 0.0, dy_max: 0.03, part: "body".into() })
            .collect();
        let model = fit_offset_model(&samples, "body", 2).unwrap();
        for c in &model.x_model.components {
            assert!(c.cov[0][0] >= COV_FLOOR - 1e-15);
            assert!(c.cov[1][1] >= COV_FLOOR - 1e-15);
            assert_relative_eq!(c.mean[0], 0.02, epsilon = 1e-9);
            assert_relative_eq!(c.mean[1], -0.01, epsilon = 1e-9);
        }
    }

    #[test]
    fn insufficient_samples_rejected() {
        let samples = two_component_samples(25, 3);
        assert!(fit_offset_model(&samples, "body", 3).is_err());
        assert!(fit_offset_model(&samples, "face", 1).is_err());
    }

    #[test]
    fn bic_prefers_the_true_component_count() {
        let samples = two_component_samples(3000, 31);
        let report = bic_report(&samples, "body", 3).unwrap();
        assert_eq!(report.len(), 3);
        assert!(report[1].bic_x < report[0].bic_x, "2 components should beat 1: {report:?}");
    }

    #[test]
    fn zero_variance_model_reproduces_the_true_box() {
        let degenerate = Gaussian2 { mean: [0.0, 0.0], cov: [[0.0; 2]; 2] };
        let model = OffsetModel {
            part: "body".into(),
            components: 1,
            x_model: Mixture2 { weights: vec![1.0], components: vec![degenerate.clone()] },
            y_model: Mixture2 { weights: vec![1.0], components: vec![degenerate] },
            uniform_box: None,
        };
        let gt = bx(5.0, 6.0, 25.0, 46.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_proposal(&gt, &model, ProposalMode::Gmm, &mut rng).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (5.0, 6.0, 25.0, 46.0));
    }

    #[test]
    fn impossible_offsets_exhaust_retries() {
        // Mean offsets collapse the box: min edge beyond the max edge.
        let flip = Gaussian2 { mean: [2.0, -2.0], cov: [[1e-9, 0.0], [0.0, 1e-9]] };
        let ok = Gaussian2 { mean: [0.0, 0.0], cov: [[1e-9, 0.0], [0.0, 1e-9]] };
        let model = OffsetModel {
            part: "body".into(),
            components: 1,
            x_model: Mixture2 { weights: vec![1.0], components: vec![flip] },
            y_model: Mixture2 { weights: vec![1.0], components: vec![ok] },
            uniform_box: None,
        };
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_proposal(&gt, &model, ProposalMode::Gmm, &mut rng),
            Err(Error::SamplingFailed(100))
        ));
    }

    #[test]
    fn uniform_mode_stays_inside_the_recorded_box() {
        let samples = two_component_samples(500, 77);
        let model = fit_offset_model(&samples, "body", 2).unwrap();
        let ub = model.uniform_box.clone().unwrap();
        let gt = bx(0.0, 0.0, 100.0, 200.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let b = sample_proposal(&gt, &model, ProposalMode::Uniform, &mut rng).unwrap();
            let s = compute_offsets(&gt, &b, "body");
            assert!(s.dx_min >= ub.dx_min[0] - 1e-9 && s.dx_min <= ub.dx_min[1] + 1e-9);
            assert!(s.dx_max >= ub.dx_max[0] - 1e-9 && s.dx_max <= ub.dx_max[1] + 1e-9);
            assert!(s.dy_min >= ub.dy_min[0] - 1e-9 && s.dy_min <= ub.dy_min[1] + 1e-9);
            assert!(s.dy_max >= ub.dy_max[0] - 1e-9 && s.dy_max <= ub.dy_max[1] + 1e-9);
        }
    }

    #[test]
    fn gmm_samples_match_the_fitted_marginals() {
        let samples = two_component_samples(4000, 41);
        let model = fit_offset_model(&samples, "body", 2).unwrap();
        let gt = bx(0.0, 0.0, 100.0, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let n = 20_000usize;
        let mut dx_min = Vec::with_capacity(n);
        for _ in 0..n {
            let b = sample_proposal(&gt, &model, ProposalMode::Gmm, &mut rng).unwrap();
            let s = compute_offsets(&gt, &b, "body");
            dx_min.push(s.dx_min);
        }
        let d = crate::synth::oracle::ks_statistic(&mut dx_min, |x| model.x_model.marginal_cdf(0, x));
        assert!(d <= 0.02, "KS statistic {d}");
        let emp_mean: f64 = dx_min.iter().sum::<f64>() / n as f64;
        let se = (model.x_model.marginal_variance(0) / n as f64).sqrt();
        assert!((emp_mean - model.x_model.marginal_mean(0)).abs() < 3.0 * se, "mean off by more than 3 sigma");
    }

    #[test]
    fn model_json_round_trip() {
        let samples = two_component_samples(200, 55);
        let model = fit_offset_model(&samples, "body", 2).unwrap();
        let back = OffsetModel::from_json(&model.to_json()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn parts_fit_independently() {
        let mut samples = two_component_samples(300, 60);
        for mut s in two_component_samples(300, 61) {
            s.part = "face".into();
            s.dx_min += 0.5;
            samples.push(s);
        }
        let models = fit_all_parts(&samples, 2).unwrap();
        assert_eq!(models.len(), 2);
        assert_eq!(models[0].part, "body");
        assert_eq!(models[1].part, "face");
        assert!(models[1].x_model.marginal_mean(0) > models[0].x_model.marginal_mean(0) + 0.4);
    }
}
