//! Multi-stage identity tracking over per-frame pose detections.
//!
//! Matching runs in stages: embedding affinity first, then a fusion of
//! box overlap and normalized pose shape against Kalman-predicted track
//! boxes, then one retry of the fusion stage with a relaxed threshold.
//! Whatever remains starts a new identity. Track boxes are smoothed by
//! independent constant-velocity filters over center, area and aspect.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, DetectionBox, Keypoint, Pose};
use crate::posenms::{pose_distance, NmsParams};

/// Dimensionality of identity embeddings.
pub const EMBEDDING_DIM: usize = 128;

/// A pose carrying its identity.
#[derive(Debug, Clone)]
pub struct TrackedPose {
    pub track_id: u64,
    pub pose: Pose,
}

/// All identified poses of one frame.
#[derive(Debug, Clone)]
pub struct TrackedFrame {
    pub frame: u64,
    pub poses: Vec<TrackedPose>,
}

/// Unit-norm identity descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding(Vec<f64>);

impl IdentityEmbedding {
    /// Accepts an already normalized vector.
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.len() != EMBEDDING_DIM {
            return Err(Error::DimensionMismatch { expected: EMBEDDING_DIM, got: vector.len() });
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("embedding must be unit length".into()));
        }
        Ok(Self(vector))
    }

    /// Normalizes an arbitrary vector; zero vectors have no direction.
    pub fn from_unnormalized(vector: Vec<f64>) -> Result<Self> {
        if vector.len() != EMBEDDING_DIM {
            return Err(Error::DimensionMismatch { expected: EMBEDDING_DIM, got: vector.len() });
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::ZeroNormEmbedding);
        }
        Ok(Self(vector.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Basis vector, handy for constructing orthogonal identities.
    pub fn basis(index: usize) -> Self {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[index % EMBEDDING_DIM] = 1.0;
        Self(v)
    }
}

/// Dense C x H x W feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature map {}x{}x{} wants {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Attention maps must stay within [0, 1].
    pub fn validate_attention(&self) -> Result<()> {
        if self.data.iter().any(|v| *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument("attention values must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Pose-guided fusion: the identity features weighted by attention, with
/// the identity features added back so empty attention passes them
/// through unchanged.
pub fn pga_fuse(m_id: &FeatureMap, m_a: &FeatureMap) -> Result<FeatureMap> {
    if !m_id.same_shape(m_a) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            m_id.channels, m_id.height, m_id.width, m_a.channels, m_a.height, m_a.width
        )));
    }
    let data = m_id.data.iter().zip(&m_a.data).map(|(id, a)| id * a + id).collect();
    FeatureMap::new(m_id.channels, m_id.height, m_id.width, data)
}

/// Fixed linear projection from flattened feature maps to embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    pub cols: usize,
    /// Row-major, EMBEDDING_DIM rows.
    pub data: Vec<f64>,
}

impl ProjectionMatrix {
    /// Gaussian weights scaled by 1/sqrt(cols), reproducible per seed.
    pub fn seeded(cols: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (cols as f64).sqrt();
        let data = (0..EMBEDDING_DIM * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self { cols, data }
    }

    /// Row i picks out input element i; inputs with disjoint support in
    /// the first EMBEDDING_DIM elements map to orthogonal embeddings.
    pub fn identity_block(cols: usize) -> Self {
        let mut data = vec![0.0; EMBEDDING_DIM * cols];
        for row in 0..EMBEDDING_DIM.min(cols) {
            data[row * cols + row] = 1.0;
        }
        Self { cols, data }
    }
}

/// Projects a fused feature map to a unit-norm identity embedding.
pub fn embed(m_wid: &FeatureMap, projection: &ProjectionMatrix) -> Result<IdentityEmbedding> {
    let flat = m_wid.data();
    if flat.len() != projection.cols {
        return Err(Error::DimensionMismatch { expected: projection.cols, got: flat.len() });
    }
    let mut out = vec![0.0f64; EMBEDDING_DIM];
    for (row, slot) in out.iter_mut().enumerate() {
        let w = &projection.data[row * projection.cols..(row + 1) * projection.cols];
        *slot = w.iter().zip(flat).map(|(a, b)| a * b).sum();
    }
    IdentityEmbedding::from_unnormalized(out)
}

/// Row-major detection x track cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{rows}x{cols} wants {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Cosine distance matrix between detection and track embeddings,
/// mapped to [0, 1].
pub fn embedding_affinity(detections: &[IdentityEmbedding], tracks: &[IdentityEmbedding]) -> CostMatrix {
    let mut data = Vec::with_capacity(detections.len() * tracks.len());
    for d in detections {
        for t in tracks {
            data.push((1.0 - d.cosine(t)) / 2.0);
        }
    }
    CostMatrix { rows: detections.len(), cols: tracks.len(), data }
}

/// Links and leftovers of one matching stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    /// (row, column) pairs, sorted by row.
    pub links: Vec<(usize, usize)>,
    /// Rows that did not link.
    pub untracked: Vec<usize>,
}

/// Threshold-gated row-minimum matching. A row links to the column
/// holding its unique minimum if that minimum is within `mu`; rows whose
/// minimum is ambiguous stay untracked. When several rows claim one
/// column, the smallest distance wins (then the smaller row index) and
/// the losers stay untracked.
pub fn stage1_match(matrix: &CostMatrix, mu: f64) -> StageOutcome {
    let mut claims: Vec<Option<usize>> = vec![None; matrix.rows];
    for (row, claim) in claims.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        let mut ambiguous = false;
        for col in 0..matrix.cols {
            let v = matrix.at(row, col);
            match best {
                None => best = Some((col, v)),
                Some((_, bv)) if v < bv => {
                    best = Some((col, v));
                    ambiguous = false;
                }
                Some((_, bv)) if v == bv => ambiguous = true,
                _ => {}
            }
        }
        if let Some((col, v)) = best {
            if !ambiguous && v <= mu {
                *claim = Some(col);
            }
        }
    }
    let mut links = Vec::new();
    let mut untracked = Vec::new();
    for row in 0..matrix.rows {
        match claims[row] {
            Some(col) => {
                let winner = (0..matrix.rows)
                    .filter(|r| claims[*r] == Some(col))
                    .min_by(|&a, &b| {
                        matrix.at(a, col).partial_cmp(&matrix.at(b, col)).unwrap().then(a.cmp(&b))
                    })
                    .unwrap();
                if winner == row {
                    links.push((row, col));
                } else {
                    untracked.push(row);
                }
            }
            None => untracked.push(row),
        }
    }
    StageOutcome { links, untracked }
}

/// Shape dissimilarity in [0, 1]: both poses are rescaled so their boxes
/// become origin-centered unit squares, scored by the pose similarity
/// measure, and flipped around the similarity ceiling of fully confident
/// identical poses.
pub fn normalized_pose_distance(a: &Pose, b: &Pose, params: &NmsParams) -> Result<f64> {
    let normalize = |p: &Pose| -> Result<Pose> {
        let (cx, cy) = p.bbox.center();
        let w = p.bbox.width();
        let h = p.bbox.height();
        let keypoints: Vec<Keypoint> =
            p.keypoints.iter().map(|k| Keypoint::new((k.x - cx) / w, (k.y - cy) / h, k.confidence)).collect();
        let unit = DetectionBox::new(-0.5, -0.5, 0.5, 0.5, p.score, p.bbox.category)?;
        Pose::new(p.layout().clone(), keypoints, p.score, unit)
    };
    let na = normalize(a)?;
    let nb = normalize(b)?;
    let d = pose_distance(&na, &nb, params)?;
    let m = a.joint_count() as f64;
    let d_max = m * ((1.0 / params.sigma1).tanh().powi(2) + params.lambda);
    Ok((1.0 - d / d_max).clamp(0.0, 1.0))
}

/// Fusion cost of unmatched detections against tracks: box disagreement
/// with the Kalman-predicted track box plus weighted shape distance to
/// the track's last pose.
pub fn fusion_matrix(
    detections: &[&Pose],
    predicted_boxes: &[DetectionBox],
    last_poses: &[&Pose],
    lambda_np: f64,
    params: &NmsParams,
) -> Result<CostMatrix> {
    let mut data = Vec::with_capacity(detections.len() * predicted_boxes.len());
    for det in detections {
        for (bx, pose) in predicted_boxes.iter().zip(last_poses) {
            let overlap = iou(&det.bbox, bx);
            let shape = normalized_pose_distance(det, pose, params)?;
            data.push((1.0 - overlap) + lambda_np * shape);
        }
    }
    CostMatrix::new(detections.len(), predicted_boxes.len(), data)
}

/// One-dimensional constant-velocity filter over (position, velocity).
#[derive(Debug, Clone, Copy, PartialEq)]
struct CvFilter {
    x: [f64; 2],
    p: [[f64; 2]; 2],
}

impl CvFilter {
    /// Position pinned to the first measurement, velocity diffuse.
    fn init(z: f64) -> Self {
        Self { x: [z, 0.0], p: [[0.0, 0.0], [0.0, 1e12]] }
    }

    fn predict(&mut self, q: f64) {
        self.x[0] += self.x[1];
        let p = self.p;
        self.p = [
            [p[0][0] + p[0][1] + p[1][0] + p[1][1], p[0][1] + p[1][1]],
            [p[1][0] + p[1][1], p[1][1]],
        ];
        self.p[0][0] += 0.25 * q;
        self.p[0][1] += 0.5 * q;
        self.p[1][0] += 0.5 * q;
        self.p[1][1] += q;
    }

    fn update(&mut self, z: f64, r: f64) {
        let s = self.p[0][0] + r;
        if s <= 0.0 {
            self.x[0] = z;
            return;
        }
        let k = [self.p[0][0] / s, self.p[1][0] / s];
        let residual = z - self.x[0];
        self.x[0] += k[0] * residual;
        self.x[1] += k[1] * residual;
        let p = self.p;
        self.p = [
            [(1.0 - k[0]) * p[0][0], (1.0 - k[0]) * p[0][1]],
            [p[1][0] - k[1] * p[0][0], p[1][1] - k[1] * p[0][1]],
        ];
    }

    fn position(&self) -> f64 {
        self.x[0]
    }
}

/// Box filter: independent constant-velocity filters over center x,
/// center y, area and aspect ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxKalman {
    axes: [CvFilter; 4],
    score: f64,
    category: u32,
}

fn box_state(b: &DetectionBox) -> [f64; 4] {
    let (cx, cy) = b.center();
    [cx, cy, b.area(), b.width() / b.height()]
}

impl BoxKalman {
    pub fn from_box(b: &DetectionBox) -> Self {
        let s = box_state(b);
        Self { axes: [CvFilter::init(s[0]), CvFilter::init(s[1]), CvFilter::init(s[2]), CvFilter::init(s[3])], score: b.score, category: b.category }
    }

    pub fn predict(&mut self, process_noise: f64) {
        for axis in self.axes.iter_mut() {
            axis.predict(process_noise);
        }
    }

    pub fn update(&mut self, b: &DetectionBox, measurement_noise: f64) {
        let s = box_state(b);
        for (axis, z) in self.axes.iter_mut().zip(s) {
            axis.update(z, measurement_noise);
        }
        self.score = b.score;
        self.category = b.category;
    }

    /// Current state as a box; degenerate states collapse to a tiny box
    /// around the center.
    pub fn as_box(&self) -> DetectionBox {
        let cx = self.axes[0].position();
        let cy = self.axes[1].position();
        let area = self.axes[2].position().max(1e-6);
        let aspect = self.axes[3].position().max(1e-6);
        let w = (area * aspect).sqrt();
        let h = (area / aspect).sqrt();
        DetectionBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, self.score, self.category)
            .expect("positive extents")
    }
}

/// Lifecycle of a track.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Lost,
    Removed,
}

/// One identity and its smoothed state.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub kalman: BoxKalman,
    pub last_pose: Pose,
    /// Absent when no linked detection ever carried an embedding.
    pub embedding: Option<IdentityEmbedding>,
    pub last_seen: u64,
    pub status: TrackStatus,
}

/// Matching thresholds and maintenance constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsimConfig {
    /// Embedding-stage acceptance threshold.
    pub mu_emb: f64,
    /// Fusion-stage acceptance threshold.
    pub mu_f: f64,
    /// Weight of shape distance inside the fusion cost.
    pub lambda_np: f64,
    /// Retry threshold is mu_f / relax_factor; must stay in (0,1).
    pub relax_factor: f64,
    /// Frames a lost track survives before removal.
    pub max_lost: u64,
    /// Weight of the old embedding in the moving average.
    pub ema_alpha: f64,
    /// Similarity constants for the normalized shape distance.
    pub np_params: NmsParams,
    pub process_noise: f64,
    pub measurement_noise: f64,
}

impl Default for MsimConfig {
    fn default() -> Self {
        Self {
            mu_emb: 0.7,
            mu_f: 0.5,
            lambda_np: 1.0,
            relax_factor: 2.0 / 3.0,
            max_lost: 30,
            ema_alpha: 0.9,
            np_params: NmsParams::default_normalized(),
            process_noise: 1e-2,
            measurement_noise: 1e-9,
        }
    }
}

impl MsimConfig {
    pub fn validate(&self) -> Result<()> {
        let thresholds_ok = self.mu_emb > 0.0 && self.mu_emb <= 1.0 && self.mu_f > 0.0 && self.mu_f <= 1.0;
        if !thresholds_ok {
            return Err(Error::InvalidArgument("matching thresholds must lie in (0,1]".into()));
        }
        if !(self.relax_factor > 0.0 && self.relax_factor < 1.0) {
            return Err(Error::InvalidArgument("relax_factor must lie in (0,1)".into()));
        }
        if !(self.lambda_np >= 0.0 && self.ema_alpha >= 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::InvalidArgument("lambda_np must be nonnegative and ema_alpha in [0,1]".into()));
        }
        if self.max_lost == 0 {
            return Err(Error::InvalidArgument("max_lost must be at least 1".into()));
        }
        if !(self.process_noise >= 0.0 && self.measurement_noise >= 0.0) {
            return Err(Error::InvalidArgument("noise terms must be nonnegative".into()));
        }
        self.np_params.validate()
    }
}

/// All identities of one stream. Ids start at 1 and are never reused.
#[derive(Debug, Clone, Default)]
pub struct TrackPool {
    tracks: Vec<Track>,
    next_id: u64,
}

impl TrackPool {
    pub fn new() -> Self {
        Self { tracks: Vec::new(), next_id: 1 }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    fn live_indices(&self) -> Vec<usize> {
        (0..self.tracks.len()).filter(|&i| self.tracks[i].status != TrackStatus::Removed).collect()
    }
}

fn ema_embedding(old: &IdentityEmbedding, new: &IdentityEmbedding, alpha: f64) -> IdentityEmbedding {
    let mixed: Vec<f64> = old.values().iter().zip(new.values()).map(|(o, n)| alpha * o + (1.0 - alpha) * n).collect();
    // Antipodal inputs can cancel out; keep the fresh measurement then.
    IdentityEmbedding::from_unnormalized(mixed).unwrap_or_else(|_| new.clone())
}

/// Runs one frame of multi-stage matching against the pool and mutates
/// it: matched tracks are corrected and re-activated, unmatched tracks
/// age toward removal, unmatched detections found new tracks. Returns
/// one (detection index, track id) pair per detection, by index.
pub fn msim_step(frame: &crate::pipeline::FrameBundle, pool: &mut TrackPool, cfg: &MsimConfig) -> Result<Vec<(usize, u64)>> {
    cfg.validate()?;
    let poses = frame.poses.as_ref().ok_or(Error::EmptyInput("bundle poses"))?;
    let embeddings: Vec<Option<&IdentityEmbedding>> =
        (0..poses.len()).map(|i| frame.embeddings.get(i).and_then(|e| e.as_ref())).collect();

    for idx in pool.live_indices() {
        pool.tracks[idx].kalman.predict(cfg.process_noise);
    }

    let live = pool.live_indices();
    let mut det_matched: Vec<Option<usize>> = vec![None; poses.len()];
    let mut track_taken: Vec<bool> = vec![false; pool.tracks.len()];

    // Stage 1: embedding affinity over pairs where both sides carry one.
    let det_rows: Vec<usize> = (0..poses.len()).filter(|&i| embeddings[i].is_some()).collect();
    let track_cols: Vec<usize> = live.iter().copied().filter(|&t| pool.tracks[t].embedding.is_some()).collect();
    if !det_rows.is_empty() && !track_cols.is_empty() {
        let det_embs: Vec<IdentityEmbedding> = det_rows.iter().map(|&i| embeddings[i].unwrap().clone()).collect();
        let track_embs: Vec<IdentityEmbedding> =
            track_cols.iter().map(|&t| pool.tracks[t].embedding.clone().unwrap()).collect();
        let m = embedding_affinity(&det_embs, &track_embs);
        for (row, col) in stage1_match(&m, cfg.mu_emb).links {
            det_matched[det_rows[row]] = Some(track_cols[col]);
            track_taken[track_cols[col]] = true;
        }
    }

    // Stages 2 and 3: fusion cost, then the same rule relaxed.
    for threshold in [cfg.mu_f, cfg.mu_f / cfg.relax_factor] {
        let det_rows: Vec<usize> = (0..poses.len()).filter(|&i| det_matched[i].is_none()).collect();
        let track_cols: Vec<usize> = live.iter().copied().filter(|&t| !track_taken[t]).collect();
        if det_rows.is_empty() || track_cols.is_empty() {
            break;
        }
        let dets: Vec<&Pose> = det_rows.iter().map(|&i| &poses[i]).collect();
        let boxes: Vec<DetectionBox> = track_cols.iter().map(|&t| pool.tracks[t].kalman.as_box()).collect();
        let last: Vec<&Pose> = track_cols.iter().map(|&t| &pool.tracks[t].last_pose).collect();
        let m = fusion_matrix(&dets, &boxes, &last, cfg.lambda_np, &cfg.np_params)?;
        for (row, col) in stage1_match(&m, threshold).links {
            det_matched[det_rows[row]] = Some(track_cols[col]);
            track_taken[track_cols[col]] = true;
        }
    }

    // Commit matches, then births and aging.
    let mut out = Vec::with_capacity(poses.len());
    for (det, slot) in det_matched.iter().enumerate() {
        let id = match *slot {
            Some(track_idx) => {
                let track = &mut pool.tracks[track_idx];
                track.kalman.update(&poses[det].bbox, cfg.measurement_noise);
                track.last_pose = poses[det].clone();
                track.last_seen = frame.frame;
                track.status = TrackStatus::Active;
                if let Some(e) = embeddings[det] {
                    track.embedding = Some(match &track.embedding {
                        Some(old) => ema_embedding(old, e, cfg.ema_alpha),
                        None => e.clone(),
                    });
                }
                track.id
            }
            None => {
                let id = pool.next_id;
                pool.next_id += 1;
                pool.tracks.push(Track {
                    id,
                    kalman: BoxKalman::from_box(&poses[det].bbox),
                    last_pose: poses[det].clone(),
                    embedding: embeddings[det].cloned(),
                    last_seen: frame.frame,
                    status: TrackStatus::Active,
                });
                id
            }
        };
        out.push((det, id));
    }
    for track in pool.tracks.iter_mut() {
        if track.status == TrackStatus::Removed || track.last_seen == frame.frame {
            continue;
        }
        track.status = if frame.frame - track.last_seen > cfg.max_lost {
            TrackStatus::Removed
        } else {
            TrackStatus::Lost
        };
    }
    Ok(out)
}
