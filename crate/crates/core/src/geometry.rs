//! Shared geometric types: skeleton layouts, keypoints, poses, detection
//! boxes and heatmap grids.
//!
//! Pixel convention: grid index `i` sits at continuous coordinate `i`
//! (pixel centers on the integer lattice). Boxes are continuous and may
//! extend beyond image bounds.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single 2D keypoint with a confidence in `[0, 1]`.
///
/// For ground-truth data the confidence doubles as a visibility flag:
/// `0.0` marks an unlabeled joint, anything positive marks a labeled one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    /// Euclidean distance to another keypoint.
    pub fn distance(&self, other: &Keypoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Labeled means the confidence (visibility) is strictly positive.
    pub fn is_labeled(&self) -> bool {
        self.confidence > 0.0
    }
}

/// Axis-aligned detection box in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub category: u32,
}

impl DetectionBox {
    /// Builds a box, rejecting degenerate extents. Min must be strictly
    /// below max on both axes; zero-area boxes are not representable.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, score: f64, category: u32) -> Result<Self> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite() && score.is_finite()) {
            return Err(Error::NonFinite("detection box"));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox);
        }
        Ok(Self { x_min, y_min, x_max, y_max, score, category })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Point containment with inclusive edges.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Intersection over union of two boxes. Zero when they do not overlap.
pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Window centered on a keypoint whose extent is `fraction` of the
/// reference box's width and height. Used as the acceptance region when
/// comparing corresponding joints of two pose candidates.
pub fn crop_box_around(k: &Keypoint, reference: &DetectionBox, fraction: f64) -> Result<DetectionBox> {
    if !(fraction > 0.0 && fraction.is_finite()) {
        return Err(Error::InvalidArgument(format!("window fraction must be positive, got {fraction}")));
    }
    let hw = reference.width() * fraction / 2.0;
    let hh = reference.height() * fraction / 2.0;
    DetectionBox::new(k.x - hw, k.y - hh, k.x + hw, k.y + hh, reference.score, reference.category)
}

/// A named contiguous run of joints inside a layout, e.g. `face`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartRange {
    pub name: String,
    /// Half-open `[start, end)` joint index range.
    pub start: usize,
    pub end: usize,
}

/// Joint naming, part grouping and per-joint OKS constants for one skeleton
/// convention.
///
/// Parts must be disjoint contiguous ranges that exactly cover
/// `0..joint_count`. The per-joint constants `oks_k` scale the keypoint
/// similarity falloff used by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonLayout {
    name: String,
    joint_names: Vec<String>,
    parts: Vec<PartRange>,
    oks_k: Vec<f64>,
}

/// Serialized form of a layout descriptor.
#[derive(Debug, Serialize, Deserialize)]
struct LayoutDescriptor {
    name: String,
    joint_names: Vec<String>,
    part_ranges: BTreeMap<String, [usize; 2]>,
    oks_k: Vec<f64>,
}

impl SkeletonLayout {
    pub fn new(name: impl Into<String>, joint_names: Vec<String>, parts: Vec<PartRange>, oks_k: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let n = joint_names.len();
        if n == 0 {
            return Err(Error::InvalidLayout("layout needs at least one joint".into()));
        }
        if oks_k.len() != n {
            return Err(Error::InvalidLayout(format!("oks_k has {} entries for {} joints", oks_k.len(), n)));
        }
        if oks_k.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(Error::InvalidLayout("oks_k entries must be positive".into()));
        }
        let mut sorted = parts.clone();
        sorted.sort_by_key(|p| p.start);
        let mut cursor = 0;
        for p in &sorted {
            if p.start != cursor || p.end <= p.start {
                return Err(Error::InvalidLayout(format!("part `{}` breaks the disjoint cover of 0..{n}", p.name)));
            }
            cursor = p.end;
        }
        if cursor != n {
            return Err(Error::InvalidLayout(format!("parts cover 0..{cursor} but the layout has {n} joints")));
        }
        Ok(Self { name, joint_names, parts: sorted, oks_k })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parts(&self) -> &[PartRange] {
        &self.parts
    }

    pub fn oks_k(&self) -> &[f64] {
        &self.oks_k
    }

    /// Index of a joint by name.
    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Head and neck joint indices, when the layout names them. Needed for
    /// PCKh distance normalization.
    pub fn head_neck(&self) -> Option<(usize, usize)> {
        Some((self.joint_index("head")?, self.joint_index("neck")?))
    }

    /// Joint indices belonging to a part. A query also matches any part
    /// carrying it as a suffix, so `hand` collects `left_hand` and
    /// `right_hand`.
    pub fn part_joints(&self, part: &str) -> Option<Vec<usize>> {
        let suffix = format!("_{part}");
        let mut joints = Vec::new();
        for p in &self.parts {
            if p.name == part || p.name.ends_with(&suffix) {
                joints.extend(p.start..p.end);
            }
        }
        if joints.is_empty() {
            None
        } else {
            Some(joints)
        }
    }

    /// Parses a JSON descriptor with fields `name`, `joint_names`,
    /// `part_ranges` (name to `[start, end)` pairs) and `oks_k`.
    pub fn from_json(text: &str) -> Result<Self> {
        let d: LayoutDescriptor = serde_json::from_str(text)?;
        let parts = d
            .part_ranges
            .into_iter()
            .map(|(name, [start, end])| PartRange { name, start, end })
            .collect();
        Self::new(d.name, d.joint_names, parts, d.oks_k)
    }

    pub fn to_json(&self) -> String {
        let d = LayoutDescriptor {
            name: self.name.clone(),
            joint_names: self.joint_names.clone(),
            part_ranges: self.parts.iter().map(|p| (p.name.clone(), [p.start, p.end])).collect(),
            oks_k: self.oks_k.clone(),
        };
        serde_json::to_string_pretty(&d).expect("descriptor serializes")
    }

    /// Looks up a built-in layout by name.
    pub fn builtin(name: &str) -> Option<Arc<SkeletonLayout>> {
        match name {
            "halpe136" => Some(halpe136()),
            "coco17" => Some(coco17()),
            _ => None,
        }
    }
}

/// OKS falloff constants for the 17 standard body joints, in the usual
/// order nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
const BODY17_K: [f64; 17] = [
    0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214, 0.174, 0.174, 0.178,
    0.178,
];

const BODY17_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Falloff constant for joints outside the 17 standard body joints
/// (feet, face, hands and the extra head/neck/hip points).
pub const FINE_JOINT_K: f64 = 0.015;

/// 136-joint whole-body layout: 20 body, 6 foot, 68 face and 2x21 hand
/// joints.
pub fn halpe136() -> Arc<SkeletonLayout> {
    let mut names: Vec<String> = BODY17_NAMES.iter().map(|s| s.to_string()).collect();
    names.extend(["head", "neck", "hip"].map(String::from));
    names.extend(
        ["left_big_toe", "right_big_toe", "left_small_toe", "right_small_toe", "left_heel", "right_heel"]
            .map(String::from),
    );
    names.extend((0..68).map(|i| format!("face_{i}")));
    names.extend((0..21).map(|i| format!("left_hand_{i}")));
    names.extend((0..21).map(|i| format!("right_hand_{i}")));

    let mut k = BODY17_K.to_vec();
    k.extend(std::iter::repeat_n(FINE_JOINT_K, 136 - 17));

    let parts = vec![
        PartRange { name: "body".into(), start: 0, end: 20 },
        PartRange { name: "foot".into(), start: 20, end: 26 },
        PartRange { name: "face".into(), start: 26, end: 94 },
        PartRange { name: "left_hand".into(), start: 94, end: 115 },
        PartRange { name: "right_hand".into(), start: 115, end: 136 },
    ];
    Arc::new(SkeletonLayout::new("halpe136", names, parts, k).expect("builtin layout is valid"))
}

/// Standard 17-joint body-only layout.
pub fn coco17() -> Arc<SkeletonLayout> {
    let names: Vec<String> = BODY17_NAMES.iter().map(|s| s.to_string()).collect();
    let parts = vec![PartRange { name: "body".into(), start: 0, end: 17 }];
    Arc::new(SkeletonLayout::new("coco17", names, parts, BODY17_K.to_vec()).expect("builtin layout is valid"))
}

/// A decoded or annotated person instance: one keypoint per layout joint,
/// an overall score and the box it was derived from.
#[derive(Debug, Clone)]
pub struct Pose {
    layout: Arc<SkeletonLayout>,
    pub keypoints: Vec<Keypoint>,
    pub score: f64,
    pub bbox: DetectionBox,
}

impl Pose {
    pub fn new(layout: Arc<SkeletonLayout>, keypoints: Vec<Keypoint>, score: f64, bbox: DetectionBox) -> Result<Self> {
        if keypoints.len() != layout.joint_count() {
            return Err(Error::JointCountMismatch { expected: layout.joint_count(), got: keypoints.len() });
        }
        if !score.is_finite() || score < 0.0 {
            return Err(Error::InvalidArgument(format!("pose score must be finite and nonnegative, got {score}")));
        }
        if keypoints.iter().any(|k| !(k.x.is_finite() && k.y.is_finite()) || !(0.0..=1.0).contains(&k.confidence)) {
            return Err(Error::InvalidArgument("keypoints must be finite with confidence in [0, 1]".into()));
        }
        Ok(Self { layout, keypoints, score, bbox })
    }

    pub fn layout(&self) -> &Arc<SkeletonLayout> {
        &self.layout
    }

    pub fn joint_count(&self) -> usize {
        self.keypoints.len()
    }

    /// Tight axis-aligned box around the labeled keypoints, or `None` when
    /// no keypoint is labeled or the extent is degenerate.
    pub fn tight_bbox(&self, score: f64, category: u32) -> Option<DetectionBox> {
        let labeled: Vec<&Keypoint> = self.keypoints.iter().filter(|k| k.is_labeled()).collect();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in labeled {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        DetectionBox::new(x0, y0, x1, y1, score, category).ok()
    }
}

/// Which quantity a heatmap grid stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapKind {
    /// Raw network outputs. NaN and `+inf` are rejected; `-inf` is admitted
    /// and marks cells carrying no evidence.
    Logits,
    /// Per-cell confidences, strictly inside `(0, 1)`.
    Confidence,
    /// Per-joint distributions: nonnegative, each joint plane sums to 1
    /// within 1e-6.
    Probability,
}

impl HeatmapKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeatmapKind::Logits => "logits",
            HeatmapKind::Confidence => "confidence",
            HeatmapKind::Probability => "probability",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            HeatmapKind::Logits => 0,
            HeatmapKind::Confidence => 1,
            HeatmapKind::Probability => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(HeatmapKind::Logits),
            1 => Ok(HeatmapKind::Confidence),
            2 => Ok(HeatmapKind::Probability),
            other => Err(Error::Format(format!("unknown heatmap kind code {other}"))),
        }
    }
}

const PROB_SUM_TOL: f64 = 1e-6;

/// Dense `joints x height x width` grid of f64 values with a declared kind.
///
/// Data is row-major within each joint plane: index `(j, y, x)` maps to
/// `j * height * width + y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    joints: usize,
    height: usize,
    width: usize,
    kind: HeatmapKind,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(joints: usize, height: usize, width: usize, kind: HeatmapKind, data: Vec<f64>) -> Result<Self> {
        if joints == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("heatmap dimensions must be nonzero".into()));
        }
        if data.len() != joints * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {joints}x{height}x{width}, got {}",
                joints * height * width,
                data.len()
            )));
        }
        let hm = Self { joints, height, width, kind, data };
        hm.validate()?;
        Ok(hm)
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            HeatmapKind::Logits => {
                if self.data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                    return Err(Error::NonFinite("logit heatmap"));
                }
            }
            HeatmapKind::Confidence => {
                if self.data.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                    return Err(Error::InvalidArgument("confidence heatmap values must lie in (0, 1)".into()));
                }
            }
            HeatmapKind::Probability => {
                if self.data.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidArgument("probability heatmap values must be nonnegative".into()));
                }
                for j in 0..self.joints {
                    let sum: f64 = self.plane(j).iter().sum();
                    if (sum - 1.0).abs() > PROB_SUM_TOL {
                        return Err(Error::InvalidArgument(format!("joint plane {j} sums to {sum}, not 1")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> HeatmapKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, j: usize, y: usize, x: usize) -> f64 {
        debug_assert!(j < self.joints && y < self.height && x < self.width);
        self.data[(j * self.height + y) * self.width + x]
    }

    /// Row-major view of one joint plane.
    pub fn plane(&self, j: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[j * hw..(j + 1) * hw]
    }

    /// Requires the heatmap to store the given kind before an operation
    /// that only makes sense for it.
    pub fn expect_kind(&self, kind: HeatmapKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch { expected: kind.as_str(), got: self.kind.as_str() });
        }
        Ok(())
    }
}
