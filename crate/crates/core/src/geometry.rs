//! Geometric primitives shared by every stage of the pipeline.
//!
//! All coordinates are continuous pixels in frame space unless a type says
//! otherwise. Boxes are stored as top-left corner plus width and height.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

/// Number of keypoint slots in the elephant skeleton.
pub const KEYPOINT_COUNT: usize = 8;

/// Keypoint names in slot order.
pub const KEYPOINT_NAMES: [&str; KEYPOINT_COUNT] =
    ["forehead", "ear_base_l", "ear_base_r", "skull_base", "shoulders", "hips", "ear_tip_l", "ear_tip_r"];

/// Default skeleton edges (0-based slot indices).
pub const DEFAULT_EDGES: [(usize, usize); 7] = [(0, 3), (3, 1), (3, 2), (1, 6), (2, 7), (3, 4), (4, 5)];

/// Default per-keypoint OKS falloff constant.
pub const DEFAULT_FALLOFF: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box width and height must be positive (got w={w}, h={h})")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("affine map scale must be positive (got {0})")]
    NonPositiveScale(f64),
    #[error("skeleton size mismatch: expected {expected} keypoints, found {found}")]
    SkeletonSizeMismatch { expected: usize, found: usize },
    #[error("skeleton slot {slot} should be named {expected:?}, found {found:?}")]
    SkeletonNameMismatch { slot: usize, expected: &'static str, found: String },
    #[error("skeleton edge ({0}, {1}) references a missing slot")]
    EdgeOutOfRange(usize, usize),
    #[error("falloff constant for slot {slot} must be positive (got {value})")]
    NonPositiveFalloff { slot: usize, value: f64 },
    #[error("instance {id} does not intersect the {width}x{height} frame")]
    OutsideFrame { id: u64, width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance_sq(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Axis-aligned box, top-left corner plus extent. Width and height are
/// always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(try_from = "[f64; 4]", into = "[f64; 4]")
)]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::NonPositiveSize { w, h });
        }
        Ok(BBox { x, y, w, h })
    }

    /// Builds a box from `(x1, y1)`-`(x2, y2)` corners in any order.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let (l, r) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
        let (t, b) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        BBox::new(l, t, r - l, b - t)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.x
    }
    #[inline]
    pub fn y(&self) -> f64 {
        self.y
    }
    #[inline]
    pub fn w(&self) -> f64 {
        self.w
    }
    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }
    #[inline]
    pub fn right(&self) -> f64 {
        self.x + self.w
    }
    #[inline]
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Largest side length.
    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        iw.max(0.0) * ih.max(0.0)
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        if self == other {
            return 1.0;
        }
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).min(1.0)
    }

    /// The part of `self` inside `other`, or `None` when they do not overlap
    /// with positive area.
    pub fn clip_to(&self, other: &BBox) -> Option<BBox> {
        let l = self.x.max(other.x);
        let t = self.y.max(other.y);
        let r = self.right().min(other.right());
        let b = self.bottom().min(other.bottom());
        BBox::new(l, t, r - l, b - t).ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x: self.x + dx, y: self.y + dy, ..*self }
    }

    /// True when the box overlaps the `[0, width] x [0, height]` rectangle.
    pub fn intersects_frame(&self, width: u32, height: u32) -> bool {
        self.x < f64::from(width) && self.right() > 0.0 && self.y < f64::from(height) && self.bottom() > 0.0
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Per-keypoint label state. Integer codes follow the COCO convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Visibility {
    #[default]
    NotLabeled,
    Occluded,
    Visible,
}

impl Visibility {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Visibility::NotLabeled),
            1 => Some(Visibility::Occluded),
            2 => Some(Visibility::Visible),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Visibility::NotLabeled => 0,
            Visibility::Occluded => 1,
            Visibility::Visible => 2,
        }
    }
}

/// A keypoint; its slot index is its position inside [`Pose`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub vis: Visibility,
}

impl Keypoint {
    pub const NOT_LABELED: Keypoint = Keypoint { x: 0.0, y: 0.0, vis: Visibility::NotLabeled };

    pub const fn new(x: f64, y: f64, vis: Visibility) -> Self {
        Keypoint { x, y, vis }
    }

    pub const fn visible(x: f64, y: f64) -> Self {
        Keypoint::new(x, y, Visibility::Visible)
    }

    pub fn is_labeled(&self) -> bool {
        self.vis != Visibility::NotLabeled
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Fixed-length pose; missing annotations are `NotLabeled` slots.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pose {
    pub keypoints: [Keypoint; KEYPOINT_COUNT],
}

impl Pose {
    pub const fn new(keypoints: [Keypoint; KEYPOINT_COUNT]) -> Self {
        Pose { keypoints }
    }

    pub fn unlabeled() -> Self {
        Pose::default()
    }

    pub fn labeled_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_labeled()).count()
    }

    /// Applies `f` to the coordinates of every labeled slot. Visibility is
    /// left untouched and `NotLabeled` slots are passed through.
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> Pose {
        let mut out = *self;
        for kp in out.keypoints.iter_mut().filter(|k| k.is_labeled()) {
            let p = f(kp.point());
            kp.x = p.x;
            kp.y = p.y;
        }
        out
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Pose {
        self.map_points(|p| Point::new(p.x + dx, p.y + dy))
    }
}

/// Keypoint layout plus OKS falloff constants.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Skeleton {
    edges: Vec<(usize, usize)>,
    falloff: [f64; KEYPOINT_COUNT],
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton { edges: DEFAULT_EDGES.to_vec(), falloff: [DEFAULT_FALLOFF; KEYPOINT_COUNT] }
    }
}

impl Skeleton {
    /// Validates a named keypoint list (as found in annotation files) against
    /// the fixed slot order.
    pub fn from_names<S: AsRef<str>>(names: &[S], edges: Vec<(usize, usize)>) -> Result<Self, GeometryError> {
        if names.len() != KEYPOINT_COUNT {
            return Err(GeometryError::SkeletonSizeMismatch { expected: KEYPOINT_COUNT, found: names.len() });
        }
        for (slot, (found, expected)) in names.iter().zip(KEYPOINT_NAMES).enumerate() {
            if found.as_ref() != expected {
                return Err(GeometryError::SkeletonNameMismatch { slot, expected, found: found.as_ref().into() });
            }
        }
        Skeleton::default().with_edges(edges)
    }

    pub fn with_edges(mut self, edges: Vec<(usize, usize)>) -> Result<Self, GeometryError> {
        if let Some(&(a, b)) = edges.iter().find(|(a, b)| *a >= KEYPOINT_COUNT || *b >= KEYPOINT_COUNT) {
            return Err(GeometryError::EdgeOutOfRange(a, b));
        }
        self.edges = edges;
        Ok(self)
    }

    pub fn with_falloff(mut self, falloff: [f64; KEYPOINT_COUNT]) -> Result<Self, GeometryError> {
        for (slot, &value) in falloff.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GeometryError::NonPositiveFalloff { slot, value });
            }
        }
        self.falloff = falloff;
        Ok(self)
    }

    pub fn names(&self) -> &'static [&'static str; KEYPOINT_COUNT] {
        &KEYPOINT_NAMES
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn falloff(&self) -> &[f64; KEYPOINT_COUNT] {
        &self.falloff
    }

    pub fn len(&self) -> usize {
        KEYPOINT_COUNT
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum InstanceKind {
    GroundTruth,
    Prediction { score: f64 },
}

/// One annotated or predicted animal.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Instance {
    pub id: u64,
    pub bbox: BBox,
    pub pose: Option<Pose>,
    pub kind: InstanceKind,
}

impl Instance {
    pub fn ground_truth(id: u64, bbox: BBox, pose: Option<Pose>) -> Self {
        Instance { id, bbox, pose, kind: InstanceKind::GroundTruth }
    }

    pub fn prediction(id: u64, bbox: BBox, pose: Option<Pose>, score: f64) -> Result<Self, GeometryError> {
        check_score(score)?;
        Ok(Instance { id, bbox, pose, kind: InstanceKind::Prediction { score } })
    }

    pub fn score(&self) -> Option<f64> {
        match self.kind {
            InstanceKind::GroundTruth => None,
            InstanceKind::Prediction { score } => Some(score),
        }
    }

    pub fn is_prediction(&self) -> bool {
        matches!(self.kind, InstanceKind::Prediction { .. })
    }

    /// Geometry moved by `(dx, dy)`; pose visibility is preserved.
    pub fn translated(&self, dx: f64, dy: f64) -> Instance {
        Instance { bbox: self.bbox.translate(dx, dy), pose: self.pose.map(|p| p.translate(dx, dy)), ..self.clone() }
    }

    /// Geometry mapped through `m` (box and pose).
    pub fn mapped(&self, m: &AffineMap) -> Instance {
        Instance { bbox: m.apply_bbox(&self.bbox), pose: self.pose.map(|p| m.apply_pose(&p)), ..self.clone() }
    }
}

pub(crate) fn check_score(score: f64) -> Result<(), GeometryError> {
    if (0.0..=1.0).contains(&score) {
        Ok(())
    } else {
        Err(GeometryError::ScoreOutOfRange(score))
    }
}

/// Identifies a frame inside a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameKey {
    pub video_id: String,
    pub frame_index: u32,
}

impl FrameKey {
    pub fn new(video_id: impl Into<String>, frame_index: u32) -> Self {
        FrameKey { video_id: video_id.into(), frame_index }
    }
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.video_id, self.frame_index)
    }
}

/// All instances on one video frame.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: u32,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<Instance>,
}

impl FrameRecord {
    pub fn key(&self) -> FrameKey {
        FrameKey::new(self.video_id.clone(), self.frame_index)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for inst in &self.instances {
            if !inst.bbox.intersects_frame(self.width, self.height) {
                return Err(GeometryError::OutsideFrame { id: inst.id, width: self.width, height: self.height });
            }
        }
        Ok(())
    }
}

/// Uniform scale followed by a translation: `p -> p * scale + (dx, dy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AffineMap {
    scale: f64,
    dx: f64,
    dy: f64,
}

impl Default for AffineMap {
    fn default() -> Self {
        AffineMap::IDENTITY
    }
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap { scale: 1.0, dx: 0.0, dy: 0.0 };

    pub fn new(scale: f64, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && dx.is_finite() && dy.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if scale <= 0.0 {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        Ok(AffineMap { scale, dx, dy })
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineMap { scale: 1.0, dx, dy }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn offset(&self) -> Point {
        Point::new(self.dx, self.dy)
    }

    pub fn apply(&self, p: Point) -> Point {
        Point::new(p.x * self.scale + self.dx, p.y * self.scale + self.dy)
    }

    pub fn apply_keypoint(&self, kp: &Keypoint) -> Keypoint {
        if !kp.is_labeled() {
            return *kp;
        }
        let p = self.apply(kp.point());
        Keypoint::new(p.x, p.y, kp.vis)
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        pose.map_points(|p| self.apply(p))
    }

    pub fn apply_bbox(&self, b: &BBox) -> BBox {
        let o = self.apply(Point::new(b.x, b.y));
        BBox { x: o.x, y: o.y, w: b.w * self.scale, h: b.h * self.scale }
    }

    pub fn invert(&self) -> AffineMap {
        AffineMap { scale: 1.0 / self.scale, dx: -self.dx / self.scale, dy: -self.dy / self.scale }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &AffineMap) -> AffineMap {
        AffineMap {
            scale: self.scale * next.scale,
            dx: self.dx * next.scale + next.dx,
            dy: self.dy * next.scale + next.dy,
        }
    }
}

/// Inverse of a map given by raw parameters; rejects non-positive scales.
pub fn invert_map(scale: f64, dx: f64, dy: f64) -> Result<AffineMap, GeometryError> {
    AffineMap::new(scale, dx, dy).map(|m| m.invert())
}
