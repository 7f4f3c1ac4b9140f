//! Deterministic synthetic herd scenarios.
//!
//! Animals move with constant speed and a randomly drifting heading,
//! reflecting off the frame edges. Each carries a rigid 8-keypoint body
//! template scaled to its body length and rotated to its heading. Predictions
//! are produced from the ground truth by a configurable corruption model, and
//! a correspondence table records which animal (if any) each prediction came
//! from, so evaluation code can be checked against known answers.
//!
//! Randomness comes from xoshiro256++ seeded through SplitMix64
//! (`rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64`). Motion draws and
//! corruption draws use separate streams (the corruption stream is the motion
//! stream after one `jump()`), so changing the corruption settings never
//! changes the ground truth.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, PredictionSet};
use crate::geometry::{
    BBox, FrameKey, FrameRecord, Instance, Keypoint, Point, Pose, Skeleton, Visibility, KEYPOINT_COUNT,
};

/// Body template, in body lengths, forward along +x.
const TEMPLATE: [(f64, f64); KEYPOINT_COUNT] = [
    (0.50, 0.00),  // forehead
    (0.30, 0.12),  // ear_base_l
    (0.30, -0.12), // ear_base_r
    (0.28, 0.00),  // skull_base
    (0.10, 0.00),  // shoulders
    (-0.40, 0.00), // hips
    (0.22, 0.30),  // ear_tip_l
    (0.22, -0.30), // ear_tip_r
];
const EAR_SLOTS: [usize; 4] = [1, 2, 6, 7];
/// Body ellipse semi-axes, in body lengths.
const BODY_HALF_LENGTH: f64 = 0.5;
const BODY_HALF_WIDTH: f64 = 0.2;
/// Radius around the center that contains the whole body, in body lengths.
const REACH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid scenario parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MotionConfig {
    /// Speed range, px per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-frame heading change standard deviation, radians.
    pub heading_sigma: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig { speed_min: 0.5, speed_max: 3.0, heading_sigma: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum ScoreModel {
    Beta { tp_alpha: f64, tp_beta: f64, fp_alpha: f64, fp_beta: f64 },
    Constant { tp: f64, fp: f64 },
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel::Beta { tp_alpha: 8.0, tp_beta: 2.0, fp_alpha: 2.0, fp_beta: 8.0 }
    }
}

/// An animal missing from the predictions for `length` frames starting at
/// `start_frame` (frame index, not offset).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dropout {
    pub animal: u32,
    pub start_frame: u32,
    pub length: u32,
}

impl Dropout {
    fn covers(&self, animal: u32, frame: u32) -> bool {
        self.animal == animal && frame >= self.start_frame && frame - self.start_frame < self.length
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CorruptionConfig {
    /// Std. dev. of box center and size noise, px.
    pub bbox_jitter: f64,
    /// Std. dev. of each keypoint coordinate, px.
    pub keypoint_jitter: f64,
    /// Mean false positives per frame; the integer part is always injected,
    /// the fractional part is a per-frame Bernoulli draw.
    pub false_positives_per_frame: f64,
    /// Probability that an animal is not detected on a frame.
    pub miss_rate: f64,
    pub score: ScoreModel,
    pub dropouts: Vec<Dropout>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthScenario {
    pub seed: u64,
    pub video_id: String,
    pub n_animals: u32,
    pub frame_width: u32,
    pub frame_height: u32,
    pub n_frames: u32,
    pub first_frame: u32,
    /// Body length range, px.
    pub size_min: f64,
    pub size_max: f64,
    /// Animals shorter than this get their ear keypoints marked occluded.
    pub occlude_ears_below: f64,
    pub motion: MotionConfig,
    pub corruption: CorruptionConfig,
}

impl Default for SynthScenario {
    fn default() -> Self {
        SynthScenario {
            seed: 0,
            video_id: "synth".into(),
            n_animals: 10,
            frame_width: 3840,
            frame_height: 2160,
            n_frames: 20,
            first_frame: 0,
            size_min: 8.0,
            size_max: 70.0,
            occlude_ears_below: 0.0,
            motion: MotionConfig::default(),
            corruption: CorruptionConfig::default(),
        }
    }
}

impl SynthScenario {
    pub fn validate(&self) -> Result<(), SynthError> {
        use SynthError::InvalidParameter as Bad;
        let c = &self.corruption;
        let m = &self.motion;
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max.is_finite()) {
            return Err(Bad("size range must satisfy 0 < size_min <= size_max"));
        }
        if f64::from(self.frame_width.min(self.frame_height)) < 2.0 * REACH * self.size_max {
            return Err(Bad("frame too small for the largest animal"));
        }
        if !(m.speed_min >= 0.0 && m.speed_min <= m.speed_max && m.speed_max.is_finite()) {
            return Err(Bad("speed range must satisfy 0 <= speed_min <= speed_max"));
        }
        if !(m.heading_sigma >= 0.0 && c.bbox_jitter >= 0.0 && c.keypoint_jitter >= 0.0) {
            return Err(Bad("standard deviations must be non-negative"));
        }
        if !((0.0..=1.0).contains(&c.miss_rate)) {
            return Err(Bad("miss_rate must lie in [0, 1]"));
        }
        if !(c.false_positives_per_frame >= 0.0 && c.false_positives_per_frame.is_finite()) {
            return Err(Bad("false_positives_per_frame must be non-negative"));
        }
        match c.score {
            ScoreModel::Beta { tp_alpha, tp_beta, fp_alpha, fp_beta } => {
                if !(tp_alpha > 0.0 && tp_beta > 0.0 && fp_alpha > 0.0 && fp_beta > 0.0) {
                    return Err(Bad("beta parameters must be positive"));
                }
            }
            ScoreModel::Constant { tp, fp } => {
                if !((0.0..=1.0).contains(&tp) && (0.0..=1.0).contains(&fp)) {
                    return Err(Bad("constant scores must lie in [0, 1]"));
                }
            }
        }
        if c.dropouts.iter().any(|d| d.animal >= self.n_animals) {
            return Err(Bad("dropout references a missing animal"));
        }
        Ok(())
    }
}

/// Origin of a synthetic prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Truth {
    Animal(u32),
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Correspondence {
    pub frame: FrameKey,
    pub prediction: u64,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroundTruthIdentity {
    pub frame: FrameKey,
    pub instance: u64,
    pub animal: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub predictions: PredictionSet,
    /// Exactly one entry per prediction.
    pub correspondence: Vec<Correspondence>,
    pub identities: Vec<GroundTruthIdentity>,
}

#[derive(Debug, Clone, Copy)]
struct Animal {
    center: Point,
    heading: f64,
    speed: f64,
    length: f64,
}

fn body_pose(center: Point, heading: f64, length: f64) -> Pose {
    let (s, c) = (libm::sin(heading), libm::cos(heading));
    Pose::new(TEMPLATE.map(|(bx, by)| {
        let (x, y) = (bx * length, by * length);
        Keypoint::visible(center.x + c * x - s * y, center.y + s * x + c * y)
    }))
}

fn body_bbox(center: Point, heading: f64, length: f64, pose: &Pose) -> BBox {
    let (s, c) = (libm::sin(heading), libm::cos(heading));
    let (a, b) = (BODY_HALF_LENGTH * length, BODY_HALF_WIDTH * length);
    let hx = libm::sqrt((a * c) * (a * c) + (b * s) * (b * s));
    let hy = libm::sqrt((a * s) * (a * s) + (b * c) * (b * c));
    let (mut l, mut r, mut t, mut btm) = (center.x - hx, center.x + hx, center.y - hy, center.y + hy);
    for kp in &pose.keypoints {
        l = l.min(kp.x);
        r = r.max(kp.x);
        t = t.min(kp.y);
        btm = btm.max(kp.y);
    }
    BBox::from_corners(l, t, r, btm).expect("bodies have positive extent")
}

fn reflect(v: f64, lo: f64, hi: f64) -> (f64, bool) {
    if v < lo {
        ((2.0 * lo - v).min(hi), true)
    } else if v > hi {
        ((2.0 * hi - v).max(lo), true)
    } else {
        (v, false)
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("validated sigma")
}

struct Scorer {
    tp: Option<Beta<f64>>,
    fp: Option<Beta<f64>>,
    constant: (f64, f64),
}

impl Scorer {
    fn new(model: ScoreModel) -> Self {
        match model {
            ScoreModel::Beta { tp_alpha, tp_beta, fp_alpha, fp_beta } => Scorer {
                tp: Beta::new(tp_alpha, tp_beta).ok(),
                fp: Beta::new(fp_alpha, fp_beta).ok(),
                constant: (0.0, 0.0),
            },
            ScoreModel::Constant { tp, fp } => Scorer { tp: None, fp: None, constant: (tp, fp) },
        }
    }

    fn true_positive(&self, rng: &mut Xoshiro256PlusPlus) -> f64 {
        self.tp.map_or(self.constant.0, |d| d.sample(rng).clamp(0.0, 1.0))
    }

    fn false_positive(&self, rng: &mut Xoshiro256PlusPlus) -> f64 {
        self.fp.map_or(self.constant.1, |d| d.sample(rng).clamp(0.0, 1.0))
    }
}

fn uniform(rng: &mut Xoshiro256PlusPlus, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn generate(s: &SynthScenario) -> Result<SynthOutput, SynthError> {
    s.validate()?;
    let mut motion_rng = Xoshiro256PlusPlus::seed_from_u64(s.seed);
    let mut noise_rng = motion_rng.clone();
    noise_rng.jump();

    let (fw, fh) = (f64::from(s.frame_width), f64::from(s.frame_height));
    let mut animals: Vec<Animal> = (0..s.n_animals)
        .map(|_| {
            let length = uniform(&mut motion_rng, s.size_min, s.size_max);
            let r = REACH * length;
            Animal {
                center: Point::new(uniform(&mut motion_rng, r, fw - r), uniform(&mut motion_rng, r, fh - r)),
                heading: uniform(&mut motion_rng, -PI, PI),
                speed: uniform(&mut motion_rng, s.motion.speed_min, s.motion.speed_max),
                length,
            }
        })
        .collect();

    let heading_noise = normal(s.motion.heading_sigma);
    let c = &s.corruption;
    let box_noise = normal(c.bbox_jitter);
    let kp_noise = normal(c.keypoint_jitter);
    let scorer = Scorer::new(c.score);
    let fp_whole = libm::floor(c.false_positives_per_frame);
    let fp_frac = c.false_positives_per_frame - fp_whole;

    let mut frames = Vec::with_capacity(s.n_frames as usize);
    let mut predictions = Vec::new();
    let mut correspondence = Vec::new();
    let mut identities = Vec::new();
    let mut next_gt = 1u64;
    let mut next_pred = 1u64;

    for t in 0..s.n_frames {
        let frame_index = s.first_frame + t;
        let key = FrameKey::new(s.video_id.clone(), frame_index);
        if t > 0 {
            for a in animals.iter_mut() {
                if s.motion.heading_sigma > 0.0 {
                    a.heading += heading_noise.sample(&mut motion_rng);
                }
                let r = REACH * a.length;
                let (x, fx) = reflect(a.center.x + a.speed * libm::cos(a.heading), r, fw - r);
                let (y, fy) = reflect(a.center.y + a.speed * libm::sin(a.heading), r, fh - r);
                if fx {
                    a.heading = PI - a.heading;
                }
                if fy {
                    a.heading = -a.heading;
                }
                a.center = Point::new(x, y);
            }
        }

        let mut instances = Vec::with_capacity(animals.len());
        for (ai, a) in animals.iter().enumerate() {
            let mut pose = body_pose(a.center, a.heading, a.length);
            let bbox = body_bbox(a.center, a.heading, a.length, &pose);
            if a.length < s.occlude_ears_below {
                for slot in EAR_SLOTS {
                    pose.keypoints[slot].vis = Visibility::Occluded;
                }
            }
            let gt = Instance::ground_truth(next_gt, bbox, Some(pose));
            identities.push(GroundTruthIdentity { frame: key.clone(), instance: next_gt, animal: ai as u32 });
            next_gt += 1;

            let dropped = c.dropouts.iter().any(|d| d.covers(ai as u32, frame_index));
            let missed = c.miss_rate > 0.0 && noise_rng.random_bool(c.miss_rate);
            if !dropped && !missed {
                let pred = corrupt(&gt, &box_noise, &kp_noise, c, &mut noise_rng);
                let score = scorer.true_positive(&mut noise_rng);
                predictions.push((
                    key.clone(),
                    Instance::prediction(next_pred, pred.0, Some(pred.1), score).expect("scores are clamped to [0, 1]"),
                ));
                correspondence.push(Correspondence {
                    frame: key.clone(),
                    prediction: next_pred,
                    truth: Truth::Animal(ai as u32),
                });
                next_pred += 1;
            }
            instances.push(gt);
        }

        let n_fp = fp_whole as u64 + u64::from(fp_frac > 0.0 && noise_rng.random_bool(fp_frac));
        for _ in 0..n_fp {
            let length = uniform(&mut noise_rng, s.size_min, s.size_max);
            let r = REACH * length;
            let center = Point::new(uniform(&mut noise_rng, r, fw - r), uniform(&mut noise_rng, r, fh - r));
            let heading = uniform(&mut noise_rng, -PI, PI);
            let pose = body_pose(center, heading, length);
            let bbox = body_bbox(center, heading, length, &pose);
            let score = scorer.false_positive(&mut noise_rng);
            predictions.push((
                key.clone(),
                Instance::prediction(next_pred, bbox, Some(pose), score).expect("scores are clamped to [0, 1]"),
            ));
            correspondence.push(Correspondence {
                frame: key.clone(),
                prediction: next_pred,
                truth: Truth::FalsePositive,
            });
            next_pred += 1;
        }

        frames.push(FrameRecord {
            video_id: s.video_id.clone(),
            frame_index,
            width: s.frame_width,
            height: s.frame_height,
            instances,
        });
    }

    let dataset = Dataset::new(frames, Skeleton::default(), None)?;
    let predictions = PredictionSet::new(predictions, &dataset)?;
    Ok(SynthOutput { dataset, predictions, correspondence, identities })
}

/// Jittered copy of a ground-truth box and pose. With zero jitter the result
/// is bit-identical to the input geometry.
fn corrupt(
    gt: &Instance,
    box_noise: &Normal<f64>,
    kp_noise: &Normal<f64>,
    c: &CorruptionConfig,
    rng: &mut Xoshiro256PlusPlus,
) -> (BBox, Pose) {
    let b = gt.bbox;
    let bbox = if c.bbox_jitter > 0.0 {
        let (dcx, dcy) = (box_noise.sample(rng), box_noise.sample(rng));
        let w = (b.w() + box_noise.sample(rng)).max(1.0);
        let h = (b.h() + box_noise.sample(rng)).max(1.0);
        let cx = b.x() + b.w() / 2.0 + dcx;
        let cy = b.y() + b.h() / 2.0 + dcy;
        BBox::from_center(cx, cy, w, h).expect("jittered size is clamped positive")
    } else {
        b
    };
    let mut pose = gt.pose.expect("synthetic ground truth always has a pose");
    for kp in pose.keypoints.iter_mut() {
        if c.keypoint_jitter > 0.0 {
            kp.x += kp_noise.sample(rng);
            kp.y += kp_noise.sample(rng);
        }
        kp.vis = Visibility::Visible;
    }
    (bbox, pose)
}

/// Evaluation quantities known by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OracleMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Per slot, Euclidean distances between each true-positive prediction
    /// and its animal, over ground-truth `Visible` keypoints.
    pub distances: [Vec<f64>; KEYPOINT_COUNT],
}

impl OracleMetrics {
    pub fn slot_rmse(&self, slot: usize) -> Option<f64> {
        rms(&self.distances[slot])
    }

    pub fn overall_rmse(&self) -> Option<f64> {
        let all: Vec<f64> = self.distances.iter().flatten().copied().collect();
        rms(&all)
    }
}

fn rms(d: &[f64]) -> Option<f64> {
    (!d.is_empty()).then(|| libm::sqrt(d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64))
}

/// Derives TP/FP/FN counts and keypoint errors from the correspondence table
/// alone, without any IoU matching.
pub fn oracle_metrics(out: &SynthOutput) -> OracleMetrics {
    let mut m = OracleMetrics::default();
    let gt_by_animal = |frame: &FrameKey, animal: u32| {
        let id = out.identities.iter().find(|g| &g.frame == frame && g.animal == animal)?.instance;
        out.dataset.frame(frame)?.instances.iter().find(|i| i.id == id)
    };
    let mut detected = 0usize;
    for c in &out.correspondence {
        match c.truth {
            Truth::FalsePositive => m.false_positives += 1,
            Truth::Animal(a) => {
                m.true_positives += 1;
                detected += 1;
                let pred = out
                    .predictions
                    .entries()
                    .iter()
                    .find(|(k, p)| k == &c.frame && p.id == c.prediction)
                    .map(|(_, p)| p);
                if let (Some(gt), Some(pred)) = (gt_by_animal(&c.frame, a), pred) {
                    if let (Some(gp), Some(pp)) = (gt.pose, pred.pose) {
                        for (slot, (g, p)) in gp.keypoints.iter().zip(&pp.keypoints).enumerate() {
                            if g.vis == Visibility::Visible && p.is_labeled() {
                                m.distances[slot].push(libm::sqrt(g.point().distance_sq(p.point())));
                            }
                        }
                    }
                }
            }
        }
    }
    m.false_negatives = out.dataset.instance_count() - detected;
    m
}
